"""3D encoder-decoder with a CAM-gated bottleneck and patch classifier.

Encoder: a full-resolution stem block then one stride-2 double-conv block per
additional channel width (defaults 16-32-64-128, so a 128-wide bottleneck at
1/8 resolution).  Each conv is followed by instance norm (no affine params)
and a per-channel PReLU.

Bottleneck: global average pooling gives a channel descriptor F; a single
linear layer (weights W_c, one bias — 129 parameters at width 128) predicts
the patch-level fracture probability P = sigmoid(W_c . F + b).  The same W_c
weights form a class activation map A(x) = sum_k W_c[k] * e3[k, x]; the
decoder consumes e3 gated by sigmoid(A) instead of e3 itself.

With the classifier disabled the gate is skipped entirely and the model is a
plain UNet over the identical encoder/decoder weights.

Default trainable parameter counts: 1,401,506 with the classifier and
1,401,377 without (delta exactly 129).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

CKPT_MAGIC = "fracseg-ckpt-v1"


@dataclass
class CamUNetConfig:
    in_channels: int = 1
    channels: tuple = (16, 32, 64, 128)
    classifier_enabled: bool = True
    patch_edge: int = 128

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ValueError("need at least 2 channel widths")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        levels = len(self.channels) - 1
        if self.patch_edge % (2 ** levels) != 0 or self.patch_edge < 2 ** levels:
            raise ValueError(
                f"patch_edge {self.patch_edge} not divisible by 2^{levels} downsamplings")


@dataclass
class ForwardOutput:
    seg_probs: torch.Tensor        # (B, E, E, E) in [0, 1]
    cls_prob: torch.Tensor         # (B,) in (0, 1); None when classifier disabled
    bottleneck: torch.Tensor       # e3: (B, c, e, e, e)
    gated: torch.Tensor            # d0: same shape as bottleneck
    activation_map: torch.Tensor   # (B, e, e, e), pre-sigmoid CAM; None if disabled


def gap_channelwise(e3: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: (B,c,w,h,d) -> (B,c) or (c,w,h,d) -> (c,)."""
    if e3.ndim not in (4, 5):
        raise ValueError(f"expected (B,c,w,h,d) or (c,w,h,d), got ndim={e3.ndim}")
    if any(s < 1 for s in e3.shape[-3:]):
        raise ValueError("empty spatial extent")
    return e3.mean(dim=(-3, -2, -1))


def classify_patch(F: torch.Tensor, W_c: torch.Tensor, bias) -> torch.Tensor:
    """P = sigmoid(W_c . F + bias); F may carry a leading batch dim."""
    if F.shape[-1] != W_c.shape[-1]:
        raise ValueError(f"dim mismatch: F has {F.shape[-1]} channels, W_c {W_c.shape[-1]}")
    return torch.sigmoid((F * W_c).sum(dim=-1) + bias)


def cam_gate(e3: torch.Tensor, W_c: torch.Tensor):
    """Gate bottleneck features by their class activation map.

    A(x) = sum_k W_c[k]*e3[k,x] (returned raw for visualization); the decoder
    input is e3 * sigmoid(A) broadcast across channels.
    """
    batched = e3.ndim == 5
    x = e3 if batched else e3.unsqueeze(0)
    if x.shape[1] != W_c.shape[-1]:
        raise ValueError(f"dim mismatch: e3 has {x.shape[1]} channels, W_c {W_c.shape[-1]}")
    amap = torch.einsum("bcwhd,c->bwhd", x, W_c)
    d0 = x * torch.sigmoid(amap).unsqueeze(1)
    if not batched:
        d0, amap = d0.squeeze(0), amap.squeeze(0)
    return d0, amap


class _ConvBlock(nn.Sequential):
    """Two 3x3x3 convs + instance norm + channelwise PReLU; stride-2 first conv downsamples."""

    def __init__(self, cin, cout, stride=1):
        super().__init__(
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
            nn.InstanceNorm3d(cout),
            nn.PReLU(cout),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.InstanceNorm3d(cout),
            nn.PReLU(cout),
        )


class _UpBlock(nn.Module):
    """Transpose-conv upsample, then double conv over the concatenated skip."""

    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, 2, stride=2)
        self.norm = nn.InstanceNorm3d(cout)
        self.act = nn.PReLU(cout)
        self.block = _ConvBlock(2 * cout, cout)

    def forward(self, x, skip):
        x = self.act(self.norm(self.up(x)))
        return self.block(torch.cat([x, skip], dim=1))


class CamUNet(nn.Module):
    def __init__(self, config: CamUNetConfig = None):
        super().__init__()
        self.config = config or CamUNetConfig()
        ch = self.config.channels
        encoders = [_ConvBlock(self.config.in_channels, ch[0])]
        encoders += [_ConvBlock(ch[i - 1], ch[i], stride=2) for i in range(1, len(ch))]
        self.encoders = nn.ModuleList(encoders)
        self.decoders = nn.ModuleList(
            [_UpBlock(ch[i], ch[i - 1]) for i in range(len(ch) - 1, 0, -1)])
        self.head = nn.Conv3d(ch[0], 1, 1)
        self.classifier = nn.Linear(ch[-1], 1) if self.config.classifier_enabled else None

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        squeeze = x.ndim == 4
        if squeeze:
            x = x.unsqueeze(0)
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B,{self.config.in_channels},E,E,E) input, "
                             f"got {tuple(x.shape)}")
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        e3 = skips.pop()
        if self.classifier is not None:
            W_c = self.classifier.weight[0]
            F = gap_channelwise(e3)
            P = classify_patch(F, W_c, self.classifier.bias[0])
            d0, amap = cam_gate(e3, W_c)
        else:
            d0, P, amap = e3, None, None
        h = d0
        for dec in self.decoders:
            h = dec(h, skips.pop())
        seg = torch.sigmoid(self.head(h)).squeeze(1)
        if squeeze:
            seg = seg.squeeze(0)
            e3, d0 = e3.squeeze(0), d0.squeeze(0)
            if P is not None:
                P, amap = P.squeeze(0), amap.squeeze(0)
        return ForwardOutput(seg, P, e3, d0, amap)


def init_params(config: CamUNetConfig, seed: int) -> CamUNet:
    """Build a CamUNet with Kaiming-normal conv/linear weights, zero biases.

    Seeding happens after construction so the draw order is the module
    registration order; the classifier registers last, which keeps the
    segmentation weights identical across the classifier on/off ablation at
    equal seeds.
    """
    model = CamUNet(config)
    torch.manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line (magic, config, extra, parameter
# index with shapes) + concatenated little-endian float32 parameter payload

def save_checkpoint(model: CamUNet, path, extra: dict = None) -> None:
    named = [(name, p.detach().cpu().numpy().astype("<f4"))
             for name, p in model.state_dict().items()]
    header = {
        "format": CKPT_MAGIC,
        "config": asdict(model.config),
        "extra": extra or {},
        "params": [{"name": n, "shape": list(a.shape)} for n, a in named],
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for _, a in named:
            f.write(a.tobytes())


def load_checkpoint(path):
    """Returns (model, extra) with parameters restored as float32."""
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}: malformed checkpoint header: {e}") from e
        if header.get("format") != CKPT_MAGIC:
            raise ValueError(f"{path}: not a {CKPT_MAGIC} checkpoint")
        state = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: checkpoint payload truncated at {entry['name']}")
            state[entry["name"]] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f4").copy().reshape(shape))
    config = CamUNetConfig(**{**header["config"],
                              "channels": tuple(header["config"]["channels"])})
    model = CamUNet(config)
    model.load_state_dict(state)
    return model, header.get("extra", {})
