"""Command-line entrypoint wiring the whole pipeline.

Subcommands: phantom, prepare, train, infer, eval, plot.  A JSON config file
fully determines a training run; individual keys can be overridden with
--set dotted.key=value.  Relative output paths are rooted at $FRACSEG_OUT_ROOT
when that variable is set.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import inference, metrics, phantom, plots, postprocess, sampling, training
from . import network, volume_io

OUT_ROOT_ENV = "FRACSEG_OUT_ROOT"
SWEEP_PROB = (0.4, 0.5, 0.6)
SWEEP_SIZE = (50, 100, 150, 200)


def _rooted(path):
    root = os.environ.get(OUT_ROOT_ENV)
    if root and path and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _stem(name):
    for suf in (".nii.gz", ".nii", ".rtv"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return os.path.splitext(name)[0]


def _pair_dirs(a_dir, b_dir, what):
    """Match files in two directories by stem; unpaired ids are an error."""
    a = {_stem(n): os.path.join(a_dir, n) for n in sorted(os.listdir(a_dir))
         if not n.startswith(".") and os.path.isfile(os.path.join(a_dir, n))}
    b = {_stem(n): os.path.join(b_dir, n) for n in sorted(os.listdir(b_dir))
         if not n.startswith(".") and os.path.isfile(os.path.join(b_dir, n))}
    missing = sorted(set(a) ^ set(b))
    if missing:
        raise ValueError(f"unpaired {what} ids: {', '.join(missing)}")
    if not a:
        raise ValueError(f"no {what} pairs found in {a_dir} / {b_dir}")
    return [(k, a[k], b[k]) for k in sorted(a)]


def _apply_sets(cfg: dict, assignments):
    for item in assignments or []:
        if "=" not in item:
            raise ValueError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"--set {key}: {p} is not a nested section")
        node[parts[-1]] = value
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args) -> int:
    spec = phantom.PhantomSpec(
        shape=tuple(args.shape), n_ribs=args.ribs, n_fractures=args.fractures,
        fracture_size_range=tuple(args.size_range), noise_sigma=args.noise,
        seed=args.seed, ring_center_frac=tuple(args.ring_center))
    manifest = phantom.write_phantom_set(_rooted(args.out), args.count, spec)
    print(f"wrote {args.count} phantom pair(s); manifest {manifest}")
    return 0


def cmd_prepare(args) -> int:
    pairs = _pair_dirs(args.volumes, args.masks, "volume/mask")
    lookup, plans = {}, []
    for i, (vid, vpath, mpath) in enumerate(pairs):
        volume = volume_io.load_volume(vpath)
        volume.volume_id = vid
        mask = volume_io.load_mask(mpath, expected_shape=volume.shape)
        lookup[vid] = (volume, mask)
        plans.append(sampling.plan_samples(
            volume, mask, jitter=args.jitter, seed=args.seed + i,
            patch_edge=args.patch_edge))
    manifest = sampling.build_cache(plans, _rooted(args.out), lookup)
    records = sampling.read_manifest(manifest)
    n_pos = sum(r["label"] for r in records)
    by_source = {}
    for r in records:
        if r["source"] != "pos":
            by_source[r["source"]] = by_source.get(r["source"], 0) + 1
    print(f"cached {len(records)} patches: {n_pos} positive, "
          f"{len(records) - n_pos} negative {by_source}")
    print(f"manifest {manifest}")
    return 0


def _load_train_config(args) -> training.TrainConfig:
    with open(args.config) as f:
        cfg = json.load(f)
    cfg = _apply_sets(cfg, args.set)
    if args.no_classifier:
        cfg.setdefault("model", {})["classifier_enabled"] = False
    known = set(training.TrainConfig.__dataclass_fields__)
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}; "
                         f"known keys: {', '.join(sorted(known))}")
    cfg["out_dir"] = _rooted(cfg.get("out_dir", "runs/run0"))
    return training.TrainConfig(**cfg)


def cmd_train(args) -> int:
    base = _load_train_config(args)
    out_root = base.out_dir
    for rep in range(args.repeats):
        cfg_d = asdict(base)
        cfg_d["seed"] = base.seed + 1000 * rep
        if args.repeats > 1:
            cfg_d["out_dir"] = os.path.join(out_root, f"run{rep}")
        cfg = training.TrainConfig(**cfg_d)
        best, history = training.train(cfg)
        model, extra = network.load_checkpoint(best)
        print(f"seed {cfg.seed}: {len(history)} epochs, best epoch "
              f"{extra.get('epoch')} (val loss {extra.get('val_loss'):.6f}), "
              f"{network.parameter_count(model)} parameters, checkpoint {best}")
    return 0


def cmd_infer(args) -> int:
    model, _ = network.load_checkpoint(args.checkpoint)
    volume = volume_io.load_volume(args.volume)
    windows = inference.sliding_windows(volume.shape, model.config.patch_edge,
                                        args.stride)
    print(f"{volume.volume_id}: {len(windows)} window(s) at stride {args.stride}")
    field = inference.predict_volume(model, volume, stride=args.stride)
    out = _rooted(args.out)
    volume_io.save_prediction(volume.volume_id, field, out, volume.spacing)
    print(f"wrote {out}")
    return 0


def _eval_once(pairs, volumes_dir, cfg: postprocess.PostprocessConfig):
    proposals, gt_masks, dscs = {}, {}, []
    n_proposals = 0
    for vid, ppath, gpath in pairs:
        prob, _ = volume_io.load_prediction(ppath)
        gt = volume_io.load_mask(gpath, expected_shape=prob.shape)
        volume = None
        if volumes_dir:
            vpath = _find_volume(volumes_dir, vid)
            volume = volume_io.load_volume(vpath)
            volume.volume_id = vid
        props = postprocess.extract_proposals(prob, volume, cfg)
        for p in props:
            p.volume_id = vid
        proposals[vid] = props
        gt_masks[vid] = gt
        n_proposals += len(props)
        pred_mask = postprocess.proposals_to_mask(props, prob.shape)
        dscs.append(metrics.dsc_volume(pred_mask, gt.binary()))
    matched = metrics.match_proposals(proposals, gt_masks)
    froc_result = metrics.froc(matched)
    doc = metrics.report(dscs, froc_result)
    doc["n_proposals"] = n_proposals
    doc["prob_threshold"] = cfg.prob_threshold
    doc["size_threshold"] = cfg.size_threshold
    return doc


def _find_volume(volumes_dir, vid):
    for suf in (".rtv", ".nii.gz", ".nii"):
        p = os.path.join(volumes_dir, vid + suf)
        if os.path.exists(p):
            return p
    raise ValueError(f"no volume file for id {vid!r} in {volumes_dir}")


def cmd_eval(args) -> int:
    pairs = _pair_dirs(args.pred, args.gt, "prediction/ground-truth")
    if args.sweep:
        rows = []
        for prob_th in SWEEP_PROB:
            for size_th in SWEEP_SIZE:
                cfg = postprocess.PostprocessConfig(
                    prob_threshold=prob_th, size_threshold=size_th,
                    spine_exclusion=args.volumes is not None)
                rows.append(_eval_once(pairs, args.volumes, cfg))
        print(f"{'prob':>5} {'size':>5} {'n_prop':>6} {'dsc_mean':>9} {'froc_avg':>9}")
        for row in rows:
            print(f"{row['prob_threshold']:>5.2f} {row['size_threshold']:>5d} "
                  f"{row['n_proposals']:>6d} {row['dsc_mean']:>9.4f} "
                  f"{row['froc_avg']:>9.4f}")
        doc = {"sweep": rows}
    else:
        cfg = postprocess.PostprocessConfig(
            prob_threshold=args.prob_th, size_threshold=args.size_th,
            spine_exclusion=args.volumes is not None)
        doc = _eval_once(pairs, args.volumes, cfg)
        print(metrics.format_report(doc))
    if args.out:
        out = _rooted(args.out)
        with open(out, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
        print(f"wrote {out}")
    return 0


def cmd_plot(args) -> int:
    out = _rooted(args.out)
    if args.kind == "froc":
        with open(args.report) as f:
            doc = json.load(f)
        plots.plot_froc(doc, out)
    elif args.kind == "overlay":
        volume = volume_io.load_volume(args.volume)
        gt = volume_io.load_mask(args.mask, volume.shape).binary() if args.mask else None
        pred = None
        if args.pred:
            prob, _ = volume_io.load_prediction(args.pred)
            pred = prob >= args.prob_th
        plots.plot_overlay(volume, gt, pred, args.slice, out)
    else:  # cam
        model, _ = network.load_checkpoint(args.checkpoint)
        volume = volume_io.load_volume(args.volume)
        edge = model.config.patch_edge
        center = tuple(s // 2 for s in volume.shape)
        patch = sampling.extract_patch(volume, None, center, edge)
        import torch
        with torch.no_grad():
            fwd = model(torch.from_numpy(patch.intensities).unsqueeze(0))
        if fwd.activation_map is None:
            raise ValueError("checkpoint has no classifier; no CAM to plot")
        plots.plot_cam(patch.intensities, fwd.activation_map.numpy(), args.slice, out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fracseg",
        description="3D rib-fracture segmentation pipeline",
        epilog=f"Exit codes: 0 success, 1 validation error, 2 runtime error. "
               f"Set ${OUT_ROOT_ENV} to re-root relative output paths.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate synthetic CT/mask pairs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--shape", type=int, nargs=3, default=[192, 192, 192])
    sp.add_argument("--ribs", type=int, default=4)
    sp.add_argument("--fractures", type=int, default=2)
    sp.add_argument("--size-range", type=int, nargs=2, default=[180, 600])
    sp.add_argument("--noise", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ring-center", type=float, nargs=2, default=[0.5, 0.5],
                    help="rib ring center as fraction of (W, H)")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("prepare", help="build the training patch cache")
    sp.add_argument("--volumes", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jitter", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--patch-edge", type=int, default=128)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--no-classifier", action="store_true",
                    help="ablation: plain UNet without the patch classifier")
    sp.add_argument("--repeats", type=int, default=1,
                    help="number of runs with derived seeds")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config key (dotted for nested)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="sliding-window whole-volume prediction")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--stride", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="postprocess + FROC/DSC evaluation")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--volumes", default=None,
                    help="CT dir for the bone-HU and spine filters; "
                         "omitting it skips those filters")
    sp.add_argument("--prob-th", type=float, default=0.6)
    sp.add_argument("--size-th", type=int, default=150)
    sp.add_argument("--sweep", action="store_true",
                    help="evaluate the full threshold grid "
                         f"{SWEEP_PROB} x {SWEEP_SIZE}")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="FROC curve / slice overlay / CAM heat-map")
    sp.add_argument("--kind", choices=("froc", "overlay", "cam"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="froc: eval JSON document")
    sp.add_argument("--volume", help="overlay/cam: CT volume file")
    sp.add_argument("--mask", help="overlay: ground-truth mask file")
    sp.add_argument("--pred", help="overlay: probability field file")
    sp.add_argument("--prob-th", type=float, default=0.6)
    sp.add_argument("--checkpoint", help="cam: model checkpoint")
    sp.add_argument("--slice", type=int, default=0, help="axial slice index")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 — runtime failures get exit code 2
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
