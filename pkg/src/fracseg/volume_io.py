"""CT volume / mask I/O: NIfTI-1 subset and a raw test format.

Two on-disk formats:

* raw test format (``.rtv``) — one UTF-8 JSON header line
  ``{"shape": [W,H,D], "spacing": [..], "dtype": "f32"|"u8"|"u16", "id": ..}``
  terminated by ``\\n``, followed by the little-endian voxel payload with W
  fastest (Fortran order).  Bit-exact round trips, no dependencies.
* standard medical format — ``.nii`` / ``.nii.gz``.  A minimal conformant
  NIfTI-1 reader/writer is implemented here directly (348-byte header,
  single-file magic ``n+1``) because no NIfTI package is available in the
  build environment.

In-memory arrays are always indexed ``(W, H, D)``.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

HU_MIN = -200.0
HU_MAX = 1000.0

_RAW_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "u16": np.dtype("<u2")}

# NIfTI-1 datatype codes we accept
_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("i1"),
    512: np.dtype("<u2"),
}


@dataclass
class CtVolume:
    """A CT scan: Hounsfield intensities of shape (W, H, D) plus metadata.

    Spacing is carried as mm/voxel metadata only; nothing in the pipeline
    resamples on it.
    """

    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    volume_id: str = ""

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if self.intensities.ndim != 3:
            raise ValueError(f"intensities must be 3-D (W,H,D), got ndim={self.intensities.ndim}")
        if any(s < 1 for s in self.intensities.shape):
            raise ValueError(f"degenerate volume shape {self.intensities.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive mm/voxel values, got {self.spacing}")

    @property
    def shape(self) -> tuple:
        return self.intensities.shape


@dataclass
class FractureMask:
    """Instance labels aligned to a CtVolume: 0 = background, k>0 = fracture k.

    Labels are kept contiguous {0..K}; use from_array() to build one from
    arbitrary file contents.
    """

    labels: np.ndarray
    volume_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3-D (W,H,D), got ndim={self.labels.ndim}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("mask contains negative labels")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def num_instances(self) -> int:
        return int(self.labels.max())

    def binary(self) -> np.ndarray:
        return self.labels > 0


def normalize_hu(x: np.ndarray) -> np.ndarray:
    """Clamp HU to [-200, 1000] and rescale linearly onto [-1, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float32), HU_MIN, HU_MAX)
    return (x - HU_MIN) / ((HU_MAX - HU_MIN) / 2.0) - 1.0


# ---------------------------------------------------------------------------
# raw test format

def save_raw(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), volume_id: str = "",
             dtype: str = None) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError("raw test format stores 3-D arrays")
    if dtype is None:
        dtype = {"f": "f32", "u": {1: "u8", 2: "u16"}.get(array.dtype.itemsize, "u16"),
                 "i": "u16", "b": "u8"}[array.dtype.kind]
    if dtype not in _RAW_DTYPES:
        raise ValueError(f"unsupported raw dtype {dtype!r}; expected one of {sorted(_RAW_DTYPES)}")
    np_dtype = _RAW_DTYPES[dtype]
    header = {
        "shape": [int(s) for s in array.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "id": str(volume_id),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(array, dtype=np_dtype).tobytes(order="F"))


def load_raw(path):
    """Returns (array (W,H,D), spacing, volume_id)."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}: malformed raw-test header: {e}") from e
        for key in ("shape", "spacing", "dtype"):
            if key not in header:
                raise ValueError(f"{path}: raw-test header missing {key!r}")
        shape = tuple(int(s) for s in header["shape"])
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise ValueError(f"{path}: bad shape {shape} in header")
        if header["dtype"] not in _RAW_DTYPES:
            raise ValueError(f"{path}: unknown dtype {header['dtype']!r}")
        np_dtype = _RAW_DTYPES[header["dtype"]]
        payload = f.read()
    expected = int(np.prod(shape)) * np_dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes but header shape {shape} "
            f"needs {expected}")
    array = np.frombuffer(payload, dtype=np_dtype).reshape(shape, order="F")
    return array, tuple(float(s) for s in header["spacing"]), str(header.get("id", ""))


# ---------------------------------------------------------------------------
# NIfTI-1 subset

def _read_nifti(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise ValueError(f"{path}: truncated NIfTI header")
        for bo in ("<", ">"):
            sizeof_hdr = struct.unpack(bo + "i", hdr[:4])[0]
            if sizeof_hdr == 348:
                break
        else:
            raise ValueError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        magic = hdr[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise ValueError(f"{path}: bad NIfTI magic {magic!r}")
        dim = struct.unpack(bo + "8h", hdr[40:56])
        ndim = dim[0]
        if ndim < 3:
            raise ValueError(f"{path}: need a 3-D volume, header says dim[0]={ndim}")
        shape = tuple(int(d) for d in dim[1:4])
        if any(d > 1 for d in dim[4:1 + ndim]):
            raise ValueError(f"{path}: >3-D volumes unsupported (dim={dim})")
        datatype, bitpix = struct.unpack(bo + "hh", hdr[70:74])
        if datatype not in _NIFTI_DTYPES:
            raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
        np_dtype = _NIFTI_DTYPES[datatype].newbyteorder(bo)
        pixdim = struct.unpack(bo + "8f", hdr[76:108])
        vox_offset = struct.unpack(bo + "f", hdr[108:112])[0]
        scl_slope, scl_inter = struct.unpack(bo + "ff", hdr[112:120])
        f.read(max(int(vox_offset) - 348, 0))
        nbytes = int(np.prod(shape)) * np_dtype.itemsize
        payload = f.read(nbytes)
    if len(payload) != nbytes:
        raise ValueError(f"{path}: NIfTI payload truncated ({len(payload)} < {nbytes} bytes)")
    array = np.frombuffer(payload, dtype=np_dtype).reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        array = array.astype(np.float32) * slope + scl_inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return array, spacing


def _write_nifti(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    array = np.asarray(array)
    code, dtype = {
        "b": (2, np.dtype("u1")),
        ("u", 1): (2, np.dtype("u1")),
        ("u", 2): (512, np.dtype("<u2")),
        ("i", 2): (4, np.dtype("<i2")),
        ("i", 4): (8, np.dtype("<i4")),
        ("f", 4): (16, np.dtype("<f4")),
        ("f", 8): (64, np.dtype("<f8")),
    }.get(array.dtype.kind if array.dtype.kind == "b"
          else (array.dtype.kind, array.dtype.itemsize), (16, np.dtype("<f4")))
    data = np.ascontiguousarray(array, dtype=dtype)
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *array.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *[float(s) for s in spacing], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)   # vox_offset
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[344:348] = b"n+1\x00"
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(data.tobytes(order="F"))


# ---------------------------------------------------------------------------
# public API

def _is_raw(path) -> bool:
    return str(path).endswith(".rtv")


def load_volume(path, format: str = None) -> CtVolume:
    """Load a CT volume from raw-test or NIfTI format (inferred from suffix).

    Intensities come back exactly as stored; no normalization happens here.
    """
    if format is None:
        format = "raw-test" if _is_raw(path) else "standard-medical"
    if format == "raw-test":
        array, spacing, vid = load_raw(path)
        return CtVolume(array.astype(np.float32), spacing, vid)
    elif format == "standard-medical":
        array, spacing = _read_nifti(path)
        vid = _strip_suffixes(path)
        return CtVolume(array.astype(np.float32), spacing, vid)
    raise ValueError(f"unknown volume format {format!r}")


def save_volume(volume: CtVolume, path) -> None:
    if _is_raw(path):
        save_raw(path, volume.intensities.astype(np.float32), volume.spacing,
                 volume.volume_id, dtype="f32")
    else:
        _write_nifti(path, volume.intensities.astype(np.float32), volume.spacing)


def _strip_suffixes(path) -> str:
    import os
    name = os.path.basename(str(path))
    for suf in (".nii.gz", ".nii", ".rtv"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return name


def relabel_components(binary: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label a binary field into contiguous instance ids {1..K}."""
    order = {6: 1, 18: 2, 26: 3}
    if connectivity not in order:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, order[connectivity])
    labels, _ = ndimage.label(binary, structure=structure)
    return labels


def load_mask(path, expected_shape=None) -> FractureMask:
    """Load an instance mask; binary files are split into connected components.

    Stored label values other than {0,1} are kept as instances but remapped to
    a contiguous {0..K} range.
    """
    if _is_raw(path):
        array, _, vid = load_raw(path)
    else:
        array, _ = _read_nifti(path)
        vid = _strip_suffixes(path)
    if expected_shape is not None and tuple(array.shape) != tuple(expected_shape):
        raise ValueError(
            f"{path}: mask shape {tuple(array.shape)} != expected {tuple(expected_shape)}")
    array = np.asarray(array)
    if array.dtype.kind == "f":
        if not np.allclose(array, np.round(array)):
            raise ValueError(f"{path}: mask holds non-integer values")
        array = np.round(array).astype(np.int32)
    if array.size and array.min() < 0:
        raise ValueError(f"{path}: mask contains negative labels")
    values = np.unique(array)
    if len(values) <= 1:
        labels = np.zeros(array.shape, dtype=np.int32)
    elif values.max() == 1:
        labels = relabel_components(array > 0)
    else:
        # already instance-labeled; compress ids to a contiguous range
        labels = np.searchsorted(values, array).astype(np.int32)
    return FractureMask(labels.astype(np.int32), vid)


def save_mask(mask: FractureMask, path) -> None:
    labels = mask.labels
    if labels.max() > np.iinfo(np.uint16).max:
        raise ValueError("more than 65535 instances; raw test format stores u16 masks")
    if _is_raw(path):
        save_raw(path, labels.astype(np.uint16), volume_id=mask.volume_id, dtype="u16")
    else:
        _write_nifti(path, labels.astype(np.uint16))


def save_prediction(volume_id: str, probabilities: np.ndarray, path,
                    spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a probability field; raw-test storage is lossless float32."""
    probabilities = np.asarray(probabilities)
    if probabilities.size == 0:
        raise ValueError("empty probability field")
    lo, hi = float(probabilities.min()), float(probabilities.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"probabilities outside [0,1]: range [{lo}, {hi}]")
    if _is_raw(path):
        save_raw(path, probabilities.astype(np.float32), spacing, volume_id, dtype="f32")
    else:
        _write_nifti(path, probabilities.astype(np.float32), spacing)


def load_prediction(path):
    """Returns (probabilities float32 (W,H,D), volume_id)."""
    if _is_raw(path):
        array, _, vid = load_raw(path)
    else:
        array, _ = _read_nifti(path)
        vid = _strip_suffixes(path)
    return array.astype(np.float32), vid
