"""Hyperspectral cubes, label maps, their binary containers, synthetic
scenes and per-class stratified splits."""

import struct
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import FormatError, ParameterError, SplitError
from .rng import derive_rng

CUBE_MAGIC = b"HSIC"
LABEL_MAGIC = b"HSIL"
FORMAT_VERSION = 1
_CUBE_HEADER = struct.Struct("<4sHIII")
_LABEL_HEADER = struct.Struct("<4sHII")
MAX_EXTENT_BYTES = 1 << 40


@dataclass
class Cube:
    values: np.ndarray  # (C, H, W)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError(f"cube must be (C>=1, H, W), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")

    @property
    def bands(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


@dataclass
class LabelMap:
    values: np.ndarray  # (H, W), 0 = unlabeled
    num_classes: int = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"label map must be 2-d, got {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("negative class index")
        top = int(self.values.max()) if self.values.size else 0
        if self.num_classes is None:
            self.num_classes = top
        elif top > self.num_classes:
            raise ValueError(f"label {top} exceeds num_classes={self.num_classes}")

    @property
    def shape(self):
        return self.values.shape


def _labels_array(labels):
    return labels.values if isinstance(labels, LabelMap) else np.asarray(labels)


# ----------------------------------------------------------------- containers

def write_cube(cube, path):
    v = np.ascontiguousarray(cube.values if isinstance(cube, Cube) else cube, dtype="<f4")
    C, H, W = v.shape
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(CUBE_MAGIC, FORMAT_VERSION, C, H, W))
        fh.write(v.tobytes())


def _read_payload(buf, header, magic, path):
    if len(buf) < 4 or buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at offset 0, expected {magic!r}")
    if len(buf) < header.size:
        raise FormatError(f"{path}: truncated header: expected {header.size} bytes, "
                          f"got {len(buf)}")
    fields = header.unpack_from(buf, 0)
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {fields[1]} at offset 4")
    return fields[2:]


def read_cube(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    C, H, W = _read_payload(buf, _CUBE_HEADER, CUBE_MAGIC, path)
    expected = 4 * C * H * W
    if expected > MAX_EXTENT_BYTES:
        raise FormatError(f"{path}: extents {C}x{H}x{W} at offset 6 overflow the size limit")
    actual = len(buf) - _CUBE_HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload at offset {_CUBE_HEADER.size} is {actual} bytes, "
                          f"expected {expected}")
    v = np.frombuffer(buf, dtype="<f4", offset=_CUBE_HEADER.size).reshape(C, H, W)
    return Cube(v.astype(np.float32))


def write_labels(labels, path):
    v = np.ascontiguousarray(_labels_array(labels), dtype="<u2")
    H, W = v.shape
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, H, W))
        fh.write(v.tobytes())


def read_labels(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    H, W = _read_payload(buf, _LABEL_HEADER, LABEL_MAGIC, path)
    expected = 2 * H * W
    if expected > MAX_EXTENT_BYTES:
        raise FormatError(f"{path}: extents {H}x{W} at offset 6 overflow the size limit")
    actual = len(buf) - _LABEL_HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload at offset {_LABEL_HEADER.size} is {actual} bytes, "
                          f"expected {expected}")
    v = np.frombuffer(buf, dtype="<u2", offset=_LABEL_HEADER.size).reshape(H, W)
    return LabelMap(v.astype(np.int64))


# ---------------------------------------------------------------------- splits

@dataclass
class SplitMask:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def counts(self, labels):
        """``{class: (train, val, test)}`` pixel counts."""
        lab = _labels_array(labels)
        out = {}
        for k in np.unique(lab[lab > 0]):
            sel = lab == k
            out[int(k)] = (int((self.train & sel).sum()), int((self.val & sel).sum()),
                           int((self.test & sel).sum()))
        return out


def parse_split_overrides(text):
    """Parse ``class_index train_n val_n`` lines; ``#`` starts a comment."""
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 'class_index train_n val_n'")
        try:
            k, tr, va = (int(p) for p in parts)
        except ValueError:
            raise FormatError(f"line {lineno}: non-integer field") from None
        table[k] = (tr, va)
    return table


def read_split_overrides(path):
    with open(path) as fh:
        return parse_split_overrides(fh.read())


def indian_pines_overrides():
    """Per-class train/val counts of the Indian Pines split shipped with the package."""
    text = resources.files("hsmamba").joinpath("fixtures/indian_pines_split.txt").read_text()
    return parse_split_overrides(text)


def stratified_split(labels, train_n=30, val_n=10, overrides=None, seed=0):
    """Per class: ``min(train_n, n-2)`` train, then ``min(val_n, rest-1)`` val, rest test.

    Classes are visited in ascending order and sampled without replacement
    from one seeded stream.
    """
    lab = _labels_array(labels)
    overrides = overrides or {}
    rng = derive_rng(seed, "split")
    masks = [np.zeros(lab.shape, dtype=bool) for _ in range(3)]
    flat = lab.reshape(-1)
    for k in np.unique(flat[flat > 0]):
        idx = np.flatnonzero(flat == k)
        n = idx.size
        if n < 3:
            raise SplitError(f"class {int(k)} has {n} labeled pixels; at least 3 required")
        tr, va = overrides.get(int(k), (train_n, val_n))
        n_tr = min(tr, n - 2)
        n_va = min(va, n - n_tr - 1)
        perm = rng.permutation(idx)
        for mask, part in zip(masks, (perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:])):
            mask.reshape(-1)[part] = True
    return SplitMask(*masks)


# ------------------------------------------------------------------ synthetic

def class_signatures(C, K, seed):
    """Smooth spectra: baseline plus two Gaussian bumps per class."""
    rng = derive_rng(seed, "signatures")
    bands = np.arange(C, dtype=np.float64)
    span = max(C - 1, 1)
    sig = np.empty((K, C))
    for k in range(K):
        c1 = (k + 0.5) / K * span + rng.uniform(-0.1, 0.1) * span / K
        c2 = rng.uniform(0, span)
        w1, w2 = rng.uniform(0.08, 0.2, size=2) * span + 0.5
        a1, a2 = rng.uniform(0.4, 1.0), rng.uniform(0.1, 0.5)
        sig[k] = (0.1 + a1 * np.exp(-0.5 * ((bands - c1) / w1) ** 2)
                  + a2 * np.exp(-0.5 * ((bands - c2) / w2) ** 2))
    return sig


def voronoi_labels(H, W, K, rng):
    sites = rng.choice(H * W, size=K, replace=False)
    sy, sx = np.divmod(sites, W)
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy[None] - sy[:, None, None]) ** 2 + (xx[None] - sx[:, None, None]) ** 2
    return d2.argmin(axis=0) + 1


def synth_scene(H, W, C, K, noise_sigma=0.05, seed=0):
    """Voronoi-partitioned scene; each region carries its class signature plus noise."""
    if K < 1 or K > H * W:
        raise ParameterError(f"need 1 <= K <= H*W, got K={K} for {H}x{W}")
    rng = derive_rng(seed, "synth")
    labels = voronoi_labels(H, W, K, rng)
    sig = class_signatures(C, K, seed)
    values = sig[labels - 1].transpose(2, 0, 1)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    return Cube(values), LabelMap(labels, K)


def normalize(cube, method="minmax"):
    """Per-band min-max to [0, 1] (constant bands map to 0), or per-band z-score."""
    v = np.asarray(cube.values if isinstance(cube, Cube) else cube, dtype=np.float64)
    flat = v.reshape(v.shape[0], -1)
    if method == "minmax":
        lo = flat.min(axis=1)[:, None, None]
        rng_ = (flat.max(axis=1) - flat.min(axis=1))[:, None, None]
        out = np.divide(v - lo, rng_, out=np.zeros_like(v), where=rng_ > 0)
    elif method == "zscore":
        mu = flat.mean(axis=1)[:, None, None]
        sd = flat.std(axis=1)[:, None, None]
        out = np.divide(v - mu, sd, out=np.zeros_like(v), where=sd > 0)
    elif method == "none":
        out = v.copy()
    else:
        raise ParameterError(f"unknown normalization {method!r}")
    return Cube(out)
