"""End-to-end HS-Mamba network: embedding, three blocks with downsampling,
nearest upsampling, and a per-pixel classifier."""

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops
from .dcss import DCSSEncoder
from .errors import ConfigurationError, FormatError
from .lgi import LGIAttention, apply_global_gates
from .rng import derive_rng
from .tensor import ParamStore, Tensor, as_tensor

FUSION_MODES = ("gated", "sum", "adaptive_sum", "concat")
BRANCHES = ("both", "spe", "spa")
UPSAMPLE_SOURCES = ("merge", "last")


@dataclass
class ModelConfig:
    D: int = 128
    P0: int = 9
    groups_spe: int = 16
    groups_spa: int = 16
    state_size: int = 16
    num_classes: int = 16
    gn_groups: int = 8
    tau: int = 4
    fusion_mode: str = "gated"
    use_pos_encoding: bool = True
    use_lgi: bool = True
    blocks: int = 3
    branches: str = "both"
    upsample_source: str = "merge"
    zoh_exact: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.D % self.gn_groups:
            raise ConfigurationError(f"D={self.D} not divisible by gn_groups={self.gn_groups}")
        if self.use_lgi and self.D % self.tau:
            raise ConfigurationError(f"D={self.D} not divisible by tau={self.tau}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.branches not in BRANCHES:
            raise ConfigurationError(f"unknown branch selection {self.branches!r}")
        if self.upsample_source not in UPSAMPLE_SOURCES:
            raise ConfigurationError(f"unknown upsample source {self.upsample_source!r}")
        if not 0 <= self.blocks <= 3:
            raise ConfigurationError(f"blocks must be in 0..3, got {self.blocks}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def _conv_init(store, name, d_out, d_in, rng):
    b = 1 / np.sqrt(d_in)
    return (store.add(name + ".weight", rng.uniform(-b, b, (d_out, d_in))),
            store.add(name + ".bias", rng.uniform(-b, b, d_out)))


class Fusion:
    """Combine the two branch maps according to ``mode``."""

    def __init__(self, store, prefix, D, mode, rng):
        if mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.params = {}
        if mode == "gated":
            self.params["weight"], self.params["bias"] = _conv_init(
                store, prefix + ".gate", 1, 2 * D, rng)
        elif mode == "adaptive_sum":
            self.params["alpha"] = store.add(prefix + ".alpha", np.full(1, 0.5))
            self.params["beta"] = store.add(prefix + ".beta", np.full(1, 0.5))
        elif mode == "concat":
            self.params["weight"], self.params["bias"] = _conv_init(
                store, prefix + ".proj", D, 2 * D, rng)

    def __call__(self, F_spe, F_spa):
        return fuse(F_spe, F_spa, self.mode, self.params)


def fuse(F_spe, F_spa, mode, params=None):
    """Fuse branch maps; ``gated`` is a per-pixel convex combination."""
    F_spe, F_spa = as_tensor(F_spe), as_tensor(F_spa)
    params = params or {}
    if mode == "gated":
        w = gate_weight(F_spe, F_spa, params)
        # w*a + (1-w)*b rather than b + w*(a-b): returns a bit-exactly at w == 1
        return ops.add(ops.mul(w, F_spe), ops.mul(ops.sub(1.0, w), F_spa))
    if mode == "sum":
        return ops.add(F_spe, F_spa)
    if mode == "adaptive_sum":
        a = ops.reshape(as_tensor(params["alpha"]), (1, 1, 1))
        b = ops.reshape(as_tensor(params["beta"]), (1, 1, 1))
        return ops.add(ops.mul(a, F_spe), ops.mul(b, F_spa))
    if mode == "concat":
        cat = ops.concat([F_spe, F_spa], axis=0)
        return ops.pointwise_conv(cat, params["weight"], params["bias"])
    raise ConfigurationError(f"unknown fusion mode {mode!r}")


def gate_weight(F_spe, F_spa, params):
    cat = ops.concat([as_tensor(F_spe), as_tensor(F_spa)], axis=0)
    return ops.sigmoid(ops.pointwise_conv(cat, params["weight"], params["bias"]))


def _summary(t):
    d = t.data
    return {"min": float(d.min()), "max": float(d.max()), "mean": float(d.mean())}


class HSMambaBlock:
    def __init__(self, store, prefix, cfg, P, rng):
        self.prefix = prefix
        self.cfg = cfg
        self.P = P
        self.encoder = DCSSEncoder(store, prefix + ".dcss", cfg.D, P, cfg.groups_spe,
                                   cfg.groups_spa, cfg.state_size, rng,
                                   use_pos_encoding=cfg.use_pos_encoding,
                                   exact=cfg.zoh_exact)
        self.lgi = LGIAttention(store, prefix + ".lgi", cfg.D, cfg.tau, rng) if cfg.use_lgi else None
        self.fusion = Fusion(store, prefix + ".fusion", cfg.D, cfg.fusion_mode, rng)

    def __call__(self, F, trace=None):
        F = as_tensor(F)
        F_spe, F_spa = self.encoder(F)
        if self.lgi is not None:
            W_spe, W_spa = self.lgi(F)
            F_spe, F_spa = apply_global_gates(F_spe, F_spa, W_spe, W_spa)
        if self.cfg.branches == "spe":
            fused = F_spe
        elif self.cfg.branches == "spa":
            fused = F_spa
        else:
            fused = self.fusion(F_spe, F_spa)
        out = ops.add(F, fused)
        if trace is not None:
            trace.append({"block": self.prefix, "shape": F.shape, "patch": self.P,
                          "spe": _summary(F_spe), "spa": _summary(F_spa),
                          "out": _summary(out)})
        return out


class HSMamba:
    """Per-pixel classifier over a ``(C, H, W)`` cube."""

    def __init__(self, cfg, C_in, seed=0):
        self.cfg = cfg
        self.C_in = C_in
        self.seed = seed
        self.store = ParamStore(np.dtype(cfg.dtype))
        rng = derive_rng(seed, "init")
        s = self.store
        self.embed_w, self.embed_b = _conv_init(s, "embed.conv", cfg.D, C_in, rng)
        self.embed_gn = (s.add("embed.gn.scale", np.ones(cfg.D)),
                         s.add("embed.gn.shift", np.zeros(cfg.D)))
        patch_sizes = [max(1, cfg.P0 // 2 ** i) for i in range(cfg.blocks)]
        self.blocks = [HSMambaBlock(s, f"block{i + 1}", cfg, P, rng)
                       for i, P in enumerate(patch_sizes)]
        self.cls1_w, self.cls1_b = _conv_init(s, "classifier.conv1", cfg.D, cfg.D, rng)
        self.cls_gn = (s.add("classifier.gn.scale", np.ones(cfg.D)),
                       s.add("classifier.gn.shift", np.zeros(cfg.D)))
        self.cls2_w, self.cls2_b = _conv_init(s, "classifier.conv2", cfg.num_classes,
                                              cfg.D, rng)

    def embed(self, cube):
        x = as_tensor(cube)
        if x.dtype != self.store.dtype:
            x = Tensor(x.data.astype(self.store.dtype), requires_grad=x.requires_grad)
        h = ops.pointwise_conv(x, self.embed_w, self.embed_b)
        return ops.silu(ops.group_norm(h, self.cfg.gn_groups, *self.embed_gn))

    def classify(self, F):
        h = ops.pointwise_conv(F, self.cls1_w, self.cls1_b)
        h = ops.silu(ops.group_norm(h, self.cfg.gn_groups, *self.cls_gn))
        return ops.pointwise_conv(h, self.cls2_w, self.cls2_b)

    def forward(self, cube, trace=None):
        """Logits ``(num_classes, H, W)``."""
        x = as_tensor(cube)
        _, H, W = x.shape
        F = self.embed(x)
        stages = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                F = ops.avg_pool2x2(F)
            F = block(F, trace)
            stages.append((i, F))
        if self.cfg.upsample_source == "last":
            stages = stages[-1:]
        if stages:
            ups = []
            for i, s in stages:
                up = ops.upsample_nearest(s, 2 ** i)
                ups.append(up[:, :H, :W] if up.shape[1:] != (H, W) else up)
            F = ups[0]
            for up in ups[1:]:
                F = ops.add(F, up)
        return self.classify(F)

    __call__ = forward

    def predict(self, cube):
        from .tensor import no_grad
        with no_grad():
            return self.forward(cube).data.argmax(axis=0) + 1

    def trace(self, cube):
        """Run a forward pass and return per-stage shapes and activation summaries."""
        from .tensor import no_grad
        records = []
        with no_grad():
            self.forward(cube, trace=records)
        return records

    def expected_stage_shapes(self, H, W):
        shapes = []
        for _ in self.blocks:
            shapes.append((self.cfg.D, H, W))
            H, W = -(-H // 2), -(-W // 2)
        return shapes

    def num_params(self):
        return self.store.num_scalars()


def count_params(cfg, in_channels):
    """Total trainable scalars for ``cfg`` on a cube with ``in_channels`` bands."""
    return HSMamba(cfg, in_channels).num_params()


# ----------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"HSMW"
CKPT_VERSION = 1
_CONFIG_TAG = "__config__"


def save_checkpoint(path, arrays, cfg=None, in_channels=None):
    """Write named float64 arrays; the model config rides in a zero-length record."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        if cfg is not None:
            meta = json.dumps({"config": json.loads(cfg.to_json()), "in_channels": in_channels},
                              sort_keys=True)
            _write_record(fh, _CONFIG_TAG + meta, np.zeros(0))
        for name, value in arrays.items():
            _write_record(fh, name, value)


def _write_record(fh, name, value):
    raw = name.encode("utf-8")
    value = np.ascontiguousarray(value, dtype="<f8")
    fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(struct.pack("<I", value.ndim))
    fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
    fh.write(value.tobytes())


def load_checkpoint(path):
    """Return ``(arrays, cfg, in_channels)``; cfg is None if absent."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at offset 0")
    if len(buf) < 8:
        raise FormatError(f"truncated header: expected 8 bytes, got {len(buf)}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    off = 8
    arrays, cfg, in_channels = {}, None, None

    def need(n, what):
        if off + n > len(buf):
            raise FormatError(f"truncated {what} at offset {off}: expected {n} bytes, "
                              f"got {len(buf) - off}")

    while off < len(buf):
        need(4, "name length")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(n, "name")
        name = buf[off:off + n].decode("utf-8")
        off += n
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(8 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        count = int(np.prod(shape, dtype=np.uint64)) if rank else 1
        need(8 * count, f"payload of {name!r}")
        value = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name.startswith(_CONFIG_TAG):
            meta = json.loads(name[len(_CONFIG_TAG):])
            cfg = ModelConfig(**meta["config"])
            in_channels = meta["in_channels"]
        else:
            arrays[name] = value.astype(np.float64)
    return arrays, cfg, in_channels


def save_model(model, path):
    save_checkpoint(path, model.store.snapshot(), model.cfg, model.C_in)


def load_model(path):
    arrays, cfg, C_in = load_checkpoint(path)
    if cfg is None:
        raise FormatError(f"{path}: checkpoint carries no model config")
    model = HSMamba(cfg, C_in)
    model.store.load(arrays)
    return model
