"""Masked cross-entropy training with Adam, OA/AA/Kappa metrics, multi-seed
aggregation and classification-map export."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import _labels_array, normalize, stratified_split
from .errors import DivergenceError, NonFiniteError
from .tensor import Tensor, as_tensor, no_grad, record

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    runs: int = 10
    train_n: int = 30
    val_n: int = 10
    # false keeps the last-epoch parameters instead of the best-val snapshot
    restore_best: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


# ----------------------------------------------------------------------- loss

def masked_cross_entropy(logits, labels, mask):
    """Mean of ``-log softmax(logits)[label-1]`` over masked pixels."""
    logits = as_tensor(logits)
    lab = _labels_array(labels)
    mask = np.asarray(mask, dtype=bool) & (lab > 0)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask selects no labeled pixels")
    z = logits.data[:, mask]
    target = lab[mask] - 1
    zmax = z.max(axis=0, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=0))
    cols = np.arange(n)
    loss = np.mean(lse - shifted[target, cols])

    def back(g):
        p = np.exp(shifted - lse)
        p[target, cols] -= 1.0
        full = np.zeros_like(logits.data)
        full[:, mask] = p * (g / n)
        return (full,)

    return record(np.asarray(loss), (logits,), back, "masked_cross_entropy")


# ------------------------------------------------------------------ optimizer

def adam_step(store, cfg):
    """One bias-corrected Adam update; moment estimates live in ``store.state``."""
    st = store.state
    t = st.get("t", 0) + 1
    st["t"] = t
    m_all = st.setdefault("m", {})
    v_all = st.setdefault("v", {})
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p in store:
        g = p.grad
        m = m_all.get(p.name)
        if m is None:
            m = m_all[p.name] = np.zeros_like(p.data)
            v_all[p.name] = np.zeros_like(p.data)
        v = v_all[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# -------------------------------------------------------------------- metrics

@dataclass
class Metrics:
    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    p_e: float
    per_class: np.ndarray  # recall, NaN where a class has no support


def metrics_from_confusion(confusion):
    """Rows are true classes, columns predictions.

    OA, AA and Kappa are formed as exact ratios of integers and rounded once,
    so hand-checkable cases come out exactly.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    total = int(conf.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(conf)
    support = conf.sum(axis=1)
    agree = int(diag.sum())
    chance = int((support * conf.sum(axis=0)).sum())
    oa = Fraction(agree, total)
    recalls = [Fraction(int(d), int(s)) for d, s in zip(diag, support) if s > 0]
    aa = sum(recalls, Fraction(0)) / len(recalls)
    p_e = Fraction(chance, total * total)
    if chance == total * total:
        kappa = Fraction(1 if agree == total else 0)
    else:
        kappa = Fraction(total * agree - chance, total * total - chance)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, diag / np.maximum(support, 1), np.nan)
    return Metrics(conf, float(oa), float(aa), float(kappa), float(p_e), per_class)


def compute_metrics(pred, labels, mask, num_classes=None):
    lab = _labels_array(labels)
    mask = np.asarray(mask, dtype=bool) & (lab > 0)
    if not mask.any():
        raise ValueError("metrics mask selects no labeled pixels")
    K = num_classes or int(max(lab.max(), np.asarray(pred)[mask].max()))
    t = lab[mask] - 1
    p = np.asarray(pred)[mask] - 1
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (t, np.clip(p, 0, K - 1)), 1)
    return metrics_from_confusion(conf)


# ------------------------------------------------------------------- training

def train(model, cube, labels, splits, cfg, log_every=0):
    """Whole-scene training; returns ``(best_params, history)``.

    Each epoch runs one forward pass, scores validation pixels from those same
    logits, and keeps a snapshot of the parameters with the best val OA, ties
    going to the lower val loss. Patience counts epochs since val OA last
    strictly improved. The model is left holding the best snapshot.
    """
    x = Tensor(np.asarray(cube.values if hasattr(cube, "values") else cube))
    K = model.cfg.num_classes
    store = model.store
    history = []
    best_oa, best_loss, best = -1.0, np.inf, store.snapshot()
    improved = 0
    for epoch in range(1, cfg.max_epochs + 1):
        store.zero_grad()
        try:
            logits = model.forward(x)
            loss = masked_cross_entropy(logits, labels, splits.train)
            loss.backward()
        except NonFiniteError as exc:
            raise DivergenceError(epoch, float("nan")) from exc
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise DivergenceError(epoch, lval)
        pred = logits.data.argmax(axis=0) + 1
        val = compute_metrics(pred, labels, splits.val, K)
        tr = compute_metrics(pred, labels, splits.train, K)
        with no_grad():
            vloss = float(masked_cross_entropy(Tensor(logits.data), labels, splits.val).data)
        history.append({"epoch": epoch, "train_loss": lval, "val_oa": val.oa,
                        "val_aa": val.aa, "val_kappa": val.kappa, "train_oa": tr.oa,
                        "val_loss": vloss})
        if val.oa > best_oa:
            improved = epoch
        if val.oa > best_oa or (val.oa == best_oa and vloss < best_loss):
            best_oa, best_loss, best = val.oa, vloss, store.snapshot()
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.5f train_oa %.4f val_oa %.4f", epoch, lval, tr.oa, val.oa)
        # no update after the last scored forward pass, so the kept parameters match history[-1]
        if epoch - improved >= cfg.patience or epoch == cfg.max_epochs:
            break
        adam_step(store, cfg)
    if not cfg.restore_best:
        best = store.snapshot()
    store.load(best)
    return best, history


def evaluate(model, cube, labels, mask):
    pred = model.predict(np.asarray(cube.values if hasattr(cube, "values") else cube))
    return compute_metrics(pred, labels, mask, model.cfg.num_classes), pred


@dataclass
class RunResult:
    run: int
    seed: int
    metrics: Metrics
    history: list
    params: dict
    pred: np.ndarray
    split: object


def run_once(cube, labels, model_cfg, train_cfg, run, overrides=None, normalization="minmax"):
    from .network import HSMamba

    seed = train_cfg.seed + run
    data = normalize(cube, normalization)
    split = stratified_split(labels, train_cfg.train_n, train_cfg.val_n, overrides, seed)
    model = HSMamba(model_cfg, data.bands, seed=seed)
    params, history = train(model, data, labels, split, train_cfg)
    metrics, pred = evaluate(model, data, labels, split.test)
    return RunResult(run, seed, metrics, history, params, pred, split)


def _run_star(args):
    return run_once(*args)


def multi_run(cube, labels, model_cfg, train_cfg, runs=None, overrides=None,
              normalization="minmax", jobs=1):
    """Train ``runs`` models with seeds ``seed .. seed+runs-1``; returns RunResults."""
    runs = train_cfg.runs if runs is None else runs
    tasks = [(cube, labels, model_cfg, train_cfg, r, overrides, normalization)
             for r in range(runs)]
    if jobs > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_star, tasks))
    return [_run_star(t) for t in tasks]


def summarize(results):
    """``{metric: (mean, sample std)}``; std is 0 for a single run."""
    out = {}
    for key in ("oa", "aa", "kappa"):
        vals = np.array([getattr(r.metrics, key) for r in results])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(vals.mean()), std)
    return out


# ----------------------------------------------------------------------- CSVs

def _fmt(x):
    return format(float(x), ".17g")


def write_history_csv(history, fh):
    fh.write("epoch,train_loss,val_oa,val_aa,val_kappa\n")
    for h in history:
        fh.write(",".join([str(h["epoch"])] + [_fmt(h[k]) for k in
                                                ("train_loss", "val_oa", "val_aa", "val_kappa")]))
        fh.write("\n")


def write_results_csv(results, fh):
    """Per-run rows followed by a ``mean`` row and a ``std`` row."""
    fh.write("run,seed,oa,aa,kappa\n")
    for r in results:
        m = r.metrics
        fh.write(f"{r.run},{r.seed},{_fmt(m.oa)},{_fmt(m.aa)},{_fmt(m.kappa)}\n")
    s = summarize(results)
    fh.write("mean,," + ",".join(_fmt(s[k][0]) for k in ("oa", "aa", "kappa")) + "\n")
    fh.write("std,," + ",".join(_fmt(s[k][1]) for k in ("oa", "aa", "kappa")) + "\n")


# ----------------------------------------------------------------------- maps

_BASE_COLORS = [
    (0, 0, 0), (255, 0, 0), (0, 170, 0), (0, 0, 255), (255, 200, 0), (255, 0, 255),
    (0, 200, 200), (128, 0, 0), (0, 90, 0), (0, 0, 128), (150, 110, 0), (128, 0, 128),
    (0, 110, 110), (255, 128, 128), (128, 255, 128), (128, 128, 255), (200, 200, 200),
    (255, 140, 0), (140, 70, 20), (70, 130, 180), (160, 160, 0), (220, 20, 60),
    (60, 60, 60),
]


def default_palette(K):
    """Distinct RGB colors; entry 0 (unlabeled) is black."""
    pal = list(_BASE_COLORS[:K + 1])
    i = 0
    while len(pal) < K + 1:
        i += 1
        c = ((i * 97) % 256, (i * 57 + 80) % 256, (i * 151 + 160) % 256)
        if c not in pal:
            pal.append(c)
    return np.array(pal, dtype=np.uint8)


def export_map(pred, palette, path):
    """Write a binary PPM (P6) with one palette color per class index."""
    pred = np.asarray(pred)
    palette = np.asarray(palette, dtype=np.uint8)
    K = int(pred.max()) if pred.size else 0
    if len(palette) < K + 1:
        raise ValueError(f"palette has {len(palette)} entries; need at least {K + 1}")
    H, W = pred.shape
    rgb = palette[pred]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, off = [], 0
    while len(tokens) < 4:
        while buf[off:off + 1].isspace():
            off += 1
        if buf[off:off + 1] == b"#":
            off = buf.index(b"\n", off) + 1
            continue
        start = off
        while not buf[off:off + 1].isspace():
            off += 1
        tokens.append(buf[start:off])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    off += 1
    return np.frombuffer(buf, dtype=np.uint8, count=3 * W * H, offset=off).reshape(H, W, 3)


def map_from_rgb(rgb, palette):
    """Invert palette coloring back to class indices."""
    palette = np.asarray(palette, dtype=np.uint8)
    codes = {tuple(c): i for i, c in enumerate(palette)}
    if len(codes) != len(palette):
        raise ValueError("palette colors are not distinct")
    flat = rgb.reshape(-1, 3)
    return np.array([codes[tuple(p)] for p in flat]).reshape(rgb.shape[:2])
