"""hsmamba: train, evaluate and inspect hyperspectral classifiers.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import os
import sys
import warnings
from dataclasses import fields

import numpy as np

from .errors import HSMambaError

log = logging.getLogger("hsmamba")

EXTRA_KEYS = {"normalization": "minmax", "jobs": 1}


class UsageError(HSMambaError):
    """Bad config file or flag value; exits 2 like an argparse error."""


def _config_fields():
    from .network import ModelConfig
    from .train import TrainConfig
    known = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            known[f.name] = (cls, f.type if isinstance(f.type, type) else type(f.default),
                            f.default)
    for k, v in EXTRA_KEYS.items():
        known[k] = (None, type(v), v)
    return known


def _coerce(key, raw, typ, where):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {key} = {raw!r} as {typ.__name__}") from None


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; unknown keys are rejected with their line number."""
    known = _config_fields()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, known[key][1], f"{source}:{lineno}")
    return out


def effective_config(file_values, flag_values):
    """All defaults, overlaid by the config file, overlaid by flags."""
    known = _config_fields()
    cfg = {k: v[2] for k, v in known.items()}
    cfg.update(file_values)
    cfg.update({k: v for k, v in flag_values.items() if v is not None})
    return cfg


def dump_config(cfg):
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def split_config(cfg):
    from .network import ModelConfig
    from .train import TrainConfig
    m = {f.name: cfg[f.name] for f in fields(ModelConfig)}
    t = {f.name: cfg[f.name] for f in fields(TrainConfig)}
    return ModelConfig(**m), TrainConfig(**t)


# ------------------------------------------------------------------ commands

def cmd_train(args):
    from .data import read_cube, read_labels, read_split_overrides
    from .network import save_checkpoint
    from .train import default_palette, export_map, multi_run, write_history_csv, \
        write_results_csv

    file_values = {}
    if args.config:
        with open(args.config) as fh:
            file_values = parse_config_text(fh.read(), args.config)
    flags = {"seed": args.split_seed, "runs": args.runs, "max_epochs": args.epochs,
             "lr": args.lr, "jobs": args.jobs}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        flags.update(parse_config_text(item, "--set"))
    cube = read_cube(args.cube)
    labels = read_labels(args.labels)
    if labels.shape != (cube.height, cube.width):
        raise HSMambaError(f"label map {labels.shape} does not match cube "
                           f"{(cube.height, cube.width)}")
    file_values.setdefault("num_classes", int(labels.values.max()))
    cfg = effective_config(file_values, flags)
    model_cfg, train_cfg = split_config(cfg)
    overrides = read_split_overrides(args.splits) if args.splits else None

    os.makedirs(args.out, exist_ok=True)
    text = dump_config(cfg)
    sys.stdout.write("# effective config\n" + text)
    with open(os.path.join(args.out, "effective.cfg"), "w") as fh:
        fh.write(text)

    results = multi_run(cube, labels, model_cfg, train_cfg, overrides=overrides,
                        normalization=cfg["normalization"], jobs=cfg["jobs"])
    palette = default_palette(model_cfg.num_classes)
    for r in results:
        with open(os.path.join(args.out, f"history_run{r.run}.csv"), "w") as fh:
            write_history_csv(r.history, fh)
        save_checkpoint(os.path.join(args.out, f"checkpoint_run{r.run}.hsmw"), r.params,
                        model_cfg, cube.bands)
        export_map(r.pred, palette, os.path.join(args.out, f"map_run{r.run}.ppm"))
    with open(os.path.join(args.out, "results.csv"), "w") as fh:
        write_results_csv(results, fh)
    with open(os.path.join(args.out, "results.csv")) as fh:
        sys.stdout.write(fh.read())
    return 0


def _load_for_inference(args):
    from .data import normalize, read_cube
    from .network import load_model
    model = load_model(args.checkpoint)
    cube = normalize(read_cube(args.cube), args.normalization)
    if cube.bands != model.C_in:
        raise HSMambaError(f"cube has {cube.bands} bands; checkpoint expects {model.C_in}")
    return model, cube


def cmd_eval(args):
    from .data import read_labels
    from .train import evaluate
    model, cube = _load_for_inference(args)
    labels = read_labels(args.labels)
    mask = labels.values > 0
    if args.mask:
        mask = mask & (read_labels(args.mask).values > 0)
    metrics, _ = evaluate(model, cube, labels, mask)
    print("oa,aa,kappa")
    print(f"{metrics.oa:.17g},{metrics.aa:.17g},{metrics.kappa:.17g}")
    return 0


def cmd_predict(args):
    from .data import write_labels
    from .train import default_palette, export_map
    model, cube = _load_for_inference(args)
    pred = model.predict(cube.values)
    export_map(pred, default_palette(model.cfg.num_classes), args.map_out)
    if args.labels_out:
        write_labels(pred, args.labels_out)
    return 0


def cmd_synth(args):
    from .data import synth_scene, write_cube, write_labels
    cube, labels = synth_scene(args.H, args.W, args.C, args.K, args.noise, args.seed)
    write_cube(cube, args.out + ".hsic")
    write_labels(labels, args.out + ".hsil")
    print(f"wrote {args.out}.hsic ({args.C}x{args.H}x{args.W}) and {args.out}.hsil")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_model_suite, run_op_suite, worst
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if args.level == "op":
            results = run_op_suite(seed=args.seed)
        else:
            results = run_model_suite(args.level, seed=args.seed)
    failed = [r for r in results if not r.passed]
    w = worst(results)
    print(f"{len(results)} checks, {len(failed)} failed; worst: {w.case} {w.target} "
          f"rel_error={w.rel_error:.3e} (tol {w.tolerance:g})")
    return 1 if failed else 0


def cmd_bench(args):
    from .ssm import benchmark_scan, scaling_exponent, write_bench_csv
    L_list = sorted(args.L) if args.L else [1024 * 2 ** i for i in range(7)]
    rows = benchmark_scan(L_list, args.D, args.N, args.repeats, method=args.method)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        write_bench_csv(rows, out)
    finally:
        if args.out:
            out.close()
    if len(rows) >= 2:
        print(f"# log-log slope {scaling_exponent(rows):.3f}", file=sys.stderr)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hsmamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and evaluate over several seeds")
    t.add_argument("--cube", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--splits", help="per-class override table: class_index train_n val_n")
    t.add_argument("--split-seed", type=int, help="root seed (split, init)")
    t.add_argument("--config", help="key = value overlay file")
    t.add_argument("--out", required=True)
    t.add_argument("--runs", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--jobs", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on labeled pixels")
    e.add_argument("--cube", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mask", help="label-format file; nonzero pixels are scored")
    e.add_argument("--normalization", default="minmax")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write a classification map")
    pr.add_argument("--cube", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--map-out", required=True)
    pr.add_argument("--labels-out")
    pr.add_argument("--normalization", default="minmax")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--H", type=int, required=True)
    s.add_argument("--W", type=int, required=True)
    s.add_argument("--C", type=int, required=True)
    s.add_argument("--K", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--level", choices=("op", "block", "model"), default="op")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time the selective scan against sequence length")
    b.add_argument("--scan", action="store_true", help="benchmark the selective scan")
    b.add_argument("--L", type=int, nargs="+")
    b.add_argument("--D", type=int, default=16)
    b.add_argument("--N", type=int, default=16)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--method", choices=("sequential", "associative"), default="sequential")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hsmamba {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (HSMambaError, OSError, ValueError) as exc:
        print(f"hsmamba {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
