"""Command-line entry point: ``tnmera train | eval | gradcheck | entropy | gen-needle``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from . import checkpoint, data, entanglement, train
from .mera import LAYOUTS, summary

log = logging.getLogger("tnmera")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=()):
    """One kebab-case flag per dataclass field, defaulting to None so that
    unset flags do not override config-file values."""
    for f in fields(cls):
        if f.name in skip:
            continue
        if f.type == "bool":
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            conv = {"int": int, "float": float}.get(f.type, str)
            default = None if f.default is MISSING else f.default
            parser.add_argument(_flag(f.name), dest=f.name, type=conv, default=None,
                                help=f"default: {default}")


def _merge(args, cls, skip=()) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(train.parse_config_text(Path(args.config).read_text()))
    values = train.coerce_config(values) if cls is train.TrainConfig else values
    for f in fields(cls):
        if f.name not in skip and getattr(args, f.name, None) is not None:
            values[f.name] = getattr(args, f.name)
    return values


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = train.TrainConfig(**_merge(args, train.TrainConfig)).validate()
    if not cfg.train_data:
        raise ValueError("train_data is required")
    result = train.train(cfg)
    final = result.metrics[-1]
    report = {"out_dir": str(result.out_dir), "loss": final["loss"], "train_acc": final["train_acc"]}
    if cfg.test_data:
        test = train.prepare_data(cfg, cfg.test_data)
        ev = train.evaluate(result.model, test)
        train.write_confusion(result.out_dir / "confusion.csv", ev.confusion)
        report["test_acc"] = ev.accuracy
    print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = checkpoint.load_with_extra(args.checkpoint)
    resize = args.resize
    if resize is None:
        resize = extra.get("train_config", {}).get("resize", 0)
    ds = data.load_any(args.data)
    if resize:
        ds = data.resize_dataset(ds, resize, args.resize_mode)
    ev = train.evaluate(model, ds)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    train.write_confusion(out / "confusion.csv", ev.confusion)
    print(json.dumps({"accuracy": ev.accuracy, "samples": len(ds), "confusion": str(out / "confusion.csv")}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = train.gradcheck_config(size=args.size, block_size=args.block_size, bond_dim=args.bond_dim,
                                 num_classes=args.num_classes, layout=args.layout, boundary=args.boundary)
    if cfg.padded_size ** 2 and args.images < 1:
        raise ValueError("--images must be >= 1")
    worst_all = 0.0
    failed = False
    for seed in args.seeds or [args.seed]:
        rep = train.gradcheck(cfg, seed=seed, num_images=args.images, h=args.h, tol=args.tol)
        name, idx, a, b = rep.worst
        print(f"seed {seed}: {'PASS' if rep.passed else 'FAIL'} max_rel_err={rep.max_rel_err:.3e} "
              f"worst={name}{list(idx)} analytic={a:.6e} numeric={b:.6e} "
              f"params={rep.num_params} time={rep.seconds:.2f}s")
        worst_all = max(worst_all, rep.max_rel_err)
        failed |= not rep.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def _load_function(spec: str, geometry, r: int, seed: int):
    import numpy as np

    n = geometry[0] * geometry[1]
    kind, _, rest = spec.partition(":")
    if kind == "constant":
        return np.ones(1 << n)
    if kind == "bell":
        # F = 1 when pixels 0 and 1 agree
        s = np.arange(1 << n)
        return ((s >> (n - 1)) & 1 == (s >> (n - 2)) & 1).astype(float)
    if kind == "local":
        return entanglement.r_local_function(geometry, r, int(rest) if rest else seed)
    if kind == "disk":
        radius, _, s = rest.partition(":")
        return entanglement.disk_function(geometry, float(radius), r, int(s) if s else seed)
    path = Path(spec)
    if not path.exists():
        raise ValueError(f"function {spec!r}: expected constant, bell, local[:seed], disk:radius[:seed] or a file")
    return np.load(path) if path.suffix == ".npy" else np.loadtxt(path).ravel()


def cmd_entropy(args) -> int:
    geometry = entanglement.parse_geometry(args.geometry)
    table = _load_function(args.function, geometry, args.r, args.seed)
    cuts = None if args.cuts == "all" else [c.strip() for c in args.cuts.split(",") if c.strip()]
    rows = entanglement.area_law_check(table, geometry, args.r, cuts)
    if args.out:
        entanglement.write_report(args.out, rows)
    else:
        entanglement.write_report("/dev/stdout", rows)
    if args.o2i:
        for row in entanglement.o2i_scaling(geometry, r=args.r):
            print(json.dumps(row), file=sys.stderr)
    bad = [r["cut_id"] for r in rows if not r["ok"]]
    if bad:
        log.error("bound violated on cuts %s", bad)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_needle(args) -> int:
    values = {}
    if args.config:
        raw = train.parse_config_text(Path(args.config).read_text())
        for f in fields(data.NeedleConfig):
            if f.name in raw:
                values[f.name] = raw[f.name]
    for f in fields(data.NeedleConfig):
        if getattr(args, f.name, None) is not None:
            values[f.name] = getattr(args, f.name)
    conv = {"int": int, "bool": lambda v: str(v).lower() in ("1", "true", "yes", "on")}
    for f in fields(data.NeedleConfig):
        if f.name in values and isinstance(values[f.name], str) and f.type in conv:
            values[f.name] = conv[f.type](values[f.name])
    if isinstance(values.get("source_range"), str):
        lo, hi = values["source_range"].split(":")
        values["source_range"] = (int(lo), int(hi))
    cfg = data.NeedleConfig(**values)
    ds, manifest = data.gen_needle(cfg)
    data.write_dataset(args.out, ds, manifest, [r["file"] for r in manifest["records"]])
    print(json.dumps({"out": args.out, "samples": len(ds), "o2i_percent": manifest["o2i_percent"]}))
    return EXIT_OK


def cmd_summary(args) -> int:
    print(summary(checkpoint.load(args.checkpoint)))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnmera", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a MERA classifier")
    t.add_argument("--config", help="key = value file; flags take precedence")
    _add_dataclass_flags(t, train.TrainConfig)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset path, optionally path[start:stop]")
    e.add_argument("--resize", type=int, default=None, help="default: the training resize")
    e.add_argument("--resize-mode", default="downsample_mean")
    e.add_argument("--out-dir", default=None, help="where confusion.csv goes (default: checkpoint dir)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--block-size", type=int, default=2)
    g.add_argument("--bond-dim", type=int, default=2)
    g.add_argument("--num-classes", type=int, default=2)
    g.add_argument("--layout", choices=LAYOUTS, default="offset")
    g.add_argument("--boundary", choices=("open", "periodic"), default="open")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=int, nargs="*", help="run several seeds")
    g.add_argument("--images", type=int, default=2)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-6)
    g.set_defaults(func=cmd_gradcheck)

    n = sub.add_parser("entropy", help="area-law report for a small target function")
    n.add_argument("--function", default="local", help="constant | bell | local[:seed] | disk:radius[:seed] | file")
    n.add_argument("--geometry", default="4x3", help="HxW pixel grid")
    n.add_argument("--r", type=int, default=1, help="interaction radius in pixels")
    n.add_argument("--cuts", default="all", help="'all' or comma-separated names like v1,h2")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", help="CSV path (default: stdout)")
    n.add_argument("--o2i", action="store_true", help="also print disk-object scaling data to stderr")
    n.set_defaults(func=cmd_entropy)

    d = sub.add_parser("gen-needle", help="generate a tiny-object dataset")
    d.add_argument("--config", help="key = value file; flags take precedence")
    d.add_argument("--out", required=True)
    _add_dataclass_flags(d, data.NeedleConfig, skip=("source_range",))
    d.add_argument("--source-range", dest="source_range", default=None, help="start:stop of the source set")
    d.set_defaults(func=cmd_gen_needle)

    s = sub.add_parser("summary", help="print the tensor table of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_summary)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (train.NumericalError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        log.error("%s", e)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
