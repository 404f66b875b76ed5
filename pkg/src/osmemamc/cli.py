"""Command line: train, eval, count, gradcheck, heatmap, gen-data.

Standard output carries one JSON document per command; diagnostics go to
standard error. Exit codes: 2 config error, 3 non-finite loss, 4 constraint
count mismatch, 5 gradient check failure, 6 IO failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import branch_heatmaps, quadrant
from .config import RunConfig, desk_config, load_run_config, micro_config
from .errors import ConfigError, CorruptFile, NonFiniteLoss, SpecInvalid, VersionMismatch
from .gradcheck import THRESHOLDS, run_suite
from .mamc import count_constraints, enumerate_constraints
from .osme import heatmap_peak, write_pgm
from .synth import from_manifest, gen_dataset, read_manifest, save_dataset, split_per_class, write_manifest
from .trainer import Trainer, evaluate, load_checkpoint, metrics_line, save_checkpoint

EXIT_CONFIG, EXIT_NONFINITE, EXIT_COUNT, EXIT_GRADCHECK, EXIT_IO = 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _run_config(args) -> RunConfig:
    if args.config:
        rc = load_run_config(args.config)
    else:
        rc = micro_config() if getattr(args, "micro", False) else desk_config()
    if args.seed is not None:
        rc = dataclasses.replace(rc, train=dataclasses.replace(rc.train, seed=args.seed))
    return rc


def _out_dir(args, rc: RunConfig | None = None) -> Path:
    out = args.out or (rc.out_dir if rc is not None else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or set output.dir in the config")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from None
    return out


def _datasets(rc: RunConfig):
    return split_per_class(gen_dataset(rc.data.spec), rc.data.train_per_class)


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = _out_dir(args, rc)
    train_ds, test_ds = _datasets(rc)
    trainer = Trainer(rc.train, train_ds, test_ds)
    _log(f"training {trainer.total_steps} steps ({rc.train.epochs} epochs x {trainer.steps_per_epoch})")
    with open(out / "metrics.jsonl", "w") as fh:
        def on_record(rec):
            fh.write(metrics_line(rec))
            if "top1_eval" in rec:
                _log(f"epoch {rec['epoch']:3d}  loss {rec['loss_total']:.4f}  top1 {rec['top1_eval']:.4f}")
        try:
            records = trainer.fit(on_record=on_record)
        except NonFiniteLoss as exc:
            raise CliError(f"non-finite loss at step {trainer.step}: {exc}", EXIT_NONFINITE) from None
    save_checkpoint(out / "ckpt.bin", trainer.checkpoint())
    write_manifest(out / "manifest.json", gen_dataset(rc.data.spec))
    evals = [r["top1_eval"] for r in records if "top1_eval" in r]
    final = evaluate(trainer.params, test_ds, rc.train.osme)
    summary = {"final_top1": final, "best_top1": max(evals + [final]), "seed": rc.train.seed}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if rc.figures and records:
        from .plotting import loss_curve
        loss_curve(records, out / "loss.png")
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.manifest:
        ds = from_manifest(read_manifest(args.manifest))
        if args.split != "all":
            per_class = _run_config(args).data.train_per_class
            train_ds, test_ds = split_per_class(ds, per_class)
            ds = train_ds if args.split == "train" else test_ds
    else:
        rc = _run_config(args)
        train_ds, test_ds = _datasets(rc)
        ds = {"train": train_ds, "test": test_ds}[args.split] if args.split != "all" else gen_dataset(rc.data.spec)
    trainer = Trainer.from_checkpoint(ckpt, ds)
    _emit({"top1": evaluate(trainer.params, ds, ckpt.config.osme), "count": len(ds),
           "split": args.split, "step": ckpt.step})
    return 0


def cmd_count(args) -> int:
    if args.N < 1 or args.P < 1:
        raise ConfigError("N and P must be >= 1")
    closed = count_constraints(args.N, args.P)
    enumerated = enumerate_constraints(args.N, args.P)
    baseline = args.N - 1
    _emit({"N": args.N, "P": args.P, "closed_form": closed, "enumerated": enumerated,
           "npair_baseline": baseline, "ratio": closed / baseline if baseline else None})
    if closed != enumerated:
        _log(f"closed form {closed} != enumerated {enumerated}")
        return EXIT_COUNT
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rows = run_suite(args.scale, seed=seed, corrupt=args.corrupt_gradient)
    threshold = THRESHOLDS[args.scale]
    width = max(len(name) for name, _ in rows)
    for name, err in rows:
        _log(f"{name:<{width}}  {err:.3e}  {'ok' if err <= threshold else 'FAIL'}")
    worst = max(err for _, err in rows)
    ok = worst <= threshold
    _emit({"scale": args.scale, "threshold": threshold, "max_rel_error": worst, "pass": ok,
           "rows": [{"component": n, "max_rel_error": e, "pass": e <= threshold} for n, e in rows]})
    return 0 if ok else EXIT_GRADCHECK


def cmd_heatmap(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = from_manifest(read_manifest(args.manifest))
    if not 1 <= args.count <= len(ds):
        raise ConfigError(f"count must be in [1, {len(ds)}]")
    start = args.start
    if not 0 <= start <= len(ds) - args.count:
        raise ConfigError(f"start must be in [0, {len(ds) - args.count}]")
    out = _out_dir(args)
    cfg = ckpt.config.osme
    trainer = Trainer.from_checkpoint(ckpt, ds)
    idx = np.arange(start, start + args.count)
    maps = branch_heatmaps(trainer.params, ds.images[idx], cfg)
    entries = []
    for j, i in enumerate(idx):
        peaks = []
        for p in range(cfg.P):
            write_pgm(out / f"hm_{i}_b{p + 1}.pgm", maps[j, p])
            peaks.append(heatmap_peak(maps[j, p]))
        entries.append({"index": int(i), "label": int(ds.labels[i]),
                        "peaks": [{"branch": p + 1, "row": r, "col": c,
                                   "quadrant": quadrant(r, c, maps.shape[2:])}
                                  for p, (r, c) in enumerate(peaks)]})
    index = {"checkpoint": str(args.checkpoint), "count": args.count, "P": cfg.P,
             "heatmap_shape": list(maps.shape[2:]), "images": entries}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        from .plotting import heatmap_grid
        heatmap_grid(ds.images[idx], maps, [[(p["row"], p["col"]) for p in e["peaks"]] for e in entries],
                     out / "heatmaps.png")
    _emit(index)
    return 0


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    out = _out_dir(args, rc)
    ds = gen_dataset(rc.data.spec)
    write_manifest(out / "manifest.json", ds)
    if args.raw:
        save_dataset(out / "data", ds)
    _emit(ds.manifest)
    return 0


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # The same flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given before it.
    default = None if defaults else argparse.SUPPRESS
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="JSON run config")
    g.add_argument("--seed", type=int, default=default, help="override train.seed")
    g.add_argument("--out", default=default, help="output directory")
    return g


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osmemamc", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(True)])
    common = _global_flags(False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train and write metrics, checkpoint, summary")
    p.add_argument("--micro", action="store_true", help="use the tiny smoke-test config when no --config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="top-1 of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", help="dataset manifest (default: regenerate from config)")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--micro", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", parents=[common], help="constraint accounting for N pairs and P branches")
    p.add_argument("N", type=int)
    p.add_argument("P", type=int)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", parents=[common], help="backprop against central differences")
    p.add_argument("scale", choices=tuple(THRESHOLDS))
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", parents=[common], help="export branch heatmaps as PGM")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--start", type=int, default=0, help="first dataset index")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gen-data", parents=[common], help="write the dataset manifest")
    p.add_argument("--raw", action="store_true", help="also dump the image arrays")
    p.add_argument("--micro", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _log(f"error: {exc}")
        return exc.code
    except (ConfigError, SpecInvalid, ValueError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        _log(f"non-finite loss: {exc}")
        return EXIT_NONFINITE
    except (OSError, CorruptFile, VersionMismatch) as exc:
        _log(f"io error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
