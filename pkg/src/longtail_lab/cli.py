"""Command-line entry point: gen, train, eval, sweep, compare.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

from . import head as head_mod
from . import inference, metrics, pipeline, synthdata
from .catalog import boundaries_for
from .errors import ConfigError, DataError, LabError
from .pipeline import RECIPES, SWEEP_AXES, RunConfig
from .train import METHODS, SAMPLERS

log = logging.getLogger("longtail_lab")

CHECKPOINT = "head.ckpt"
PREDICTORS = ("auto", "tau", "tau_norm", "ncm")


class UsageError(LabError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_run_config(args) -> RunConfig:
    """Config file first, then command-line flags on top."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args.config} is not valid JSON: {e}") from e
    if getattr(args, "groups", None) is not None:
        cfg.boundaries = boundaries_for(args.groups)
    if getattr(args, "tau", None) is not None:
        cfg.tau = args.tau
    return cfg


def _train_overrides(args, cfg: RunConfig) -> RunConfig:
    kw = {}
    for flag, key in (
        ("method", "method"),
        ("beta", "beta"),
        ("gamma", "gamma"),
        ("sampler", "sampler"),
        ("rfs_t", "rfs_t"),
        ("epochs", "epochs"),
        ("lr", "lr"),
        ("seed", "seed"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    if getattr(args, "no_background", False):
        kw["bags_background"] = False
    if getattr(args, "no_others", False):
        kw["bags_others"] = False
    cfg = cfg.replace_train(**kw) if kw else cfg

    method = cfg.train.method
    if method != "bags":
        for flag in ("beta", "groups", "no_background", "no_others"):
            if getattr(args, flag, None) not in (None, False):
                log.warning("--%s only applies to method=bags; ignored", flag.replace("_", "-"))
    if method != "focal" and getattr(args, "gamma", None) is not None:
        log.warning("--gamma only applies to method=focal; ignored")
    if cfg.train.sampler != "rfs" and getattr(args, "rfs_t", None) is not None:
        log.warning("--rfs-t only applies to --sampler rfs; ignored")
    return cfg


def cmd_gen(args) -> int:
    cfg = load_run_config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, seed=args.seed))
    out = _prepare_out(Path(args.out), args.force)
    dataset = synthdata.generate(cfg.synth)
    synthdata.serialize(dataset, out)
    hist = dataset.catalog.bin_histogram()
    print(
        f"wrote {len(dataset.train)} train / {len(dataset.eval)} eval records "
        f"({dataset.catalog.num_foreground} categories) to {out}"
    )
    print("categories per bin: " + ", ".join(f"bin{b}={n}" for b, n in hist.items()))
    return 0


def cmd_train(args) -> int:
    cfg = _train_overrides(args, load_run_config(args))
    dataset = synthdata.deserialize(args.dataset)
    init = None
    if cfg.train.method == "tail_finetune":
        if not args.init_checkpoint:
            raise UsageError("method tail_finetune needs --init-checkpoint (a trained softmax head)")
    if args.init_checkpoint:
        init = head_mod.load_checkpoint(args.init_checkpoint, dataset.catalog)
    out = _prepare_out(Path(args.out or f"runs/{cfg.train.method}"), args.force)
    params, history = pipeline.fit(dataset, cfg, init)
    head_mod.save_checkpoint(params, out / CHECKPOINT)
    (out / "history.json").write_text(_dump_json({"history": history.to_dict(), "config": cfg.to_dict()}))
    (out / "config.json").write_text(_dump_json(cfg.to_dict()))
    print(
        f"trained {cfg.train.method} head (D={params.layout.logit_dim}) for {history.steps} steps; "
        f"final loss {history.epoch_loss[-1]:.4f}; wrote {out / CHECKPOINT}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    dataset = synthdata.deserialize(args.dataset)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} does not exist")
    params = head_mod.load_checkpoint(ckpt, dataset.catalog)
    method = params.meta.get("method") or "unknown"

    if args.predictor == "auto":
        recipe, norms_params, predictor = method, params, None
    else:
        if params.is_bags:
            raise UsageError(f"--predictor {args.predictor} needs a softmax checkpoint")
        recipe = {"tau": "tau_select"}.get(args.predictor, args.predictor)
        norms_params, predictor = pipeline.derived_predictor(recipe, params, dataset, cfg.tau)

    report = pipeline.report_for(norms_params, dataset, cfg, recipe, predictor)
    report.config = {"run": cfg.to_dict(), "checkpoint": str(ckpt), "predictor": args.predictor}
    out = _prepare_out(Path(args.out or ckpt.parent / f"eval-{args.predictor}"), args.force)
    (out / "report.json").write_text(report.to_json())
    if report.weight_norms is not None:
        norms = {int(k): v for k, v in report.weight_norms.items()}
        metrics.export_norms(norms, dataset.catalog, out / "norms.csv")
    _print_rows([{"method": recipe, **pipeline.summary_row(report)}])
    return 0


def _parse_values(text: str, axis: str) -> list:
    items = [t for t in (s.strip() for s in text.split(",")) if t]
    if not items:
        raise UsageError("--values needs at least one value")
    try:
        return [int(t) for t in items] if axis == "groups" else [float(t) for t in items]
    except ValueError as e:
        raise UsageError(f"bad --values: {e}") from e


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(rows: list[dict], path: Path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    path.write_text(buf.getvalue())


def _pretty(rows: list[dict]) -> str:
    cols = list(rows[0])
    cells = [[c for c in cols]] + [
        [f"{v:.4f}" if isinstance(v, float) else ("-" if v is None else str(v)) for v in r.values()]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _print_rows(rows):
    sys.stdout.write(_pretty(rows))


def cmd_sweep(args) -> int:
    cfg = _train_overrides(args, load_run_config(args))
    values = _parse_values(args.values, args.axis)
    dataset = synthdata.deserialize(args.dataset)
    out = _prepare_out(Path(args.out or f"runs/sweep-{args.axis}"), args.force)
    results = pipeline.sweep(dataset, args.axis, values, cfg, pipeline.sweep_workers(len(values)))
    rows = [{args.axis: v, **pipeline.summary_row(r)} for v, r in results]
    _write_csv(rows, out / f"sweep_{args.axis}.csv")
    (out / "config.json").write_text(_dump_json({"axis": args.axis, "values": values, "run": cfg.to_dict()}))
    _print_rows(rows)
    return 0


def cmd_compare(args) -> int:
    cfg = _train_overrides(args, load_run_config(args))
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in names if m not in RECIPES]
    if bad or not names:
        raise UsageError(f"unknown method(s) {', '.join(bad) or '(none)'}; valid: {', '.join(RECIPES)}")
    dataset = synthdata.deserialize(args.dataset)
    out = _prepare_out(Path(args.out or "runs/compare"), args.force)
    baseline = None
    if any(m in pipeline.NEEDS_BASELINE for m in names):
        baseline, _ = pipeline.baseline_for(dataset, cfg)
    rows = []
    for name in names:
        res = pipeline.run_recipe(dataset, name, cfg, baseline)
        rows.append({"method": name, **pipeline.summary_row(res.report)})
    _write_csv(rows, out / "compare.csv")
    table = _pretty(rows)
    (out / "compare.txt").write_text(table)
    (out / "config.json").write_text(_dump_json({"methods": names, "run": cfg.to_dict()}))
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    training = _Parser(add_help=False)
    training.add_argument("--method", choices=METHODS)
    training.add_argument("--beta", type=float, help="others sampling ratio (bags)")
    training.add_argument("--gamma", type=float, help="focal exponent (focal)")
    training.add_argument("--groups", type=int, help="number of foreground groups (bags)")
    training.add_argument("--sampler", choices=SAMPLERS)
    training.add_argument("--rfs-t", dest="rfs_t", type=float, help="repeat-factor threshold")
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--no-background", action="store_true", help="bags without the background group")
    training.add_argument("--no-others", action="store_true", help="bags without others nodes")
    training.add_argument("--tau", type=float, help="tau for tau-normalization recipes")

    p = _Parser(prog="longtail-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic long-tail dataset")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common, training], help="train a classifier head")
    t.add_argument("dataset")
    t.add_argument("--init-checkpoint", dest="init_checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--predictor", choices=PREDICTORS, default="auto")
    e.add_argument("--tau", type=float)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, training], help="sweep beta or group count for bags")
    s.add_argument("dataset")
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", parents=[common, training], help="compare methods side by side")
    c.add_argument("dataset")
    c.add_argument("--methods", required=True, help=f"comma-separated, from: {', '.join(RECIPES)}")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        return args.func(args)
    except LabError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
