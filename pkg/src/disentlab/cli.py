"""Command-line experiment runner.

Each run lives in its own directory: ``config.ini``, ``checkpoint.dlck``,
``loss_curve.csv``, ``report.json`` and ``timing.json``. Everything except
timing.json is a pure function of the config, so reruns are bit-identical.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, load_config, parse_config
from .evaluation import INPUTS, GapReport, dump_json, evaluate_run, gap, repro_stats, round_table, run_report
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .synthdata import VARIANTS, DatasetFormatError, DatasetVariant, build_dataset, load_dataset
from .trainer import TrainingDiverged, train_upstream, write_curves

OUT_ENV = "DISENTLAB_OUT"
RUN_FILES = ("config.ini", "checkpoint.dlck", "loss_curve.csv", "report.json")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_root():
    return Path(os.environ.get(OUT_ENV, "disentlab-out"))


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# datasets


def dataset_path(cfg):
    d = cfg.data
    if d["path"]:
        return Path(d["path"])
    name = f"{d['variant']}-s{d['seed']}-{d['train']}x{d['test']}-{d['image_size']}px-g{d['glyph_size']}.dlvp"
    return _out_root() / "data" / name


def _matches(ds, cfg):
    d = cfg.data
    return (
        ds.kind == d["variant"]
        and ds.seed == d["seed"]
        and len(ds.train) == d["train"]
        and len(ds.test) == d["test"]
        and ds.image_size == d["image_size"]
        and ds.glyph_size == d["glyph_size"]
    )


def ensure_dataset(cfg, load=True):
    """Load the dataset the config describes, generating it on first use."""
    path = dataset_path(cfg)
    if path.exists():
        ds = load_dataset(path)
        if not _matches(ds, cfg):
            raise ConfigError(f"dataset at {path} does not match the [data] section")
        return ds if load else path
    path.parent.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    _log(f"generating {d['variant']} dataset ({d['train']}/{d['test']} pairs) at {path}")
    ds, checksum = build_dataset(cfg.variant(), d["seed"], path, d["image_size"], d["glyph_size"])
    _log(f"sha256 {checksum}")
    return ds if load else path


# ---------------------------------------------------------------------------
# single runs


def evaluate_params(cfg, params, dataset, permutation=None):
    report = evaluate_run(params, dataset, probe_config=cfg.probe_config(), view=cfg.eval["view"])
    g = gap(report, eps=cfg.eval["eps"], delta=cfg.eval["delta"])
    return run_report(report, g, cfg.config_hash, cfg.train["seed"], permutation, "loss_curve.csv")


def run_experiment(cfg, out_dir, dataset=None):
    """Train, checkpoint, log curves and probe; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else ensure_dataset(cfg)
    (out / "config.ini").write_text(cfg.to_ini())
    tc = cfg.train_config()
    every = max(1, tc.steps // 10)

    def progress(step, terms):
        if step % every == 0 or step == tc.steps:
            _log(f"[{out.name}] step {step}/{tc.steps} total {terms.total:.4f} reg {terms.regularizer:.4f}")

    record = train_upstream(tc, dataset, progress)
    perm = list(record.permutation) if record.permutation is not None else None
    meta = {"config_hash": cfg.config_hash, "seed": tc.seed, "permutation_P": perm}
    save_checkpoint(out / "checkpoint.dlck", record.params, record.optimizer_state, meta)
    write_curves(out / "loss_curve.csv", record.curves)
    report = evaluate_params(cfg, record.params, dataset, perm)
    dump_json(report, out / "report.json")
    dump_json({"train_seconds": record.wall_clock, "steps": tc.steps}, out / "timing.json")
    return report


def _worker(ini_text, out_dir):
    cfg = parse_config(ini_text)
    return str(out_dir), run_experiment(cfg, out_dir)


def run_many(jobs, n_jobs=1):
    """``jobs`` is a list of (config, out_dir); returns {out_dir: report}."""
    if n_jobs <= 1 or len(jobs) <= 1:
        return {str(d): run_experiment(c, d) for c, d in jobs}
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        futures = [pool.submit(_worker, c.to_ini(), d) for c, d in jobs]
        return dict(f.result() for f in futures)


# ---------------------------------------------------------------------------
# tables


def _fmt(x):
    return f"{round_table(x):.1f}"


def probe_table(reports, labels):
    """Rows: probe inputs then the z-gap row; columns: run x task."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["input"]
    for label, rep in zip(labels, reports):
        header += [f"{label}:{t}" for t in rep["tasks"]]
    w.writerow(header)
    for inp in INPUTS:
        row = [inp]
        for rep in reports:
            row += [_fmt(rep["probe"][inp][t]) if inp in rep["probe"] else "" for t in rep["tasks"]]
        w.writerow(row)
    row = ["|C(z0)-C(z1)|"]
    for rep in reports:
        row += [_fmt(rep["gaps"][t]) for t in rep["tasks"]]
    w.writerow(row)
    row = ["diagonal_trend"]
    for rep in reports:
        row += [str(rep["diagonal_trend"]).lower()] + [""] * (len(rep["tasks"]) - 1)
    w.writerow(row)
    return buf.getvalue()


def _read_report(run_dir):
    path = Path(run_dir) / "report.json"
    with open(path) as fh:
        return json.load(fh)


def _stats_from_reports(reports):
    gaps = [GapReport(r["gaps"], r.get("gaps_r", {}), r["diagonal_trend"], r.get("diagonal_trend_r", False)) for r in reports]
    return repro_stats(gaps)


def reports_json(reports, labels):
    out = {"runs": {label: rep for label, rep in zip(labels, reports)}}
    if reports:
        out["repro"] = _stats_from_reports(reports).to_dict()
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    try:
        variant = DatasetVariant(args.variant, args.train, args.test)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _, checksum = build_dataset(variant, args.seed, args.out, args.image_size, args.glyph_size)
    print(checksum)
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values(train={"seed": args.seed})
    out = Path(args.out) if args.out else _out_root() / "runs" / f"{cfg.config_hash[:12]}-s{cfg.train['seed']}"
    report = run_experiment(cfg, out)
    print(out)
    print(probe_table([report], [out.name]), end="")
    return 0


def cmd_eval(args):
    run = Path(args.run)
    cfg = load_config(run / "config.ini")
    params, _, meta = load_checkpoint(run / "checkpoint.dlck")
    ds = load_dataset(args.data)
    if ds.kind != cfg.data["variant"]:
        raise ConfigError(f"dataset variant {ds.kind} does not match run variant {cfg.data['variant']}")
    report = evaluate_params(cfg, params, ds, meta.get("permutation_P"))
    dump_json(report, run / "report.json")
    print(probe_table([report], [run.name]), end="")
    return 0


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _lam_label(lam):
    return repr(float(lam))


def cmd_ablate(args):
    cfg = load_config(args.config)
    regs = [r.strip() for r in args.regs.split(",") if r.strip()]
    lams = _floats(args.lambdas)
    if not regs or not lams:
        raise UsageError("ablate needs at least one regularizer and one lambda")
    out = Path(args.out) if args.out else _out_root() / "ablate" / cfg.config_hash[:12]
    jobs = []
    for reg in regs:
        for lam in lams:
            head = 1 if reg == "hessian" else 2
            cell = cfg.with_values(train={"regularizer": reg, "lam": lam}, model={"head_count": head})
            jobs.append((cell, out / f"{reg}-lam{_lam_label(lam)}"))
    ensure_dataset(cfg, load=False)
    reports = run_many(jobs, args.jobs)
    labels = [Path(d).name for _, d in jobs]
    ordered = [reports[str(d)] for _, d in jobs]
    table = probe_table(ordered, labels)
    (out / "ablation.csv").write_text(table)
    print(table, end="")
    return 0


def cmd_repro(args):
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    cfg = load_config(args.config)
    base = cfg.train["seed"]
    out = Path(args.out) if args.out else _out_root() / "repro" / cfg.config_hash[:12]
    jobs = [(cfg.with_values(train={"seed": base + i}), out / f"run{i}-seed{base + i}") for i in range(args.seeds)]
    ensure_dataset(cfg, load=False)
    reports = run_many(jobs, args.jobs)
    ordered = [reports[str(d)] for _, d in jobs]
    labels = [f"run{i}" for i in range(args.seeds)]
    stats = _stats_from_reports(ordered)
    table = probe_table(ordered, labels)
    (out / "repro.csv").write_text(table)
    summary = stats.to_dict()
    summary["rounded"] = stats.rounded()
    dump_json(summary, out / "repro.json")
    print(table, end="")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_report(args):
    reports = [_read_report(d) for d in args.runs]
    labels = [Path(d).name for d in args.runs]
    text = probe_table(reports, labels) if args.format == "csv" else reports_json(reports, labels)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = _Parser(prog="disentlab", description="Subembedding disentanglement experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a view-pair dataset file")
    g.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=20000)
    g.add_argument("--test", type=int, default=2000)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--glyph-size", type=int, default=28)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and probe one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-run the probe protocol on a stored run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="regularizer x lambda grid")
    a.add_argument("--config", required=True)
    a.add_argument("--lambdas", default="0.001,0.1")
    a.add_argument("--regs", default="infomin,ortho,perm-ortho,hessian")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("repro", help="multi-seed reruns with seeds seed+i")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", type=int, default=6)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out")
    r.set_defaults(func=cmd_repro)

    rp = sub.add_parser("report", help="tables from stored run reports")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--format", choices=("csv", "json"), default="csv")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log(f"error: {exc}")
        return 1
    except (TrainingDiverged, DatasetFormatError, CheckpointError, OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
