"""Linear-probe protocol, subembedding gaps and reproducibility statistics."""

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .model import ProbeConfig, encode, probe_accuracy, probe_train, project, split_sub

INPUTS = ("r", "r0", "r1", "z", "z0", "z1")


def round_table(x, places=1):
    """Round half-up the way printed tables do, ignoring float noise below
    1e-9 (so 45.3 / 6 = 7.549999... prints as 7.6)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(f"{x:.9f}").quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class ProbeReport:
    """Accuracy (percent) per embedding input and task."""

    accuracy: dict  # input -> task -> percent
    chance: dict  # task -> percent
    tasks: tuple = ()

    def __post_init__(self):
        if not self.tasks:
            self.tasks = tuple(self.chance)
        for inp, row in self.accuracy.items():
            for task, acc in row.items():
                if not 0.0 <= acc <= 100.0:
                    raise ValueError(f"accuracy {acc} for {inp}/{task} outside [0, 100]")

    def __getitem__(self, key):
        inp, task = key
        return self.accuracy[inp][task]

    @classmethod
    def from_table(cls, table, chance):
        """Build from {input: (acc_task_a, acc_task_b)} with ``chance`` an
        ordered {task: percent}."""
        tasks = tuple(chance)
        acc = {inp: dict(zip(tasks, map(float, vals))) for inp, vals in table.items()}
        return cls(acc, dict(chance), tasks)

    def to_dict(self):
        return {"probe": self.accuracy, "chance": self.chance, "tasks": list(self.tasks)}


@dataclass
class GapReport:
    gaps: dict  # task -> |C(z0) - C(z1)|
    gaps_r: dict  # task -> |C(r0) - C(r1)|
    diagonal_trend: bool
    diagonal_trend_r: bool
    flags: set = field(default_factory=set)

    def to_dict(self):
        return {
            "gaps": self.gaps,
            "gaps_r": self.gaps_r,
            "diagonal_trend": self.diagonal_trend,
            "diagonal_trend_r": self.diagonal_trend_r,
            "flags": sorted(self.flags),
        }


@dataclass
class ReproStats:
    gaps: dict  # task -> list of per-run gaps
    mean: dict
    variance: dict
    diagonal_count: int
    diagonal_count_excluding_first: int
    runs: int

    def rounded(self, places=1):
        return {
            "mean": {t: round_table(v, places) for t, v in self.mean.items()},
            "variance": {t: round_table(v, places) for t, v in self.variance.items()},
        }

    def to_dict(self):
        return {
            "runs": self.runs,
            "gaps": self.gaps,
            "mean": self.mean,
            "variance": self.variance,
            "diagonal_count": self.diagonal_count,
            "diagonal_count_excluding_run0": self.diagonal_count_excluding_first,
        }


# ---------------------------------------------------------------------------
# embedding + probing


def embed(params, images, batch_size=256):
    """All six probe inputs for ``images`` as arrays (no graph is kept)."""
    frozen = params.copy()
    for t in frozen.tensors.values():
        t.requires_grad = False
    out = {k: [] for k in INPUTS}
    for start in range(0, len(images), batch_size):
        chunk = np.asarray(images[start:start + batch_size])
        chunk = chunk / 255.0 if chunk.dtype == np.uint8 else chunk.astype(np.float64)
        r = encode(frozen, chunk)
        z, z0, z1 = project(frozen, r)
        r0, r1 = split_sub(r, 2)
        for k, v in zip(INPUTS, (r, r0, r1, z, z0, z1)):
            out[k].append(v.data)
    return {k: np.concatenate(v) for k, v in out.items()}


def probe_embeddings(train_emb, train_labels, test_emb, test_labels, num_classes, probe_config=None, inputs=INPUTS):
    """Fresh probe per (input, task); returns {input: {task: percent}}."""
    acc = {}
    for inp in inputs:
        acc[inp] = {}
        for task in train_labels:
            probe = probe_train(train_emb[inp], train_labels[task], num_classes[task], probe_config)
            acc[inp][task] = 100.0 * probe_accuracy(probe, test_emb[inp], test_labels[task])
    return acc


def evaluate_run(params, dataset, tasks=None, probe_config=None, view=0, inputs=INPUTS):
    """Probe every input for every task: fit on train, score on test."""
    tasks = tuple(tasks or dataset.variant.tasks)
    train_labels = {t: v for t, v in dataset.task_labels("train", view).items() if t in tasks}
    test_labels = {t: v for t, v in dataset.task_labels("test", view).items() if t in tasks}
    num_classes = {t: dataset.num_classes(t) for t in tasks}
    train_emb = embed(params, dataset.train.images[:, view])
    test_emb = embed(params, dataset.test.images[:, view])
    acc = probe_embeddings(train_emb, train_labels, test_emb, test_labels, num_classes, probe_config or ProbeConfig(), inputs)
    chance = {t: 100.0 / num_classes[t] for t in tasks}
    return ProbeReport(acc, chance, tasks)


# ---------------------------------------------------------------------------
# gap metrics and diagnosis


def _winner(a, b):
    if a > b:
        return 0
    if b > a:
        return 1
    return None


def _pair_gaps(report, first, second):
    if first not in report.accuracy or second not in report.accuracy:
        return {}
    return {t: abs(report[first, t] - report[second, t]) for t in report.tasks}


def _trend(report, first, second, gaps, eps):
    if len(report.tasks) != 2 or not gaps:
        return False
    ta, tb = report.tasks
    wa = _winner(report[first, ta], report[second, ta])
    wb = _winner(report[first, tb], report[second, tb])
    return wa is not None and wb is not None and wa != wb and gaps[ta] > eps and gaps[tb] > eps


def gap(report, eps=1.0, chance=None, delta=3.0):
    """Subembedding gaps per task and the diagonal-trend judgement.

    The trend holds when the two tasks are won by different subembeddings
    and both gaps exceed ``eps`` points.
    """
    gaps = _pair_gaps(report, "z0", "z1")
    gaps_r = _pair_gaps(report, "r0", "r1")
    flags = diagnose_degenerate(report, chance, delta) if "z" in report.accuracy else set()
    return GapReport(
        gaps,
        gaps_r,
        _trend(report, "z0", "z1", gaps, eps),
        _trend(report, "r0", "r1", gaps_r, eps),
        flags,
    )


def diagnose_degenerate(report, chance_levels=None, delta=3.0, far=20.0):
    """Flags for degenerate solutions on the projection outputs.

    Random: every z/z0/z1 accuracy within ``delta`` of chance.
    TaskDifficulty: for some task, z/z0/z1 agree within ``delta`` while the
    full z sits more than ``far`` points above chance.
    """
    chance = chance_levels or report.chance
    flags = set()
    keys = ("z", "z0", "z1")
    if all(abs(report[k, t] - chance[t]) <= delta for k in keys for t in report.tasks):
        flags.add("Random")
    for t in report.tasks:
        vals = [report[k, t] for k in keys]
        if max(vals) - min(vals) < delta and report["z", t] - chance[t] > far:
            flags.add("TaskDifficulty")
    return flags


def repro_stats(runs):
    """Mean and population variance of per-run gaps, per task.

    ``runs`` is a sequence of GapReports or of {task: gap} dicts; the first
    entry plays the role of the original run for the excluding-run-0 count.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("repro_stats needs at least one run")
    gap_dicts = [r.gaps if isinstance(r, GapReport) else dict(r) for r in runs]
    trends = [bool(r.diagonal_trend) if isinstance(r, GapReport) else False for r in runs]
    tasks = list(gap_dicts[0])
    gaps = {t: [float(g[t]) for g in gap_dicts] for t in tasks}
    mean = {t: float(np.mean(v)) for t, v in gaps.items()}
    var = {t: float(np.mean((np.array(v) - mean[t]) ** 2)) for t, v in gaps.items()}
    return ReproStats(gaps, mean, var, sum(trends), sum(trends[1:]), len(runs))


# ---------------------------------------------------------------------------
# run reports


def run_report(report, gap_report, config_hash, seed, permutation=None, loss_curve_path="loss_curve.csv"):
    return {
        "config_hash": config_hash,
        "seed": seed,
        "probe": report.accuracy,
        "chance": report.chance,
        "tasks": list(report.tasks),
        "gaps": gap_report.gaps,
        "gaps_r": gap_report.gaps_r,
        "diagonal_trend": gap_report.diagonal_trend,
        "diagonal_trend_r": gap_report.diagonal_trend_r,
        "flags": sorted(gap_report.flags),
        "permutation_P": list(permutation) if permutation is not None else None,
        "loss_curve_path": loss_curve_path,
    }


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def report_from_json(d):
    return ProbeReport(d["probe"], d["chance"], tuple(d["tasks"]))
