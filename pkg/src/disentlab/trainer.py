"""Upstream training loops, optimizers, loss-curve logging."""

import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .model import EncoderConfig, ProjectionConfig, init_params, encode, project, split_sub
from .rng import Rng

POSITIVE_MODES = ("view-pair", "joint-label", "disjoint-label")
CURVE_COLUMNS = ("step", "sub_infomax_slice0", "sub_infomax_slice1", "regularizer", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_terms):
        self.step = step
        self.last_terms = last_terms
        super().__init__(f"non-finite loss or parameters at step {step}; last finite terms: {last_terms}")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "dc-bc"
    positive_mode: str = "view-pair"
    regularizer: str = "none"
    lam: float = 0.0
    tau: float = 0.1
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 128
    steps: int = 2000
    seed: int = 0
    head_count: int = 0  # 0: two heads, or one for the Hessian penalty
    arch: str = "small-conv"
    channels: tuple = (8, 16, 64)
    kernel: int = 3
    out_init: float = 1.0
    mlp_hidden: int = 128
    rep_dim: int = 64
    proj_dim: int = 8
    proj_hidden: int = 64
    hflip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.positive_mode not in POSITIVE_MODES:
            raise ValueError(f"unknown positive mode {self.positive_mode!r}; expected one of {POSITIVE_MODES}")
        if self.regularizer not in L.REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; expected one of {L.REGULARIZERS}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lam < 0 or self.tau <= 0 or self.batch_size < 2 or self.steps < 1:
            raise ValueError("need lam >= 0, tau > 0, batch_size >= 2 and steps >= 1")
        heads = self.heads
        if self.regularizer == "hessian" and heads != 1:
            raise ValueError("the Hessian penalty runs on a single projection head")
        if self.regularizer in ("infomin", "ortho", "perm-ortho") and heads != 2:
            raise ValueError(f"{self.regularizer} runs on two projection heads")
        if self.positive_mode == "disjoint-label" and self.regularizer != "none":
            raise ValueError("the supervised disjoint-label pipeline takes no regularizer")

    @property
    def heads(self):
        if self.head_count:
            return self.head_count
        return 1 if self.regularizer == "hessian" else 2

    def encoder_config(self, image_size):
        return EncoderConfig(self.arch, self.channels, self.mlp_hidden, self.rep_dim, image_size, self.kernel, self.out_init)

    def projection_config(self):
        return ProjectionConfig(self.heads, self.proj_dim, self.proj_hidden)


@dataclass
class RunRecord:
    config: TrainConfig
    params: object
    curves: dict
    wall_clock: float
    seed: int
    permutation: tuple = None
    optimizer_state: dict = field(default=None, repr=False)

    def check_curves(self):
        total = self.curves["sub_infomax_slice0"] + self.curves["sub_infomax_slice1"]
        return np.max(np.abs(self.curves["total"] - (total + self.config.lam * self.curves["regularizer"])), initial=0.0)


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(params, grads, state, config):
    """One update of ``params`` ({name: array}) in place of a copy.

    Returns (new_params, new_state). Missing gradients count as zero.
    """
    state = dict(state)
    t = int(state.get("t", np.zeros(()))) + 1
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if config.optimizer == "adam":
            m = config.beta1 * state.get("m/" + name, np.zeros_like(p)) + (1 - config.beta1) * g
            v = config.beta2 * state.get("v/" + name, np.zeros_like(p)) + (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1**t)
            v_hat = v / (1 - config.beta2**t)
            new[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
            state["m/" + name], state["v/" + name] = m, v
        else:
            buf = config.momentum * state.get("mom/" + name, np.zeros_like(p)) + g
            new[name] = p - config.lr * buf
            state["mom/" + name] = buf
    state["t"] = np.array(float(t))
    return new, state


# ---------------------------------------------------------------------------
# batching


class BatchSampler:
    """Epoch-wise shuffled mini-batches from a named stream."""

    def __init__(self, n, batch_size, rng):
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds the {n} training pairs")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order, self._pos, self._epoch = None, n, -1

    def next(self):
        if self._pos + self.batch_size > self.n:
            self._epoch += 1
            self._order = self.rng.child(self._epoch).permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return np.sort(idx)


def _batch_images(dataset, idx, config, rng):
    images = dataset.train.images[idx]  # (N, 2, H, W, 3)
    x = np.concatenate([images[:, 0], images[:, 1]], axis=0).astype(np.float64) / 255.0
    if config.hflip:
        flip = rng.uniform(size=len(x)) < 0.5
        x[flip] = x[flip, :, ::-1]
    return x


def _check_dataset(config, dataset):
    if dataset.kind != config.variant:
        raise ValueError(f"config variant {config.variant!r} does not match dataset variant {dataset.kind!r}")


def _params_finite(params):
    return all(np.all(np.isfinite(t.data)) for t in params.tensors.values())


def _run(config, dataset, step_loss, perm=None, progress=None):
    _check_dataset(config, dataset)
    start = time.perf_counter()
    params = init_params(config.encoder_config(dataset.image_size), config.projection_config(), config.seed)
    root = Rng(config.seed, "train")
    sampler = BatchSampler(len(dataset.train), config.batch_size, root.stream("batches"))
    flips = root.stream("flips")
    curves = {c: np.zeros(config.steps) for c in CURVE_COLUMNS}
    state = {}
    last = None
    for step in range(config.steps):
        idx = sampler.next()
        x = _batch_images(dataset, idx, config, flips.child(step))
        terms = step_loss(params, x, idx)
        if not np.isfinite(terms.total):
            raise TrainingDiverged(step + 1, last)
        grads = ad.backward(terms.graph)
        named = {t.name: g for t, g in grads.items()}
        new, state = optimizer_step(params.arrays(), named, state, config)
        for name, value in new.items():
            params.tensors[name].data = value
            params.tensors[name].grad = None
        if not _params_finite(params):
            raise TrainingDiverged(step + 1, terms)
        last = replace(terms, graph=None)
        curves["step"][step] = step + 1
        curves["sub_infomax_slice0"][step] = terms.slices[0]
        curves["sub_infomax_slice1"][step] = terms.slices[1]
        curves["regularizer"][step] = terms.regularizer
        curves["total"][step] = terms.total
        if progress is not None:
            progress(step + 1, last)
    curves["step"] = curves["step"].astype(np.int64)
    return RunRecord(config, params, curves, time.perf_counter() - start, config.seed, perm, state)


def train_upstream(config, dataset, progress=None):
    """Contrastive training of encoder + projection with SubInfoMax + lam * R."""
    if config.positive_mode == "disjoint-label":
        return train_supervised_ideal(config, dataset, progress)
    perm = None
    width = 2 * config.proj_dim
    layout = L.SubembeddingLayout(2, width)
    if config.regularizer == "perm-ortho":
        perm = L.PermutationSpec.sample(config.proj_dim, Rng(config.seed, "permutation")).perm
    # view-pair mode must never see labels, so they are only read for joint-label
    pair_labels = dataset.pair_labels("train") if config.positive_mode == "joint-label" else None

    def step_loss(params, x, idx):
        z, _, _ = project(params, encode(params, x))
        if config.positive_mode == "view-pair":
            batch = L.ContrastiveBatch.from_view_pairs(z, config.tau)
        else:
            labels = np.concatenate([pair_labels[idx], pair_labels[idx]])
            views = np.repeat([0, 1], len(idx))
            batch = L.ContrastiveBatch.from_labels(z, labels, config.tau, views)
        return L.total_objective(batch, layout, config.regularizer, config.lam, perm)

    return _run(config, dataset, step_loss, perm, progress)


def train_supervised_ideal(config, dataset, progress=None):
    """InfoMax on r0 with task-A labels and on r1 with task-B labels.

    No projection head and no regularizer; ``lam`` is ignored.
    """
    config = replace(config, positive_mode="disjoint-label")
    tasks = dataset.variant.fixed
    factors = dataset.train.factors[:, 0]

    def step_loss(params, x, idx):
        r0, r1 = split_sub(encode(params, x), 2)
        la = np.tile(factors[idx, tasks[0]], 2)
        lb = np.tile(factors[idx, tasks[1]], 2)
        views = np.repeat([0, 1], len(idx))
        s0 = L.infomax(L.ContrastiveBatch.from_labels(r0, la, config.tau, views))
        s1 = L.infomax(L.ContrastiveBatch.from_labels(r1, lb, config.tau, views))
        total = s0 + s1
        return L.LossTerms(total.item(), (s0.item(), s1.item()), 0.0, 0.0, total.item(), total)

    record = _run(config, dataset, step_loss, None, progress)
    # lam plays no part in this pipeline; the curve identity holds with lam = 0
    record.config = replace(record.config, lam=0.0)
    return record


# ---------------------------------------------------------------------------
# loss-curve CSV


def write_curves(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for i in range(len(curves["step"])):
            w.writerow([int(curves["step"][i])] + [repr(float(curves[c][i])) for c in CURVE_COLUMNS[1:]])


def read_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if tuple(header) != CURVE_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    out = {c: np.array([float(r[i]) for r in body]) for i, c in enumerate(header)}
    out["step"] = out["step"].astype(np.int64)
    return out


def config_dict(config):
    d = asdict(config)
    d["channels"] = list(d["channels"])
    return d
