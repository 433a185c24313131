"""Contrastive objectives and subembedding regularizers.

All losses take embeddings as graph tensors and return scalar tensors, so a
single ``autodiff.backward`` call trains through any of them. Embeddings are
l2-normalized (eps inside the root) before every InfoNCE dot product.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

NORM_EPS = 1e-12
REGULARIZERS = ("none", "infomin", "ortho", "perm-ortho", "hessian")


@dataclass
class ContrastiveBatch:
    """Embeddings plus the anchor/positive/candidate structure of one batch.

    ``positives[i]`` holds weights over positives of anchor ``i`` (summing to
    one); an all-zero row marks a row that is not an anchor. ``candidates[i]``
    is the candidate set A(i), which must contain every positive and never
    ``i`` itself. ``views`` gives the view index of every row (needed by the
    within-view InfoMin term).
    """

    z: ad.Tensor
    positives: np.ndarray
    candidates: np.ndarray
    tau: float = 0.1
    views: np.ndarray = None

    def __post_init__(self):
        self.z = ad.as_tensor(self.z)
        if self.z.ndim != 2:
            raise ad.ShapeError(f"embeddings must be 2-D, got shape {self.z.shape}")
        n = self.z.shape[0]
        self.positives = np.asarray(self.positives, dtype=np.float64)
        self.candidates = np.asarray(self.candidates, dtype=bool)
        if self.positives.shape != (n, n) or self.candidates.shape != (n, n):
            raise ad.ShapeError(
                f"positives {self.positives.shape} / candidates {self.candidates.shape} "
                f"do not match {n} rows"
            )
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if np.any(np.diag(self.candidates)):
            raise ValueError("an anchor may not be its own candidate")
        if np.any((self.positives != 0) & ~self.candidates):
            raise ValueError("every positive must be in the anchor's candidate set")
        anchors = self.anchors
        if anchors.size == 0:
            raise ValueError("batch has no anchors")
        if not np.allclose(self.positives[anchors].sum(axis=1), 1.0):
            raise ValueError("positive weights of each anchor must sum to 1")
        if self.views is not None:
            self.views = np.asarray(self.views, dtype=np.int64)

    @property
    def anchors(self):
        return np.flatnonzero(self.positives.sum(axis=1) > 0)

    def with_z(self, z):
        return ContrastiveBatch(z, self.positives, self.candidates, self.tau, self.views)

    @classmethod
    def from_view_pairs(cls, z, tau=0.1):
        """Rows ``[view0 (N); view1 (N)]``; row i's positive is its other view."""
        z = ad.as_tensor(z)
        n = z.shape[0]
        if n % 2:
            raise ad.ShapeError(f"view-pair batch needs an even row count, got {n}")
        half = n // 2
        partner = (np.arange(n) + half) % n
        positives = np.zeros((n, n))
        positives[np.arange(n), partner] = 1.0
        candidates = ~np.eye(n, dtype=bool)
        views = np.repeat([0, 1], half)
        return cls(z, positives, candidates, tau, views)

    @classmethod
    def from_labels(cls, z, labels, tau=0.1, views=None):
        """Positives are all other rows sharing the anchor's label, weighted
        equally; candidates are all other rows. Rows whose label is unique in
        the batch are not anchors."""
        z = ad.as_tensor(z)
        labels = np.asarray(labels)
        n = z.shape[0]
        if labels.shape != (n,):
            raise ad.ShapeError(f"labels shape {labels.shape} does not match {n} rows")
        same = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
        counts = same.sum(axis=1, keepdims=True)
        positives = np.where(counts > 0, same / np.maximum(counts, 1), 0.0)
        return cls(z, positives, ~np.eye(n, dtype=bool), tau, views)

    @classmethod
    def from_positive_of(cls, z, positive_of, candidate_sets, tau=0.1, views=None):
        """Explicit form: ``positive_of[i]`` (or -1 for non-anchors) and
        ``candidate_sets[i]`` as an iterable of row indices."""
        z = ad.as_tensor(z)
        n = z.shape[0]
        positives = np.zeros((n, n))
        candidates = np.zeros((n, n), dtype=bool)
        for i, (p, cands) in enumerate(zip(positive_of, candidate_sets)):
            if p is None or p < 0:
                continue
            cands = list(cands)
            if not cands:
                raise ValueError(f"anchor {i} has an empty candidate set")
            positives[i, p] = 1.0
            candidates[i, cands] = True
        return cls(z, positives, candidates, tau, views)


@dataclass(frozen=True)
class SubembeddingLayout:
    """Partition of the embedding width into K contiguous equal slices."""

    k: int
    width: int

    def __post_init__(self):
        if self.k < 1 or self.width % self.k:
            raise ValueError(f"width {self.width} is not divisible into {self.k} subembeddings")

    @property
    def slice_width(self):
        return self.width // self.k

    def bounds(self):
        w = self.slice_width
        return [(i * w, (i + 1) * w) for i in range(self.k)]

    def split(self, z):
        if z.shape[1] != self.width:
            raise ad.ShapeError(f"layout width {self.width} does not match embedding shape {z.shape}")
        if self.k == 1:
            return [z]
        return [ad.slice_cols(z, a, b) for a, b in self.bounds()]


@dataclass(frozen=True)
class PermutationSpec:
    perm: tuple
    seed: int = None

    def __post_init__(self):
        perm = tuple(int(i) for i in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"not a permutation: {perm}")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def sample(cls, width, rng):
        return cls(tuple(int(i) for i in rng.permutation(width)), rng.seed)

    @property
    def is_identity(self):
        return self.perm == tuple(range(len(self.perm)))


@dataclass
class LossTerms:
    sub_infomax: float
    slices: tuple
    regularizer: float
    lam: float
    total: float
    graph: ad.Tensor = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# InfoNCE


def _nce(scores, positives, candidates):
    """sum_i [ logsumexp_{a in A(i)} s_ia - sum_j p_ij s_ij ] over anchor rows.

    ``scores`` is a graph tensor; ``positives`` and ``candidates`` are
    constant masks of the same shape, already restricted to anchor rows.
    """
    if not np.all(candidates.any(axis=1)):
        raise ValueError("empty candidate set")
    shift = np.where(candidates, scores.data, -np.inf).max(axis=1, keepdims=True)
    expd = ad.exp(scores - shift) * candidates.astype(np.float64)
    lse = ad.log(ad.sum(expd, axis=1, keepdims=True)) + shift
    pos = ad.sum(scores * positives, axis=1, keepdims=True)
    return ad.sum(lse - pos)


def _similarities(z, tau):
    zn = ad.l2_normalize(z, NORM_EPS)
    return zn, ad.matmul(zn, ad.transpose(zn)) * (1.0 / tau)


def infomax(batch):
    """InfoNCE summed over anchors, on l2-normalized embeddings."""
    _, sims = _similarities(batch.z, batch.tau)
    rows = batch.anchors
    return _nce(ad.gather_rows(sims, rows), batch.positives[rows], batch.candidates[rows])


def sub_infomax_slices(batch, layout):
    return [infomax(batch.with_z(zk)) for zk in layout.split(batch.z)]


def sub_infomax(batch, layout):
    """Sum over subembeddings of InfoMax on each slice, same positives/candidates."""
    terms = sub_infomax_slices(batch, layout)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def infomin_reg(batch, layout):
    """Within-view InfoNCE between slices of the same sample, negated.

    For anchor slice k of sample i the target is the same sample's slice k'
    and the candidate set is that target plus slice k of every other sample
    in the same view. The result is therefore <= 0.
    """
    if layout.k < 2:
        raise ValueError("infomin needs at least two subembeddings")
    if batch.views is None:
        raise ValueError("infomin needs view assignments for the batch rows")
    slices = layout.split(batch.z)
    total = None
    for view in np.unique(batch.views):
        rows = np.flatnonzero(batch.views == view)
        n = rows.size
        if n < 1:
            continue
        normed = [ad.l2_normalize(ad.gather_rows(s, rows), NORM_EPS) for s in slices]
        positives = np.hstack([np.eye(n), np.zeros((n, n))])
        candidates = np.hstack([np.eye(n, dtype=bool), ~np.eye(n, dtype=bool)])
        for k in range(layout.k):
            for kp in range(layout.k):
                if k == kp:
                    continue
                pool = ad.concat_rows([normed[kp], normed[k]])
                scores = ad.matmul(normed[k], ad.transpose(pool)) * (1.0 / batch.tau)
                term = -_nce(scores, positives, candidates)
                total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# orthogonality


def _ortho(slices, perm):
    normed = [ad.l2_normalize(s, NORM_EPS) for s in slices]
    total = None
    for k, zk in enumerate(normed):
        anchor = zk if perm is None else ad.gather_cols(zk, np.asarray(perm))
        for kp, zkp in enumerate(normed):
            if k == kp:
                continue
            term = ad.sum(ad.absolute(ad.matmul(anchor, ad.transpose(zkp))))
            total = term if total is None else total + term
    return total


def _check_pair(z0, z1):
    z0, z1 = ad.as_tensor(z0), ad.as_tensor(z1)
    if z0.ndim != 2 or z0.shape != z1.shape:
        raise ad.ShapeError(f"subembedding shapes differ: {z0.shape} vs {z1.shape}")
    return z0, z1


def ortho_reg(z0, z1):
    """Unsigned cosine between every cross-slice, cross-sample pair, both orders."""
    z0, z1 = _check_pair(z0, z1)
    return _ortho([z0, z1], None)


def perm_ortho_reg(z0, z1, perm):
    """``ortho_reg`` with the anchor slice's coordinates permuted by ``perm``."""
    z0, z1 = _check_pair(z0, z1)
    spec = perm if isinstance(perm, PermutationSpec) else PermutationSpec(tuple(perm))
    if len(spec.perm) != z0.shape[1]:
        raise ValueError(f"permutation of length {len(spec.perm)} does not fit slice width {z0.shape[1]}")
    return _ortho([z0, z1], spec.perm)


# ---------------------------------------------------------------------------
# Gauss-Newton Hessian block penalty


def infomax_grad_closed_form(batch):
    """d infomax / dZ as a graph expression of Z (differentiable again).

    With S = Zn Zn^T / tau and W = softmax_A(S) - positives on anchor rows,
    dL/dZn = (W + W^T) Zn / tau; the normalization Jacobian maps this back
    to the raw rows.
    """
    z = batch.z
    n = z.shape[0]
    zn, sims = _similarities(z, batch.tau)
    rows = batch.anchors
    cand = batch.candidates[rows]
    if not np.all(cand.any(axis=1)):
        raise ValueError("empty candidate set")
    s = ad.gather_rows(sims, rows)
    shift = np.where(cand, s.data, -np.inf).max(axis=1, keepdims=True)
    expd = ad.exp(s - shift) * cand.astype(np.float64)
    probs = expd / ad.sum(expd, axis=1, keepdims=True)
    weights = probs - batch.positives[rows]
    scatter = np.zeros((n, rows.size))
    scatter[rows, np.arange(rows.size)] = 1.0
    w_full = ad.matmul(scatter, weights)
    g_norm = ad.matmul(w_full + ad.transpose(w_full), zn) * (1.0 / batch.tau)
    norm = ad.row_norm(z, NORM_EPS)
    radial = ad.sum(z * g_norm, axis=1, keepdims=True)
    return g_norm / norm - z * (radial / (norm * norm * norm))


def hessian_block_norms(g, layout):
    """Per-sample Frobenius norm of the off-diagonal block of g g^T."""
    if layout.k != 2:
        raise ValueError("the Hessian block penalty is defined for two subembeddings")
    g = ad.as_tensor(g)
    g0, g1 = layout.split(g)
    s0 = ad.sum(ad.square(g0), axis=1)
    s1 = ad.sum(ad.square(g1), axis=1)
    return ad.sqrt(s0 * s1)


def hessian_reg(g, layout):
    """Batch mean of the per-sample block norms ||g_slice0|| * ||g_slice1||."""
    return ad.mean(hessian_block_norms(g, layout))


# ---------------------------------------------------------------------------
# combined objective


def regularizer(kind, batch, layout, perm=None):
    if kind == "none":
        return None
    if kind == "infomin":
        return infomin_reg(batch, layout)
    if kind in ("ortho", "perm-ortho"):
        if layout.k != 2:
            raise ValueError("orthogonality terms are defined for two subembeddings")
        z0, z1 = layout.split(batch.z)
        if kind == "ortho":
            return ortho_reg(z0, z1)
        if perm is None:
            raise ValueError("perm-ortho needs a permutation")
        return perm_ortho_reg(z0, z1, perm)
    if kind == "hessian":
        return hessian_reg(infomax_grad_closed_form(batch), layout)
    raise ValueError(f"unknown regularizer {kind!r}; expected one of {REGULARIZERS}")


def total_objective(batch, layout, kind="none", lam=0.0, perm=None):
    """SubInfoMax + lam * R, returned with every term as a float."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    slices = sub_infomax_slices(batch, layout)
    sub = slices[0]
    for t in slices[1:]:
        sub = sub + t
    reg = regularizer(kind, batch, layout, perm)
    total = sub if reg is None else sub + reg * lam
    return LossTerms(
        sub_infomax=sub.item(),
        slices=tuple(t.item() for t in slices),
        regularizer=0.0 if reg is None else reg.item(),
        lam=float(lam),
        total=total.item(),
        graph=total,
    )
