import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disentlab import autodiff as ad
from disentlab import losses as L

LN_1P_EINV = math.log(1.0 + math.exp(-1.0))  # 0.31326...


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / math.sqrt(float(v @ v) + 1e-12)


def brute_infomax(z, positive_of, cands, tau):
    """Direct per-anchor evaluation with python loops."""
    total = 0.0
    for i, p in enumerate(positive_of):
        if p < 0:
            continue
        zi = _unit(z[i])
        num = math.exp(zi @ _unit(z[p]) / tau)
        den = sum(math.exp(zi @ _unit(z[a]) / tau) for a in cands[i])
        total -= math.log(num / den)
    return total


def brute_infomin(z, views, k, tau):
    w = z.shape[1] // k
    sl = lambda row, s: _unit(row[s * w:(s + 1) * w])
    total = 0.0
    for v in np.unique(views):
        rows = np.flatnonzero(views == v)
        for a in range(k):
            for b in range(k):
                if a == b:
                    continue
                for i in rows:
                    num = math.exp(sl(z[i], a) @ sl(z[i], b) / tau)
                    den = num + sum(math.exp(sl(z[i], a) @ sl(z[j], a) / tau) for j in rows if j != i)
                    total += math.log(num / den)
    return total


def brute_ortho(z0, z1, perm=None):
    total = 0.0
    slices = [z0, z1]
    for k in range(2):
        for kp in range(2):
            if k == kp:
                continue
            for i in range(len(z0)):
                for j in range(len(z0)):
                    a = slices[k][i] if perm is None else slices[k][i][list(perm)]
                    b = slices[kp][j]
                    total += abs(a @ b) / (np.linalg.norm(slices[k][i]) * np.linalg.norm(b))
    return total


def view_pair_structure(n_pairs):
    n = 2 * n_pairs
    positive_of = [(i + n_pairs) % n for i in range(n)]
    cands = [[a for a in range(n) if a != i] for i in range(n)]
    return positive_of, cands


@pytest.fixture
def gen():
    return np.random.default_rng(99)


class TestInfoMax:
    def test_uniform_equals_log_candidates(self):
        batch = L.ContrastiveBatch.from_view_pairs(np.ones((4, 3)), tau=0.1)
        assert abs(L.infomax(batch).item() / 4 - math.log(3)) < 1e-9

    def test_hand_instance(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        batch = L.ContrastiveBatch.from_positive_of(z, [1, -1, -1], [[1, 2], [], []], tau=1.0)
        assert abs(L.infomax(batch).item() - LN_1P_EINV) < 1e-9
        assert abs(L.infomax(batch).item() - 0.31326) < 1e-5

    def test_flat_temperature_limit(self, gen):
        batch = L.ContrastiveBatch.from_view_pairs(gen.normal(size=(6, 4)), tau=1e9)
        assert abs(L.infomax(batch).item() / 6 - math.log(5)) < 1e-6

    def test_matches_brute_force(self, gen):
        z = gen.normal(size=(8, 5))
        pos, cands = view_pair_structure(4)
        batch = L.ContrastiveBatch.from_view_pairs(z, tau=0.3)
        assert abs(L.infomax(batch).item() - brute_infomax(z, pos, cands, 0.3)) < 1e-9

    def test_label_mode_multi_positive(self, gen):
        z = gen.normal(size=(6, 3))
        labels = np.array([0, 1, 0, 2, 1, 0])
        batch = L.ContrastiveBatch.from_labels(z, labels, tau=0.5)
        # anchor 3 has no same-label partner and is skipped
        assert 3 not in batch.anchors
        zn = np.array([_unit(r) for r in z])
        s = zn @ zn.T / 0.5
        ref = 0.0
        for i in batch.anchors:
            others = [a for a in range(6) if a != i]
            pos = [a for a in others if labels[a] == labels[i]]
            ref += math.log(sum(math.exp(s[i, a]) for a in others)) - np.mean([s[i, p] for p in pos])
        assert abs(L.infomax(batch).item() - ref) < 1e-9

    def test_rejects_bad_batches(self):
        with pytest.raises(ValueError):
            L.ContrastiveBatch.from_view_pairs(np.ones((4, 2)), tau=0.0)
        with pytest.raises(ValueError):
            L.ContrastiveBatch.from_positive_of(np.ones((2, 2)), [1, -1], [[], []])
        with pytest.raises(ValueError):
            L.ContrastiveBatch.from_positive_of(np.ones((3, 2)), [1, -1, -1], [[0, 1], [], []])

    def test_batch_order_invariance(self, gen):
        z = gen.normal(size=(8, 4))
        perm = gen.permutation(4)
        order = np.concatenate([perm, perm + 4])
        a = L.infomax(L.ContrastiveBatch.from_view_pairs(z)).item()
        b = L.infomax(L.ContrastiveBatch.from_view_pairs(z[order])).item()
        assert abs(a - b) < 1e-10


class TestSubInfoMax:
    def test_k1_is_infomax_bitwise(self, gen):
        batch = L.ContrastiveBatch.from_view_pairs(gen.normal(size=(6, 4)))
        sub = L.sub_infomax(batch, L.SubembeddingLayout(1, 4)).item()
        assert sub == L.infomax(batch).item()

    def test_two_copies_of_hand_instance(self):
        z = np.array([[1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
        batch = L.ContrastiveBatch.from_positive_of(z, [1, -1, -1], [[1, 2], [], []], tau=1.0)
        val = L.sub_infomax(batch, L.SubembeddingLayout(2, 4)).item()
        assert abs(val - 2 * LN_1P_EINV) < 1e-9

    def test_split_layout_rejects_indivisible(self):
        with pytest.raises(ValueError):
            L.SubembeddingLayout(3, 8)


class TestInfoMin:
    def test_uniform_case(self):
        n_pairs, k = 3, 2
        batch = L.ContrastiveBatch.from_view_pairs(np.ones((2 * n_pairs, 4)))
        n_terms = k * (k - 1) * 2 * n_pairs
        val = L.infomin_reg(batch, L.SubembeddingLayout(k, 4)).item()
        assert abs(val - n_terms * -math.log(n_pairs)) < 1e-9

    def test_hand_term(self):
        # anchor slice [1,0], own other slice [1,0], one candidate slice [0,1]
        num = math.exp(1.0)
        assert abs(math.log(num / (num + math.exp(0.0))) + 0.31326) < 1e-5

    def test_hand_instance_in_batch(self):
        # two samples in one view: sample 0 = [1,0 | 1,0], sample 1 = [0,1 | 0,1]
        z = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
        batch = L.ContrastiveBatch(z, np.eye(2)[[1, 0]], ~np.eye(2, dtype=bool), 1.0, np.zeros(2))
        val = L.infomin_reg(batch, L.SubembeddingLayout(2, 4)).item()
        # all four (k, k', i) terms are the hand term by symmetry
        assert abs(val - 4 * -LN_1P_EINV) < 1e-9

    def test_matches_brute_force(self, gen):
        z = gen.normal(size=(8, 6))
        batch = L.ContrastiveBatch.from_view_pairs(z, tau=0.4)
        ref = brute_infomin(z, batch.views, 2, 0.4)
        assert abs(L.infomin_reg(batch, L.SubembeddingLayout(2, 6)).item() - ref) < 1e-9

    def test_is_negated_infomax_of_swapped_batch(self, gen):
        z = gen.normal(size=(6, 4))
        batch = L.ContrastiveBatch.from_view_pairs(z, tau=0.2)
        reg = L.infomin_reg(batch, L.SubembeddingLayout(2, 4)).item()
        expected = 0.0
        for view in (0, 1):
            rows = np.flatnonzero(batch.views == view)
            n = rows.size
            for k, kp in ((0, 1), (1, 0)):
                anchors = z[rows][:, 2 * k:2 * k + 2]
                targets = z[rows][:, 2 * kp:2 * kp + 2]
                stacked = np.vstack([anchors, targets])
                positive_of = [n + i for i in range(n)] + [-1] * n
                cands = [[n + i] + [a for a in range(n) if a != i] for i in range(n)] + [[]] * n
                swapped = L.ContrastiveBatch.from_positive_of(stacked, positive_of, cands, tau=0.2)
                expected -= L.infomax(swapped).item()
        assert abs(reg - expected) < 1e-9

    def test_needs_two_slices(self):
        batch = L.ContrastiveBatch.from_view_pairs(np.ones((4, 4)))
        with pytest.raises(ValueError):
            L.infomin_reg(batch, L.SubembeddingLayout(1, 4))


class TestOrtho:
    def test_orthogonal_one_hots(self):
        assert L.ortho_reg(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == 0.0

    def test_hand_cosine(self):
        # one sample: the (0,1) and (1,0) orderings each contribute 1/sqrt(2)
        val = L.ortho_reg(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]])).item()
        assert abs(val - 2 / math.sqrt(2)) < 1e-9
        assert abs(val / 2 - 0.70711) < 1e-5

    def test_matches_brute_force(self, gen):
        z0, z1 = gen.normal(size=(5, 3)), gen.normal(size=(5, 3))
        assert abs(L.ortho_reg(z0, z1).item() - brute_ortho(z0, z1)) < 1e-9
        perm = (2, 0, 1)
        assert abs(L.perm_ortho_reg(z0, z1, perm).item() - brute_ortho(z0, z1, perm)) < 1e-9

    def test_scale_invariance(self, gen):
        z0, z1 = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        scaled = z0.copy()
        scaled[2] *= 17.0
        assert abs(L.ortho_reg(z0, z1).item() - L.ortho_reg(scaled, z1).item()) < 1e-10

    def test_identity_perm_bitwise(self, gen):
        z0, z1 = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        assert L.perm_ortho_reg(z0, z1, (0, 1, 2)).item() == L.ortho_reg(z0, z1).item()

    def test_swap_kills_aligned_pair(self):
        z0, z1 = np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])
        assert L.ortho_reg(z0, z1).item() == pytest.approx(2.0)
        assert L.perm_ortho_reg(z0, z1, (1, 0)).item() == 0.0

    def test_range(self, gen):
        z0, z1 = gen.normal(size=(6, 4)), gen.normal(size=(6, 4))
        val = L.perm_ortho_reg(z0, z1, (3, 1, 0, 2)).item()
        assert 0.0 <= val <= 2 * 6 * 6

    def test_invalid_permutation(self, gen):
        with pytest.raises(ValueError):
            L.perm_ortho_reg(np.ones((2, 3)), np.ones((2, 3)), (0, 0, 1))
        with pytest.raises(ValueError):
            L.perm_ortho_reg(np.ones((2, 3)), np.ones((2, 3)), (1, 0))


class TestHessian:
    def test_zero_gradient(self):
        assert L.hessian_reg(np.zeros((3, 4)), L.SubembeddingLayout(2, 4)).item() == 0.0

    def test_rank_one_345(self):
        assert L.hessian_reg(np.array([[3.0, 4.0, 1.0, 0.0]]), L.SubembeddingLayout(2, 4)).item() == 5.0

    def test_double_sum_identity(self, gen):
        lay = L.SubembeddingLayout(2, 6)
        for _ in range(100):
            g = gen.normal(size=(1, 6))
            double = math.sqrt(sum((g[0, i] * g[0, j]) ** 2 for i in range(3) for j in range(3, 6)))
            assert abs(L.hessian_reg(g, lay).item() - double) < 1e-12

    def test_closed_form_matches_autodiff(self, gen):
        for _ in range(10):
            z = ad.Tensor(gen.normal(size=(8, 6)), requires_grad=True)
            batch = L.ContrastiveBatch.from_view_pairs(z, tau=0.25)
            g_auto = ad.backward(L.infomax(batch))[z]
            g_closed = L.infomax_grad_closed_form(batch).data
            assert np.max(np.abs(g_auto - g_closed)) < 1e-9

    def test_closed_form_label_mode(self, gen):
        z = ad.Tensor(gen.normal(size=(8, 4)), requires_grad=True)
        batch = L.ContrastiveBatch.from_labels(z, np.array([0, 1, 0, 2, 1, 0, 3, 3]), tau=0.5)
        g_auto = ad.backward(L.infomax(batch))[z]
        assert np.max(np.abs(g_auto - L.infomax_grad_closed_form(batch).data)) < 1e-9

    def test_closed_form_matches_finite_differences(self, gen):
        z = gen.normal(size=(6, 4))
        g_closed = L.infomax_grad_closed_form(L.ContrastiveBatch.from_view_pairs(z, 0.5)).data
        fd = ad.finite_diff_grad(lambda x: L.infomax(L.ContrastiveBatch.from_view_pairs(x, 0.5)).item(), z)
        assert ad.max_relative_error(g_closed, fd) < 1e-5

    def test_sum_of_anchor_gradients(self, gen):
        z = gen.normal(size=(4, 4))
        full = L.infomax_grad_closed_form(L.ContrastiveBatch.from_view_pairs(z)).data
        parts = np.zeros_like(full)
        for i in range(4):
            pos = np.zeros((4, 4))
            pos[i, (i + 2) % 4] = 1.0
            parts += L.infomax_grad_closed_form(L.ContrastiveBatch(z, pos, ~np.eye(4, dtype=bool))).data
        np.testing.assert_allclose(parts, full, atol=1e-12)


class TestTotalObjective:
    def test_lambda_zero(self, gen):
        batch = L.ContrastiveBatch.from_view_pairs(gen.normal(size=(6, 4)))
        terms = L.total_objective(batch, L.SubembeddingLayout(2, 4), "infomin", 0.0)
        assert terms.total == terms.sub_infomax

    @pytest.mark.parametrize("kind", L.REGULARIZERS)
    def test_total_identity_and_linearity(self, gen, kind):
        batch = L.ContrastiveBatch.from_view_pairs(gen.normal(size=(6, 4)))
        lay = L.SubembeddingLayout(2, 4)
        perm = (1, 0) if kind == "perm-ortho" else None
        hi = L.total_objective(batch, lay, kind, 0.1, perm)
        lo = L.total_objective(batch, lay, kind, 0.001, perm)
        assert abs(hi.total - (hi.sub_infomax + hi.lam * hi.regularizer)) <= 1e-12
        assert abs((hi.total - lo.total) - 0.099 * hi.regularizer) < 1e-9
        assert hi.sub_infomax == pytest.approx(sum(hi.slices), abs=1e-12)

    def test_perm_required(self):
        batch = L.ContrastiveBatch.from_view_pairs(np.eye(4))
        with pytest.raises(ValueError, match="permutation"):
            L.total_objective(batch, L.SubembeddingLayout(2, 4), "perm-ortho", 0.1)

    def test_negative_lambda(self):
        batch = L.ContrastiveBatch.from_view_pairs(np.eye(4))
        with pytest.raises(ValueError):
            L.total_objective(batch, L.SubembeddingLayout(2, 4), "none", -1.0)


class TestGradients:
    @pytest.mark.parametrize("kind", L.REGULARIZERS)
    def test_total_objective_vs_finite_differences(self, gen, kind):
        lay = L.SubembeddingLayout(2, 6)
        perm = (2, 0, 1) if kind == "perm-ortho" else None

        def value(x):
            return L.total_objective(L.ContrastiveBatch.from_view_pairs(ad.Tensor(x), 0.5), lay, kind, 0.3, perm)

        for _ in range(3):
            x = gen.normal(size=(6, 6))
            z = ad.Tensor(x, requires_grad=True)
            g = ad.backward(L.total_objective(L.ContrastiveBatch.from_view_pairs(z, 0.5), lay, kind, 0.3, perm).graph)[z]
            fd = ad.finite_diff_grad(lambda y: value(y).total, x)
            assert ad.max_relative_error(g, fd) < 1e-5


embeddings = st.integers(min_value=0, max_value=2**32 - 1).map(
    lambda s: np.random.default_rng(s).normal(size=(6, 4)) * np.random.default_rng(s + 1).uniform(0.1, 5.0)
)


class TestSignProperties:
    @settings(max_examples=40, deadline=None)
    @given(embeddings, st.floats(min_value=0.05, max_value=5.0))
    def test_signs(self, z, tau):
        batch = L.ContrastiveBatch.from_view_pairs(z, tau)
        lay = L.SubembeddingLayout(2, 4)
        assert L.infomax(batch).item() >= 0.0
        assert L.sub_infomax(batch, lay).item() >= 0.0
        assert L.infomin_reg(batch, lay).item() <= 0.0
        z0, z1 = lay.split(batch.z)
        assert L.ortho_reg(z0, z1).item() >= 0.0
        assert L.perm_ortho_reg(z0, z1, (1, 0)).item() >= 0.0
        assert L.hessian_reg(L.infomax_grad_closed_form(batch), lay).item() >= 0.0
