import math
import warnings

import numpy as np
import pytest

from cscct import autodiff as ad
from cscct.autodiff import Tensor, ZeroVectorWarning
from cscct.losses import (
    BatchView,
    LossError,
    LossWeights,
    combined_loss,
    cross_entropy_loss,
    csc_loss,
    ct_loss,
    logit_distillation_loss,
    similarity_distribution,
)

from gradcheck import max_rel_err


def cos(a, b):
    a, b = list(a), list(b)
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def csc_oracle(cur, prev, labels):
    k = len(labels)
    total = 0.0
    for i in range(k):
        for j in range(k):
            total += (1 - cos(cur[i], prev[j])) * (1 if labels[i] == labels[j] else -1)
    return total / k**2


def softmax_list(v, t):
    m = max(v)
    e = [math.exp((x - m) / t) for x in v]
    s = sum(e)
    return [x / s for x in e]


def ct_oracle(cur, prev, is_new, t):
    p_rows = [i for i, n in enumerate(is_new) if n]
    q_rows = [i for i, n in enumerate(is_new) if not n]
    total = 0.0
    for i in p_rows:
        hc = softmax_list([cos(cur[i], cur[j]) for j in q_rows], t)
        hp = softmax_list([cos(prev[i], prev[j]) for j in q_rows], t)
        total += sum(a * math.log(a / b) for a, b in zip(hc, hp))
    return total / len(p_rows)


def random_batch(rng, k=6, d=5, n_classes=3, with_memory=True):
    labels = rng.integers(0, n_classes, size=k)
    is_new = rng.random(k) < 0.5
    if with_memory and k >= 3:
        is_new[:2] = [True, False]
        is_new[2] = False
    return rng.normal(size=(k, d)), rng.normal(size=(k, d)), labels, is_new


def view(cur, prev, labels, is_new=None):
    is_new = np.ones(len(labels), bool) if is_new is None else is_new
    cur_t = cur if isinstance(cur, Tensor) else Tensor(cur)
    prev_t = None if prev is None else (prev if isinstance(prev, Tensor) else Tensor(prev))
    return BatchView(labels, cur_t, prev_t, is_new)


class TestCsc:
    def test_aligned_single(self):
        assert csc_loss(view(np.array([[0.3, 0.4]]), np.array([[0.3, 0.4]]), [0])).item() == 0.0

    def test_orthogonal_single(self):
        assert csc_loss(view(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), [0])).item() == 1.0

    def test_two_by_two_basis(self):
        cur = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = [0, 1]
        expected = csc_oracle(cur, cur, labels)
        assert expected == -0.5
        assert csc_loss(view(cur, cur.copy(), labels)).item() == pytest.approx(expected, abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cur, prev, labels, _ = random_batch(rng)
            got = csc_loss(view(cur, prev, labels)).item()
            assert got == pytest.approx(csc_oracle(cur, prev, labels), abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cur, prev, labels, _ = random_batch(rng, k=int(rng.integers(1, 7)))
            assert -2 <= csc_loss(view(cur, prev, labels)).item() <= 2

    def test_previous_scale_invariance(self):
        rng = np.random.default_rng(2)
        cur, prev, labels, _ = random_batch(rng)
        a = csc_loss(view(cur, prev, labels)).item()
        b = csc_loss(view(cur, 7.3 * prev, labels)).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_needs_previous(self):
        with pytest.raises(LossError):
            csc_loss(view(np.ones((1, 2)), None, [0]))

    def test_no_gradient_into_previous(self):
        cur = Tensor(np.random.default_rng(3).normal(size=(3, 4)), requires_grad=True)
        prev = Tensor(np.random.default_rng(4).normal(size=(3, 4)), requires_grad=True)
        ad.backward(csc_loss(view(cur, prev, [0, 1, 0])))
        assert cur.grad is not None
        assert prev.grad is None

    def test_pairwise_gradient_signs(self):
        """Descending one pair's term raises same-class and lowers cross-class cosine."""
        rng = np.random.default_rng(5)
        cur, prev, labels, _ = random_batch(rng, k=4, d=4, n_classes=2)
        labels = np.array([0, 0, 1, 1])
        for i in range(4):
            for j in range(4):
                only_j = np.zeros_like(prev)
                only_j[j] = prev[j]  # zero rows have zero cosine gradient, isolating pair (i, j)
                x = Tensor(cur.copy(), requires_grad=True)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ZeroVectorWarning)
                    ad.backward(csc_loss(view(x, only_j, labels)))
                step = -x.grad[i]
                a, b = cur[i], prev[j]
                na = np.linalg.norm(a)
                dcos = b / (na * np.linalg.norm(b)) - (a @ b) * a / (na**3 * np.linalg.norm(b))
                sign = 1 if labels[i] == labels[j] else -1
                assert np.sign(dcos @ step) == sign

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        cur, prev, labels, is_new = random_batch(rng)
        perm = rng.permutation(len(labels))
        a = csc_loss(view(cur, prev, labels)).item()
        b = csc_loss(view(cur[perm], prev[perm], labels[perm])).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestSimilarityDistribution:
    def test_equal_cosines_uniform(self):
        h = similarity_distribution(Tensor([1.0, 0.0]), [Tensor([0.0, 1.0]), Tensor([0.0, -1.0])], 0.5)
        np.testing.assert_allclose(h.data, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        h = similarity_distribution(Tensor([1.0, 0.0]), [Tensor([2.0, 0.0]), Tensor([0.0, 3.0])], 1.0)
        e = math.e
        np.testing.assert_allclose(h.data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
        np.testing.assert_allclose(h.data, [0.7311, 0.2689], atol=1e-4)

    def test_large_temperature(self):
        refs = np.random.default_rng(7).normal(size=(4, 3))
        h = similarity_distribution(Tensor([1.0, 2.0, 3.0]), Tensor(refs), 1e6)
        np.testing.assert_allclose(h.data, 0.25, atol=1e-6)


class TestCt:
    def test_identical_spaces(self):
        rng = np.random.default_rng(8)
        cur, _, labels, is_new = random_batch(rng)
        assert ct_loss(view(cur, cur.copy(), labels, is_new), 2.0).item() == 0.0

    def test_non_negative(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            cur, prev, labels, is_new = random_batch(rng)
            assert ct_loss(view(cur, prev, labels, is_new), float(rng.uniform(0.1, 5))).item() >= -1e-12

    def test_hand_set_p1_q2(self):
        cur = np.array([[1.0, 0.0], [0.6, 0.8], [-1.0, 1.0]])
        prev = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 0.2]])
        is_new = np.array([True, False, False])
        expected = ct_oracle(cur, prev, is_new, 0.5)
        got = ct_loss(view(cur, prev, [2, 0, 1], is_new), 0.5).item()
        assert got == pytest.approx(expected, abs=1e-10)
        assert expected > 0.01

    def test_matches_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            cur, prev, labels, is_new = random_batch(rng)
            got = ct_loss(view(cur, prev, labels, is_new), 1.5).item()
            assert got == pytest.approx(ct_oracle(cur, prev, is_new, 1.5), abs=1e-12)

    def test_too_few_memory_samples(self):
        cur = np.eye(3)
        with pytest.warns(RuntimeWarning):
            assert ct_loss(view(cur, cur[::-1].copy(), [0, 1, 2], np.array([True, True, False])), 1.0).item() == 0.0

    def test_no_current_samples(self):
        cur = np.eye(3)
        assert ct_loss(view(cur, cur, [0, 1, 2], np.zeros(3, bool)), 1.0).item() == 0.0

    def test_gradient_reaches_memory_rows_unless_detached(self):
        rng = np.random.default_rng(11)
        cur, prev, labels, is_new = random_batch(rng)
        for detach, expect in ((False, True), (True, False)):
            x = Tensor(cur, requires_grad=True)
            ad.backward(ct_loss(view(x, prev, labels, is_new), 1.0, detach_q=detach))
            q_grad = x.grad[~is_new]
            assert bool(np.any(q_grad != 0)) is expect

    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        cur, prev, labels, is_new = random_batch(rng)
        perm = rng.permutation(len(labels))
        a = ct_loss(view(cur, prev, labels, is_new), 2.0).item()
        b = ct_loss(view(cur[perm], prev[perm], labels[perm], is_new[perm]), 2.0).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy_loss(Tensor(np.zeros((3, 5))), [0, 2, 4]).item() == pytest.approx(math.log(5), abs=1e-15)

    def test_saturated(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 50.0
        assert cross_entropy_loss(Tensor(logits), [1, 2]).item() < 1e-20

    def test_direct_recomputation(self):
        rng = np.random.default_rng(13)
        z = rng.normal(size=(4, 3))
        y = [0, 2, 1, 2]
        expected = -sum(z[i][y[i]] - math.log(sum(math.exp(v) for v in z[i])) for i in range(4)) / 4
        assert cross_entropy_loss(Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LossError):
            cross_entropy_loss(Tensor(np.zeros((1, 2))), [2])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(14)
        z, y = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
        perm = rng.permutation(6)
        assert cross_entropy_loss(Tensor(z), y).item() == pytest.approx(
            cross_entropy_loss(Tensor(z[perm]), y[perm]).item(), abs=1e-12)


class TestLogitDistillation:
    def test_identical(self):
        z = Tensor(np.random.default_rng(15).normal(size=(3, 4)))
        assert logit_distillation_loss(z, z, 2.0).item() == pytest.approx(0.0, abs=1e-15)

    def test_closed_form(self):
        got = logit_distillation_loss(Tensor([[0.0, 0.0]]), Tensor([[math.log(3), 0.0]]), 1.0).item()
        expected = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
        assert got == pytest.approx(expected, abs=1e-15)
        assert got == pytest.approx(0.13081, abs=1e-5)

    def test_non_negative(self):
        rng = np.random.default_rng(16)
        for _ in range(100):
            a, b = rng.normal(size=(3, 4)) * 3, rng.normal(size=(3, 4)) * 3
            assert logit_distillation_loss(Tensor(a), Tensor(b), float(rng.uniform(0.5, 4))).item() >= -1e-12

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            logit_distillation_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestCombined:
    def setup_batch(self, seed=17):
        rng = np.random.default_rng(seed)
        cur, prev, labels, is_new = random_batch(rng, k=6, d=4, n_classes=3)
        logits = rng.normal(size=(6, 5))
        prev_logits = rng.normal(size=(6, 3))
        return cur, prev, labels, is_new, logits, prev_logits

    def test_zero_weights_equal_cross_entropy(self):
        cur, prev, labels, is_new, logits, prev_logits = self.setup_batch()
        w = LossWeights(alpha=0.0, beta=0.0, base_kd_weight=0.0)
        out = combined_loss(view(cur, prev, labels, is_new), Tensor(logits), Tensor(prev_logits), w, "incremental")
        assert out.total.item() == cross_entropy_loss(Tensor(logits), labels).item()

    def test_first_task_only_cross_entropy(self):
        cur, _, labels, is_new, logits, _ = self.setup_batch()
        out = combined_loss(view(cur, None, labels, is_new), Tensor(logits), None, LossWeights(), "first_task")
        assert out.terms["cross_space_clustering"] == 0.0
        assert out.terms["controlled_transfer"] == 0.0
        assert out.terms["logit_distillation"] == 0.0
        assert out.total.item() == out.terms["cross_entropy"]

    def test_sum_of_independent_terms(self):
        cur, prev, labels, is_new, logits, prev_logits = self.setup_batch()
        w = LossWeights(alpha=1.0, beta=1.0, temperature=2.0, base_kd_weight=1.0, kd_temperature=2.0)
        out = combined_loss(view(cur, prev, labels, is_new), Tensor(logits), Tensor(prev_logits), w, "incremental")
        ce = -sum(logits[i][labels[i]] - math.log(sum(math.exp(v) for v in logits[i])) for i in range(6)) / 6
        kd = 0.0
        for i in range(6):
            p = softmax_list(prev_logits[i], 2.0)
            q = softmax_list(logits[i][:3], 2.0)
            kd += sum(a * math.log(a / b) for a, b in zip(p, q))
        kd = 4.0 * kd / 6
        expected = ce + kd + csc_oracle(cur, prev, labels) + ct_oracle(cur, prev, is_new, 2.0)
        assert out.total.item() == pytest.approx(expected, abs=1e-12)
        assert out.total.item() == pytest.approx(sum(out.weighted.values()), abs=1e-12)

    def test_incremental_requires_previous(self):
        cur, _, labels, is_new, logits, _ = self.setup_batch()
        with pytest.raises(LossError):
            combined_loss(view(cur, None, labels, is_new), Tensor(logits), None, LossWeights(), "incremental")


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    k, d = int(rng.integers(3, 7)), int(rng.integers(2, 9))
    cur, prev, labels, is_new = random_batch(rng, k=k, d=d)
    prev_t = Tensor(prev)
    assert max_rel_err(lambda c: csc_loss(view(c, prev_t, labels)), [cur]) < 1e-5
    assert max_rel_err(lambda c: ct_loss(view(c, prev_t, labels, is_new), 1.5), [cur]) < 1e-5
    z, zp = rng.normal(size=(k, 4)), rng.normal(size=(k, 4))
    assert max_rel_err(lambda a: cross_entropy_loss(a, labels), [z]) < 1e-5
    assert max_rel_err(lambda a: logit_distillation_loss(a, Tensor(zp), 2.0), [z]) < 1e-5
