"""Loss functions against brute-force references, identity cases, and
finite-difference gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscl import losses, oracles
from sscl.autodiff import Tensor
from sscl.selftest import _fd_check


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


class TestCosine:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.standard_normal(7), rng.standard_normal(7)
            assert _rel(losses.cosine_sim(a, b), oracles.cosine_sim_ref(a, b)) < 1e-12

    def test_zero_vector_is_zero_and_counted(self):
        before = losses.zero_vector_events
        assert losses.cosine_sim(np.zeros(4), np.ones(4)) == 0.0
        assert losses.zero_vector_events == before + 1

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.standard_normal(5), rng.standard_normal(5)
            assert -1.0 - 1e-12 <= losses.cosine_sim(a, b) <= 1.0 + 1e-12


class TestNtXent:
    def test_oracle_agreement(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, f, p = int(rng.integers(2, 9)), int(rng.integers(2, 17)), int(rng.integers(1, 17))
            tau = float(rng.uniform(0.05, 1.0))
            z1 = rng.standard_normal((n, f, p))
            z2 = rng.standard_normal((n, f, p))
            got = losses.nt_xent_pair(Tensor(z1), Tensor(z2), tau).item()
            assert _rel(got, oracles.nt_xent_ref(z1, z2, tau)) <= 1e-6

    @pytest.mark.parametrize("n", [2, 3, 4, 8])
    def test_identity_embeddings(self, n):
        rng = np.random.default_rng(n)
        v = rng.standard_normal((1, 5, 1))
        z = np.broadcast_to(v, (n, 5, 4)).copy()
        got = losses.nt_xent_pair(Tensor(z), Tensor(z), 0.5).item()
        assert abs(got - np.log(2 * (n - 1))) <= 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        z1, z2 = rng.standard_normal((5, 6, 3)), rng.standard_normal((5, 6, 3))
        a = losses.nt_xent_pair(Tensor(z1), Tensor(z2), 0.3).item()
        b = losses.nt_xent_pair(Tensor(3.7 * z1), Tensor(3.7 * z2), 0.3).item()
        assert abs(a - b) <= 1e-6

    def test_monotone_in_positive_similarity(self):
        # pulling the positive pair together (negatives fixed) lowers the loss
        rng = np.random.default_rng(4)
        z1 = rng.standard_normal((3, 8, 2))
        z2 = rng.standard_normal((3, 8, 2))
        base = losses.nt_xent_pair(Tensor(z1), Tensor(z2), 0.4).item()
        z2_closer = z2.copy()
        z2_closer[0] = 0.2 * z2[0] + 0.8 * z1[0]
        closer = losses.nt_xent_pair(Tensor(z1), Tensor(z2_closer), 0.4).item()
        assert closer < base

    def test_positive_in_denominator_flag(self):
        rng = np.random.default_rng(5)
        z1, z2 = rng.standard_normal((4, 6, 3)), rng.standard_normal((4, 6, 3))
        excl = losses.nt_xent_pair(Tensor(z1), Tensor(z2), 0.3, False).item()
        incl = losses.nt_xent_pair(Tensor(z1), Tensor(z2), 0.3, True).item()
        assert incl > excl  # a strictly larger denominator

    def test_gradient(self):
        rng = np.random.default_rng(6)
        z1 = rng.standard_normal((4, 8, 6))
        z2 = rng.standard_normal((4, 8, 6))
        err = _fd_check(lambda t: losses.nt_xent_pair(t["z1"], t["z2"], 0.3),
                        {"z1": z1, "z2": z2})
        assert err <= 1e-4

    @given(st.integers(2, 6), st.integers(2, 8), st.integers(1, 6),
           st.floats(0.05, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_loss_is_symmetric(self, n, f, p, tau):
        rng = np.random.default_rng(n * 1000 + f * 10 + p)
        z1 = rng.standard_normal((n, f, p))
        z2 = rng.standard_normal((n, f, p))
        a = losses.nt_xent_symmetric(Tensor(z1), Tensor(z2), tau).item()
        b = losses.nt_xent_symmetric(Tensor(z2), Tensor(z1), tau).item()
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a))

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            losses.ContrastBatch(np.zeros((1, 4, 2)), np.zeros((1, 4, 2)), 0.5)
        with pytest.raises(ValueError):
            losses.ContrastBatch(np.zeros((3, 4, 2)), np.zeros((3, 4, 2)), 0.0)
        bad = np.zeros((3, 4, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            losses.ContrastBatch(bad, np.zeros((3, 4, 2)), 0.5)


class TestL1Recon:
    def test_oracle_agreement(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), 4, 4)
            a, b = rng.standard_normal(shape), rng.standard_normal(shape)
            got = losses.l1_recon(Tensor(a), Tensor(b)).item()
            assert _rel(got, oracles.l1_recon_ref(a, b)) <= 1e-6

    def test_identity_is_zero(self):
        a = np.random.default_rng(8).standard_normal((2, 3, 4, 4))
        assert losses.l1_recon(Tensor(a), Tensor(a.copy())).item() == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
        err = _fd_check(lambda t: losses.l1_recon(t["a"], t["b"]), {"a": a, "b": b})
        assert err <= 1e-4


class TestPixelCE:
    def test_oracle_agreement(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            k = int(rng.integers(2, 7))
            logits = rng.standard_normal((k, 6, 6))
            labels = rng.integers(0, k, size=(6, 6)).astype(np.uint8)
            labels[rng.random((6, 6)) < 0.25] = 255
            if not (labels != 255).any():
                continue
            got = losses.pixel_ce(Tensor(logits), labels).item()
            assert _rel(got, oracles.pixel_ce_ref(logits, labels)) <= 1e-6

    def test_all_ignored_raises(self):
        logits = np.zeros((3, 2, 2))
        labels = np.full((2, 2), 255, dtype=np.uint8)
        with pytest.raises(ValueError, match="ignored"):
            losses.pixel_ce(Tensor(logits), labels)

    def test_shift_invariance(self):
        # adding a constant to every class logit of a pixel changes nothing
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((4, 3, 3))
        labels = rng.integers(0, 4, size=(3, 3)).astype(np.uint8)
        a = losses.pixel_ce(Tensor(logits), labels).item()
        b = losses.pixel_ce(Tensor(logits + 7.5), labels).item()
        assert abs(a - b) <= 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((5, 4, 4))
        labels = rng.integers(0, 5, size=(4, 4)).astype(np.uint8)
        labels[0, 0] = 255
        err = _fd_check(lambda t: losses.pixel_ce(t["l"], labels), {"l": logits})
        assert err <= 1e-4


class TestSimsiam:
    def test_oracle_agreement(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            n, f, p = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(1, 9))
            args = [rng.standard_normal((n, f, p)) for _ in range(4)]
            got = losses.simsiam_loss(*map(Tensor, args)).item()
            assert _rel(got, oracles.simsiam_loss_ref(*args)) <= 1e-6

    def test_perfect_alignment_is_minus_one(self):
        rng = np.random.default_rng(14)
        z = rng.standard_normal((2, 5, 3))
        got = losses.simsiam_loss(Tensor(2 * z), Tensor(z), Tensor(3 * z), Tensor(z)).item()
        assert abs(got - (-1.0)) <= 1e-9

    def test_stop_gradient_is_exactly_zero(self):
        rng = np.random.default_rng(15)
        p1 = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        p2 = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        z1 = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        z2 = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        losses.simsiam_loss(p1, z2, p2, z1).backward()
        assert z1.grad is None or not np.any(z1.grad)
        assert z2.grad is None or not np.any(z2.grad)
        assert p1.grad is not None and np.any(p1.grad)

    def test_predictor_gradient(self):
        rng = np.random.default_rng(16)
        p1, z2 = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3))
        p2, z1 = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3))
        err = _fd_check(
            lambda t: losses.simsiam_loss(t["p1"], Tensor(z2), t["p2"], Tensor(z1)),
            {"p1": p1, "p2": p2})
        assert err <= 1e-4
