"""Built-in correctness suite: loss oracles and finite-difference gradient
checks, runnable from a fresh checkout via ``sscl selftest``.

Each check returns (name, passed, detail); run_selftest prints one line per
check and returns the number of failures. The same oracles back the test
suite — they share no code with the production losses.
"""

from __future__ import annotations

import numpy as np

from . import losses, oracles
from .autodiff import Tensor


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(b))


def check_loss_oracles(n_instances: int = 100, seed: int = 0):
    """nt_xent, l1_recon, pixel_ce and simsiam_loss against brute-force
    references on random small instances (float64)."""
    rng = np.random.default_rng(seed)
    worst = {"nt_xent": 0.0, "l1_recon": 0.0, "pixel_ce": 0.0, "simsiam": 0.0}
    for _ in range(n_instances):
        n = int(rng.integers(2, 9))
        p = int(rng.integers(1, 17))
        f = int(rng.integers(2, 17))
        tau = float(rng.uniform(0.05, 1.0))
        z1 = rng.standard_normal((n, f, p))
        z2 = rng.standard_normal((n, f, p))
        got = losses.nt_xent_pair(Tensor(z1), Tensor(z2), tau).item()
        want = oracles.nt_xent_ref(z1, z2, tau)
        worst["nt_xent"] = max(worst["nt_xent"], _rel(got, want))

        a, b = rng.standard_normal((n, f, p)), rng.standard_normal((n, f, p))
        worst["l1_recon"] = max(worst["l1_recon"], _rel(
            losses.l1_recon(Tensor(a), Tensor(b)).item(),
            oracles.l1_recon_ref(a, b)))

        k = int(rng.integers(2, 7))
        logits = rng.standard_normal((k, 5, 5))
        labels = rng.integers(0, k, size=(5, 5)).astype(np.uint8)
        labels[rng.random((5, 5)) < 0.2] = 255
        if (labels != 255).any():
            worst["pixel_ce"] = max(worst["pixel_ce"], _rel(
                losses.pixel_ce(Tensor(logits), labels).item(),
                oracles.pixel_ce_ref(logits, labels)))

        p1, z2s = rng.standard_normal((n, f, p)), rng.standard_normal((n, f, p))
        p2, z1s = rng.standard_normal((n, f, p)), rng.standard_normal((n, f, p))
        worst["simsiam"] = max(worst["simsiam"], _rel(
            losses.simsiam_loss(Tensor(p1), Tensor(z2s), Tensor(p2), Tensor(z1s)).item(),
            oracles.simsiam_loss_ref(p1, z2s, p2, z1s)))
    tol = 1e-6
    return [(f"oracle:{k}", v <= tol, f"max rel err {v:.3e} (tol {tol:g})")
            for k, v in worst.items()]


def _fd_check(make_loss, arrays: dict[str, np.ndarray], eps: float = 1e-5):
    """Central finite differences against autodiff for float64 inputs.
    Returns the max relative error over a sample of coordinates."""
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = make_loss(tensors)
    loss.backward()
    worst = 0.0
    rng = np.random.default_rng(12345)
    for k, v in arrays.items():
        grad = tensors[k].grad
        if grad is None:
            grad = np.zeros_like(v)
        flat = v.ravel()
        n_probe = min(24, flat.size)
        for idx in rng.choice(flat.size, size=n_probe, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = make_loss({kk: Tensor(vv.copy()) for kk, vv in arrays.items()}).item()
            flat[idx] = orig - eps
            dn = make_loss({kk: Tensor(vv.copy()) for kk, vv in arrays.items()}).item()
            flat[idx] = orig
            fd = (up - dn) / (2 * eps)
            an = grad.ravel()[idx]
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    return worst


def check_loss_gradients(seed: int = 1):
    rng = np.random.default_rng(seed)
    n, f, p = 4, 8, 6
    results = []

    z1 = rng.standard_normal((n, f, p))
    z2 = rng.standard_normal((n, f, p))
    err = _fd_check(lambda t: losses.nt_xent_pair(t["z1"], t["z2"], 0.3),
                    {"z1": z1, "z2": z2})
    results.append(("grad:nt_xent", err <= 1e-4, f"max rel err {err:.3e}"))

    a, b = rng.standard_normal((n, f, p)), rng.standard_normal((n, f, p))
    err = _fd_check(lambda t: losses.l1_recon(t["a"], t["b"]), {"a": a, "b": b})
    results.append(("grad:l1_recon", err <= 1e-4, f"max rel err {err:.3e}"))

    k = 5
    logits = rng.standard_normal((k, 6, 6))
    labels = rng.integers(0, k, size=(6, 6)).astype(np.uint8)
    labels[0, 0] = 255
    err = _fd_check(lambda t: losses.pixel_ce(t["logits"], labels), {"logits": logits})
    results.append(("grad:pixel_ce", err <= 1e-4, f"max rel err {err:.3e}"))

    p1, z2s = rng.standard_normal((n, f, p)), rng.standard_normal((n, f, p))
    p2, z1s = rng.standard_normal((n, f, p)), rng.standard_normal((n, f, p))
    err = _fd_check(
        lambda t: losses.simsiam_loss(t["p1"], Tensor(z2s), t["p2"], Tensor(z1s)),
        {"p1": p1, "p2": p2})
    results.append(("grad:simsiam_predictor", err <= 1e-4, f"max rel err {err:.3e}"))

    tz1 = Tensor(z1s.copy(), requires_grad=True)
    tz2 = Tensor(z2s.copy(), requires_grad=True)
    loss = losses.simsiam_loss(Tensor(p1, requires_grad=True), tz2,
                               Tensor(p2, requires_grad=True), tz1)
    loss.backward()
    stopped = (tz1.grad is None or not np.any(tz1.grad)) and \
              (tz2.grad is None or not np.any(tz2.grad))
    results.append(("grad:simsiam_stopgrad", stopped,
                    "gradient through stop-gradient arguments is exactly zero"
                    if stopped else "nonzero gradient leaked through stop-gradient"))
    return results


def check_identity_cases():
    """All-identical embeddings give log(2(N-1)) per anchor; a global
    rescale leaves the loss unchanged (cosine scale invariance)."""
    results = []
    rng = np.random.default_rng(2)
    for n in (2, 4, 8):
        v = rng.standard_normal((1, 6, 1))
        z = np.broadcast_to(v, (n, 6, 3)).copy()
        got = losses.nt_xent_pair(Tensor(z), Tensor(z), 0.5).item()
        want = np.log(2 * (n - 1))
        ok = abs(got - want) <= 1e-9
        results.append((f"identity:N={n}", ok,
                        f"loss {got:.12f} vs log(2(N-1)) {want:.12f}"))
    z1 = rng.standard_normal((5, 7, 4))
    z2 = rng.standard_normal((5, 7, 4))
    base = losses.nt_xent_pair(Tensor(z1), Tensor(z2), 0.2).item()
    scaled = losses.nt_xent_pair(Tensor(3.7 * z1), Tensor(3.7 * z2), 0.2).item()
    ok = abs(base - scaled) <= 1e-6
    results.append(("identity:rescale_3.7", ok,
                    f"|{base:.9f} - {scaled:.9f}| = {abs(base - scaled):.2e}"))
    return results


def run_selftest(verbose: bool = True) -> int:
    checks = (check_loss_oracles() + check_loss_gradients()
              + check_identity_cases())
    failures = 0
    for name, ok, detail in checks:
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<28} {detail}")
        failures += not ok
    if verbose:
        print(f"{len(checks) - failures}/{len(checks)} checks passed")
    return failures
