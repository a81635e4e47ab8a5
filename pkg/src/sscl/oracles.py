"""Brute-force reference implementations of every loss, written as plain
double loops over the mathematical definitions. These are deliberately slow
and share no code with sscl.losses; the self-test and the test suite compare
the two on random instances.
"""

from __future__ import annotations

import math

import numpy as np


def cosine_sim_ref(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = math.sqrt(float(sum(x * x for x in u.ravel())))
    nv = math.sqrt(float(sum(x * x for x in v.ravel())))
    if nu <= 1e-12 or nv <= 1e-12:
        return 0.0
    return float(sum(a * b for a, b in zip(u.ravel(), v.ravel()))) / (nu * nv)


def nt_xent_ref(z1: np.ndarray, z2: np.ndarray, tau: float,
                include_positive: bool = False) -> float:
    """Naive pixel-by-pixel, anchor-by-anchor evaluation of the contrastive
    loss in the z1 -> z2 direction; mean over pixels x anchors."""
    z1 = np.asarray(z1, dtype=np.float64)  # N x F x P
    z2 = np.asarray(z2, dtype=np.float64)
    n, _, p = z1.shape
    total = 0.0
    for pix in range(p):
        for k in range(n):
            anchor = z1[k, :, pix]
            pos = cosine_sim_ref(anchor, z2[k, :, pix])
            denom = 0.0
            for l in range(n):
                if l == k:
                    continue
                denom += math.exp(cosine_sim_ref(anchor, z2[l, :, pix]) / tau)
                denom += math.exp(cosine_sim_ref(anchor, z1[l, :, pix]) / tau)
            if include_positive:
                denom += math.exp(pos / tau)
            total += -math.log(math.exp(pos / tau) / denom)
    return total / (n * p)


def l1_recon_ref(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    total = 0.0
    for a, b in zip(pred.ravel(), target.ravel()):
        total += abs(a - b)
    return total / pred.size


def pixel_ce_ref(logits: np.ndarray, labels: np.ndarray, ignore: int = 255) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    k, h, w = logits.shape
    total = 0.0
    count = 0
    for y in range(h):
        for x in range(w):
            lab = int(labels[y, x])
            if lab == ignore:
                continue
            row = logits[:, y, x]
            m = max(row)
            z = sum(math.exp(v - m) for v in row)
            total += -(row[lab] - m - math.log(z))
            count += 1
    if count == 0:
        raise ValueError("empty loss support")
    return total / count


def simsiam_loss_ref(p1, z2, p2, z1) -> float:
    """Negative cosine baseline on (F,) vectors or N x F x ... maps."""
    def mean_cos(p, z):
        p = np.asarray(p, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if p.ndim == 1:
            return cosine_sim_ref(p, z)
        n = p.shape[0]
        rest = p.reshape(n, p.shape[1], -1)
        restz = z.reshape(n, z.shape[1], -1)
        total = 0.0
        cnt = 0
        for b in range(n):
            for pix in range(rest.shape[2]):
                total += cosine_sim_ref(rest[b, :, pix], restz[b, :, pix])
                cnt += 1
        return total / cnt

    return -0.5 * mean_cos(p1, z2) - 0.5 * mean_cos(p2, z1)


def confusion_ref(pred: np.ndarray, truth: np.ndarray, k: int,
                  ignore: int = 255) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truth.ravel(), pred.ravel()):
        if t == ignore:
            continue
        cm[int(t), int(p)] += 1
    return cm
