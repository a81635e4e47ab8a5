"""Training objectives: pixel-wise NT-Xent contrastive loss, L1
reconstruction, per-pixel cross-entropy, and the negative-cosine
stop-gradient baseline loss.

Each loss is expressed on autodiff Tensors so analytic gradients come from
the same graph used in training; plain numpy arrays are accepted and wrapped.
Brute-force reference implementations live in sscl.oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

ZERO_NORM_EPS = 1e-12

# count of zero-vector cosine lookups; a degenerate-embedding diagnostic
zero_vector_events = 0


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors; 0 for a zero vector (counted)."""
    global zero_vector_events
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= ZERO_NORM_EPS or nv <= ZERO_NORM_EPS:
        zero_vector_events += 1
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


@dataclass(frozen=True)
class ContrastBatch:
    """Projected embeddings of two channel views: N patches, F_p features,
    P pixels per patch."""

    z1: np.ndarray  # N x F_p x P
    z2: np.ndarray  # N x F_p x P
    temperature: float = 0.1

    def __post_init__(self):
        z1 = np.asarray(self.z1)
        z2 = np.asarray(self.z2)
        if z1.shape != z2.shape or z1.ndim != 3:
            raise ValueError("z1/z2 must both be N x F_p x P")
        if z1.shape[0] < 2:
            raise ValueError("no negatives: need N >= 2 patches")
        if not (np.isfinite(z1).all() and np.isfinite(z2).all()):
            raise ValueError("non-finite embeddings")
        if not 0.0 < self.temperature <= 10.0:
            raise ValueError("temperature must be in (0, 10]")


def _normalize_pixelwise(z: Tensor) -> Tensor:
    """L2-normalize (P, N, F) embeddings along F with a zero-norm guard."""
    sq = ad.tsum(ad.mul(z, z), axis=-1, keepdims=True)
    norm = ad.sqrt(ad.clip_min(sq, ZERO_NORM_EPS**2))
    return ad.mul(z, ad.power(norm, -1.0))


def nt_xent_pair(z1, z2, temperature: float,
                 include_positive_in_denominator: bool = False) -> Tensor:
    """One direction of the pixel-wise NT-Xent loss.

    z1, z2: (N, F_p, P) Tensors or arrays for views of the same N patches.
    For each pixel and anchor k, the positive is the other view of patch k at
    the same pixel; the negative set holds both views of every other patch l
    at that pixel (2(N-1) terms). Returns the mean over pixels x anchors.
    The positive pair is excluded from the denominator unless
    include_positive_in_denominator is set.
    """
    z1, z2 = as_tensor(z1), as_tensor(z2)
    n = z1.shape[0]
    if n < 2:
        raise ValueError("no negatives: need N >= 2 patches")
    tau = float(temperature)
    # (P, N, F)
    a = _normalize_pixelwise(ad.transpose(z1, (2, 0, 1)))
    b = _normalize_pixelwise(ad.transpose(z2, (2, 0, 1)))
    bt = ad.transpose(b, (0, 2, 1))
    at = ad.transpose(a, (0, 2, 1))
    s_ab = ad.matmul(a, bt)  # (P, N, N) cross-view sims
    s_aa = ad.matmul(a, at)  # within-view sims (diagonal is self, masked out)
    eye = np.eye(n, dtype=z1.dtype)
    off = 1.0 - eye
    pos = ad.tsum(ad.mul(s_ab, eye), axis=-1)  # (P, N)
    e_ab = ad.mul(ad.exp(ad.mul(s_ab, 1.0 / tau)), off)
    e_aa = ad.mul(ad.exp(ad.mul(s_aa, 1.0 / tau)), off)
    denom = ad.add(ad.tsum(e_ab, axis=-1), ad.tsum(e_aa, axis=-1))
    if include_positive_in_denominator:
        denom = ad.add(denom, ad.exp(ad.mul(pos, 1.0 / tau)))
    losses = ad.add(ad.log(denom), ad.mul(pos, -1.0 / tau))
    return ad.tmean(losses)


def nt_xent(batch: ContrastBatch,
            include_positive_in_denominator: bool = False) -> float:
    """Mean pixel-wise NT-Xent in the z1 -> z2 direction."""
    return nt_xent_pair(
        batch.z1, batch.z2, batch.temperature, include_positive_in_denominator
    ).item()


def nt_xent_symmetric(z1, z2, temperature: float,
                      include_positive_in_denominator: bool = False) -> Tensor:
    """The training loss: both contrast directions summed."""
    return ad.add(
        nt_xent_pair(z1, z2, temperature, include_positive_in_denominator),
        nt_xent_pair(z2, z1, temperature, include_positive_in_denominator),
    )


def l1_recon(pred, target) -> Tensor:
    """Mean absolute difference; target is the clean, uncorrupted image."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return ad.tmean(ad.absolute(ad.add(pred, ad.mul(target, -1.0))))


def pixel_ce(logits, labels: np.ndarray, ignore: int = 255) -> Tensor:
    """Mean cross-entropy over non-ignored pixels of K x H x W logits
    (an N x K x H x W batch is also accepted)."""
    logits = as_tensor(logits)
    if logits.ndim == 3:
        logits = ad.reshape(logits, (1,) + logits.shape)
        labels = np.asarray(labels)[None]
    n, k, h, w = logits.shape
    labels = np.asarray(labels).reshape(n, h, w)
    flat = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (n * h * w, k))
    lab = labels.reshape(-1)
    mask = lab != ignore
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty loss support: all pixels ignored")
    safe = np.where(mask, lab, 0).astype(np.int64)
    onehot = np.zeros((n * h * w, k), dtype=flat.dtype)
    onehot[np.arange(n * h * w), safe] = 1.0
    shift = np.max(flat.data, axis=1, keepdims=True)  # detached stabilizer
    ex = ad.exp(ad.add(flat, -shift))
    log_z = ad.add(ad.log(ad.tsum(ex, axis=1)), shift[:, 0])
    picked = ad.tsum(ad.mul(flat, onehot), axis=1)
    per_pixel = ad.add(log_z, ad.mul(picked, -1.0))
    weights = mask.astype(flat.dtype) / count
    return ad.tsum(ad.mul(per_pixel, weights))


def _masked_mean_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Mean cosine similarity along the feature axis (axis 1) of NCHW maps."""
    pn = ad.mul(p, ad.power(ad.sqrt(ad.clip_min(ad.tsum(ad.mul(p, p), axis=1, keepdims=True), ZERO_NORM_EPS**2)), -1.0))
    zn = ad.mul(z, ad.power(ad.sqrt(ad.clip_min(ad.tsum(ad.mul(z, z), axis=1, keepdims=True), ZERO_NORM_EPS**2)), -1.0))
    return ad.tmean(ad.tsum(ad.mul(pn, zn), axis=1))


def simsiam_loss(p1, z2, p2, z1) -> Tensor:
    """Symmetric negative cosine with stop-gradient on the z arguments,
    evaluated per pixel then averaged. Inputs are (F,) vectors or N x F x ...
    maps; the feature axis is axis 1 (or axis 0 for bare vectors)."""
    ts = []
    for v in (p1, z2, p2, z1):
        t = as_tensor(v)
        if t.ndim == 1:
            t = ad.reshape(t, (1, t.shape[0], 1))
        ts.append(t)
    p1t, z2t, p2t, z1t = ts
    if p1t.shape != z2t.shape or p2t.shape != z1t.shape:
        raise ValueError("prediction/projection shape mismatch")
    c1 = _masked_mean_cosine(p1t, z2t.detach())
    c2 = _masked_mean_cosine(p2t, z1t.detach())
    return ad.add(ad.mul(c1, -0.5), ad.mul(c2, -0.5))
