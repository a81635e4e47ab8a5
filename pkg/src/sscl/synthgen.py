"""Synthetic multichannel scene generator.

Scenes are seeded-Voronoi label maps rendered through a per-class spectral
signature table. Optical-like channels get additive Gaussian noise, SAR-like
channels get multiplicative L-look gamma speckle, and reduced-resolution
channels are box-downsampled then nearest-neighbor upsampled. Everything is
a pure function of (config, seed): per-sample RNG streams are derived from
(seed, sample_index) so generation is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ChannelMeta,
    ChannelStack,
    ClassMap,
    DatasetManifest,
    LabeledSample,
    Modality,
    save_sample,
)

DEFAULT_CLASS_NAMES = (
    "forest", "shrubland", "grassland", "wetland",
    "cropland", "urban", "barren", "water",
)


def default_channel_meta() -> tuple[ChannelMeta, ...]:
    """13 optical-like bands at mixed native resolutions plus 2 SAR-like
    polarizations, mirroring a Sentinel-2/Sentinel-1 fusion stack."""
    factors = [1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 6, 6, 6]
    optical = tuple(
        ChannelMeta(f"opt{i:02d}", Modality.OPTICAL_LIKE, k)
        for i, k in enumerate(factors)
    )
    sar = (
        ChannelMeta("sar_vv", Modality.SAR_LIKE, 1),
        ChannelMeta("sar_vh", Modality.SAR_LIKE, 1),
    )
    return optical + sar


def benchmark_channel_meta() -> tuple[ChannelMeta, ...]:
    """Compact 8-channel stack for the desk-scale benchmark: 6 optical-like
    bands covering all three native resolutions plus both SAR-like
    polarizations."""
    m = default_channel_meta()
    return (m[0], m[1], m[2], m[4], m[5], m[10], m[13], m[14])


@dataclass(frozen=True)
class SpectralTable:
    """K x C mean reflectance/backscatter per (class, channel), plus a
    within-class jitter scale."""

    signatures: np.ndarray
    class_sigma: float = 0.05

    def __post_init__(self):
        sig = np.asarray(self.signatures, dtype=np.float64)
        object.__setattr__(self, "signatures", sig)
        if sig.ndim != 2:
            raise ValueError("signatures must be K x C")
        if sig.min() < 0.05 or sig.max() > 0.95:
            raise ValueError("signatures must lie in [0.05, 0.95]")
        if not 0.0 <= self.class_sigma <= 0.2:
            raise ValueError("class_sigma must be in [0, 0.2]")
        k = sig.shape[0]
        for a in range(k):
            for b in range(a + 1, k):
                if np.linalg.norm(sig[a] - sig[b]) < 0.3:
                    raise ValueError(f"signature rows {a} and {b} closer than 0.3")


def sample_spectral_table(
    num_classes: int, num_channels: int, rng: np.random.Generator,
    class_sigma: float = 0.05,
) -> SpectralTable:
    """Rejection-sample a signature table with min pairwise row distance 0.3."""
    for _ in range(1000):
        sig = rng.uniform(0.05, 0.95, size=(num_classes, num_channels))
        d = np.linalg.norm(sig[:, None, :] - sig[None, :, :], axis=-1)
        d[np.diag_indices(num_classes)] = np.inf
        if d.min() >= 0.3:
            return SpectralTable(sig, class_sigma)
    raise RuntimeError("could not sample a separable spectral table")


@dataclass(frozen=True)
class SceneConfig:
    H: int = 64
    W: int = 64
    num_classes: int = 8
    channel_meta: tuple[ChannelMeta, ...] = field(default_factory=default_channel_meta)
    region_count: int = 6
    speckle_looks: int = 4
    optical_noise_std: float = 0.02
    class_sigma: float = 0.05
    noise_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_meta", tuple(self.channel_meta))
        if self.region_count < 2:
            raise ValueError("region_count must be >= 2")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")
        if self.optical_noise_std < 0:
            raise ValueError("optical_noise_std must be >= 0")

    @property
    def C(self) -> int:
        return len(self.channel_meta)


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    """Independent per-sample stream; generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence((seed, sample_index)))


def generate_label_map(cfg: SceneConfig, rng: np.random.Generator,
                       region_count: int | None = None) -> np.ndarray:
    """Nearest-seed (Voronoi) partition with uniform seed points and classes.

    Ties go to the lower seed index. Deterministic given the rng state.
    """
    n = cfg.region_count if region_count is None else region_count
    sy = rng.uniform(0.0, cfg.H, size=n)
    sx = rng.uniform(0.0, cfg.W, size=n)
    classes = rng.integers(0, cfg.num_classes, size=n)
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W]
    d2 = (yy[None] - sy[:, None, None]) ** 2 + (xx[None] - sx[:, None, None]) ** 2
    nearest = np.argmin(d2, axis=0)  # argmin takes the lowest index on ties
    return classes[nearest].astype(np.uint8)


def _resample_to_native(channel: np.ndarray, k: int) -> np.ndarray:
    """Box-downsample by factor k (edge blocks may be smaller), then
    nearest-neighbor upsample back to the original grid."""
    if k == 1:
        return channel
    h, w = channel.shape
    by = (h + k - 1) // k
    bx = (w + k - 1) // k
    coarse = np.empty((by, bx), dtype=channel.dtype)
    for iy in range(by):
        for ix in range(bx):
            block = channel[iy * k : (iy + 1) * k, ix * k : (ix + 1) * k]
            coarse[iy, ix] = block.mean()
    yy = np.arange(h) // k
    xx = np.arange(w) // k
    return coarse[np.ix_(yy, xx)]


def render_scene(labels: np.ndarray, table: SpectralTable, cfg: SceneConfig,
                 rng: np.random.Generator) -> ChannelStack:
    """Render a label map into a multichannel stack.

    Optical channel: clip(sig[label] + class_jitter + N(0, sigma_o^2), 0, 1).
    SAR channel:     clip(sig[label] * Gamma(L, 1/L), 0, 1).
    Channels with native_resolution_factor k > 1 are rendered, box-downsampled
    by k and nearest-neighbor upsampled back.
    """
    h, w = labels.shape
    k, c = table.signatures.shape
    if labels.max() >= k:
        raise ValueError("label map references a class missing from the table")
    if c != cfg.C:
        raise ValueError(f"table has {c} channels, config has {cfg.C}")
    noisy = cfg.noise_enabled
    # scene-level per-(class, channel) jitter: lighting/condition variation
    jitter = rng.normal(0.0, table.class_sigma, size=(k, c)) if noisy else np.zeros((k, c))
    out = np.empty((c, h, w), dtype=np.float32)
    for ci, meta in enumerate(cfg.channel_meta):
        base = (table.signatures[:, ci] + jitter[:, ci])[labels]
        if meta.modality is Modality.SAR_LIKE:
            if noisy:
                looks = cfg.speckle_looks
                speckle = rng.gamma(looks, 1.0 / looks, size=(h, w))
                base = base * speckle
        else:
            if noisy and cfg.optical_noise_std > 0:
                base = base + rng.normal(0.0, cfg.optical_noise_std, size=(h, w))
        chan = np.clip(base, 0.0, 1.0)
        out[ci] = _resample_to_native(chan, meta.native_resolution_factor)
    return ChannelStack(out, cfg.channel_meta)


def nearest_signature_labels(stack: ChannelStack, table: SpectralTable) -> np.ndarray:
    """Per-pixel nearest-row lookup; the separability oracle for noiseless
    full-resolution scenes."""
    c, h, w = stack.data.shape
    flat = stack.data.reshape(c, -1).T.astype(np.float64)
    d = np.linalg.norm(flat[:, None, :] - table.signatures[None, :, :], axis=-1)
    return np.argmin(d, axis=1).reshape(h, w).astype(np.uint8)


def generate_sample(cfg: SceneConfig, table: SpectralTable, sample_index: int,
                    manifest_seed: int) -> LabeledSample:
    rng = sample_rng(manifest_seed, sample_index)
    labels = generate_label_map(cfg, rng)
    stack = render_scene(labels, table, cfg, rng)
    return LabeledSample(stack, labels, f"s{sample_index:05d}", cfg.num_classes)


def generate_dataset(cfg: SceneConfig, n_train: int, n_test: int,
                     out: Path, n_pretrain: int = 0) -> DatasetManifest:
    """Write a dataset directory; byte-identical for identical (cfg, seed)."""
    out = Path(out)
    table = sample_spectral_table(
        cfg.num_classes, cfg.C, np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC1A55))),
        class_sigma=cfg.class_sigma,
    )
    total = n_train + n_test + n_pretrain
    ids = [f"s{i:05d}" for i in range(total)]
    splits = {
        "train": ids[:n_train],
        "test": ids[n_train : n_train + n_test],
    }
    if n_pretrain:
        splits["pretrain"] = ids[n_train + n_test :]
    names = DEFAULT_CLASS_NAMES
    if cfg.num_classes != len(names):
        names = tuple(f"class{i}" for i in range(cfg.num_classes))
    manifest = DatasetManifest(
        root=out,
        class_map=ClassMap(names),
        channel_meta=cfg.channel_meta,
        H=cfg.H,
        W=cfg.W,
        splits=splits,
        seed=cfg.seed,
    )
    for i in range(total):
        sample = generate_sample(cfg, table, i, cfg.seed)
        save_sample(sample, manifest.sample_dir(sample.sample_id))
    manifest.save()
    return manifest
