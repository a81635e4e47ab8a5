"""Training and evaluation procedures.

Four stages: contrastive feature-alignment pretraining of the shared FE
(``run_unifeat``), degradation-reconstruction pretraining of the whole
network (``run_core``), supervised finetuning (``run_finetune``) and the
frozen linear-probe protocol (``run_linear_probe``), plus a negative-cosine
twin-view baseline (``run_simsiam``) for comparisons. Evaluation produces
confusion-matrix reports (overall and average accuracy); feature-space
analysis covers per-channel-pair cosine-similarity histograms and feature
map export.

All runs are pure functions of (config, checkpoint, dataset): RNG streams
derive from the stage seed, updates are single-threaded, and re-running a
stage reproduces its checkpoint byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .data import IGNORE_LABEL, DatasetManifest, load_sample
from .degrade import apply_recipe_array, gaussian_blur, sample_recipe
from .models import Checkpoint, SSCLNet
from .optim import make_optimizer


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ChainError(ValueError):
    """A checkpoint is being consumed outside its provenance chain."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    batch_size: int
    crop_size: int
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0
    # contrastive stage
    tau: float = 0.1
    patches_per_sample: int = 4
    include_positive_in_denominator: bool = False
    # reconstruction stage
    p_drop: float = 0.5
    cutout_count: int = 10
    cutout_range: tuple[int, int] = (10, 30)
    sigma_range: tuple[float, float] = (0.1, 2.0)
    # finetune stage
    n_train: int | None = None
    warmup_epochs: int = 0
    warmup_lr: float = 1e-2

    def __post_init__(self):
        if self.stage not in ("unifeat", "core", "finetune", "probe", "simsiam"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.crop_size < 1:
            raise ValueError("epochs/batch_size/crop_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must be in [0,1], got {self.p_drop}")
        if self.warmup_epochs < 0 or self.warmup_lr <= 0:
            raise ValueError("warmup_epochs must be >= 0 and warmup_lr > 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["cutout_range"] = list(self.cutout_range)
        d["sigma_range"] = list(self.sigma_range)
        return d


_DESK = {
    "unifeat": dict(stage="unifeat", epochs=1, batch_size=16, crop_size=32,
                    optimizer="sgd_momentum", lr=0.02, weight_decay=5e-3,
                    momentum=0.9, tau=0.1, patches_per_sample=8),
    "core": dict(stage="core", epochs=10, batch_size=8, crop_size=32,
                 optimizer="adam", lr=1e-3, p_drop=0.5, cutout_count=10,
                 cutout_range=(4, 10), sigma_range=(0.1, 2.0)),
    "finetune": dict(stage="finetune", epochs=5, batch_size=8, crop_size=32,
                     optimizer="adam", lr=1e-3, warmup_epochs=5,
                     warmup_lr=1e-2),
    "probe": dict(stage="probe", epochs=30, batch_size=16, crop_size=64,
                  optimizer="adam", lr=1e-2),
    "simsiam": dict(stage="simsiam", epochs=5, batch_size=8, crop_size=32,
                    optimizer="sgd_momentum", lr=1e-3),
}

_PAPER = {
    "unifeat": dict(stage="unifeat", epochs=1, batch_size=128, crop_size=64,
                    optimizer="sgd_momentum", lr=1e-3, weight_decay=5e-3,
                    momentum=0.9, tau=0.1, patches_per_sample=8),
    "core": dict(stage="core", epochs=200, batch_size=40, crop_size=224,
                 optimizer="adam", lr=1e-3, p_drop=0.5, cutout_count=10,
                 cutout_range=(10, 30), sigma_range=(0.1, 2.0)),
    "finetune": dict(stage="finetune", epochs=50, batch_size=8, crop_size=224,
                     optimizer="adam", lr=1e-4, warmup_epochs=0),
    "probe": dict(stage="probe", epochs=50, batch_size=16, crop_size=224,
                  optimizer="adam", lr=1e-2),
    "simsiam": dict(stage="simsiam", epochs=200, batch_size=100, crop_size=100,
                    optimizer="sgd_momentum", lr=1e-3),
}


def default_stage_config(stage: str, scale: str = "desk", **overrides) -> StageConfig:
    table = {"desk": _DESK, "paper": _PAPER}[scale]
    kw = dict(table[stage])
    kw.update(overrides)
    return StageConfig(**kw)


# ---------------------------------------------------------------------------
# dataset cache


class SampleCache:
    """All samples of chosen splits held in memory as float32 arrays."""

    def __init__(self, manifest: DatasetManifest, splits: tuple[str, ...] = ("train",)):
        self.manifest = manifest
        self.images: dict[str, np.ndarray] = {}
        self.labels: dict[str, np.ndarray] = {}
        for split in splits:
            ids = manifest.splits.get(split, [])
            if not ids:
                self.images[split] = np.zeros((0, manifest.C, manifest.H, manifest.W), np.float32)
                self.labels[split] = np.zeros((0, manifest.H, manifest.W), np.uint8)
                continue
            imgs, labs = [], []
            for sid in ids:
                s = load_sample(manifest.sample_dir(sid), manifest)
                imgs.append(s.stack.data)
                labs.append(s.labels)
            self.images[split] = np.stack(imgs)
            self.labels[split] = np.stack(labs)

    def n(self, split: str) -> int:
        return self.images[split].shape[0]

    def pretrain_images(self) -> np.ndarray:
        """Images for self-supervised stages: the unlabeled 'pretrain' split
        when the dataset provides one, otherwise the train split."""
        if self.images.get("pretrain") is not None and self.images["pretrain"].shape[0]:
            return self.images["pretrain"]
        return self.images["train"]


def _default_cache(manifest: DatasetManifest, cache: SampleCache | None,
                   splits: tuple[str, ...]) -> SampleCache:
    if cache is not None:
        return cache
    if "pretrain" in splits and not manifest.splits.get("pretrain"):
        splits = tuple(s for s in splits if s != "pretrain")
    return SampleCache(manifest, splits)


def dataset_id(manifest: DatasetManifest) -> str:
    blob = json.dumps(manifest.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_hash(cfg: StageConfig) -> str:
    blob = json.dumps(cfg.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check_chain(init: Checkpoint, manifest: DatasetManifest, allowed_stages):
    if init.stage not in allowed_stages:
        raise ChainError(
            f"stage chain mismatch: init checkpoint is {init.stage!r}, "
            f"expected one of {sorted(allowed_stages)}"
        )
    did = dataset_id(manifest)
    if init.dataset_id and init.dataset_id != did:
        raise ChainError(
            f"dataset chain mismatch: checkpoint trained on {init.dataset_id}, "
            f"asked to continue on {did}"
        )


class _MetricsLog:
    def __init__(self, out_dir: Path | None):
        self.path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            self.path = out_dir / "metrics.jsonl"
            self.path.write_text("")

    def log(self, **fields):
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(fields) + "\n")


def _stage_rng(cfg: StageConfig) -> np.random.Generator:
    tag = {"unifeat": 1, "core": 2, "finetune": 3, "probe": 4, "simsiam": 5}[cfg.stage]
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, tag)))


def _random_crop(imgs: np.ndarray, labs: np.ndarray | None, idx, size,
                 rng: np.random.Generator):
    _, _, h, w = imgs.shape
    xs, ys = [], []
    for i in idx:
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        xs.append(imgs[i, :, y : y + size, x : x + size])
        if labs is not None:
            ys.append(labs[i, y : y + size, x : x + size])
    batch = np.stack(xs)
    return (batch, np.stack(ys)) if labs is not None else (batch, None)


def _finalize(init: Checkpoint, params, stage, cfg, manifest,
              discard=(), extra=None) -> Checkpoint:
    return Checkpoint(
        spec=init.spec,
        params=params,
        stage=stage,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
        parent_hash=init.content_hash(),
        dataset_id=dataset_id(manifest),
        discard_on_use=tuple(discard),
        extra=extra or {},
    )


# ---------------------------------------------------------------------------
# stage: contrastive feature alignment


def run_unifeat(cfg: StageConfig, manifest: DatasetManifest, init: Checkpoint,
                out_dir: Path | None = None, cache: SampleCache | None = None) -> Checkpoint:
    """Pretrain FE + projection head with the pixel-wise contrastive loss on
    random same-location channel-pair views. The projection head stays in the
    checkpoint but is flagged discard-on-use."""
    _check_chain(init, manifest, {"random"})
    net = SSCLNet(init.spec)
    params = {k: v.copy() for k, v in init.params.items()}
    cache = _default_cache(manifest, cache, ("train", "pretrain"))
    imgs = cache.pretrain_images()
    n = imgs.shape[0]
    rng = _stage_rng(cfg)
    log = _MetricsLog(out_dir)
    trainable = net.trainable_names(("fe.", "proj."))
    opt = make_optimizer(cfg.optimizer, trainable, cfg.lr,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps = max(1, math.ceil(n * cfg.patches_per_sample / cfg.batch_size))
    last_good = {k: v.copy() for k, v in params.items()}
    size = cfg.crop_size
    c = imgs.shape[1]
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps):
            v1 = np.empty((cfg.batch_size, 1, size, size), np.float32)
            v2 = np.empty_like(v1)
            for b in range(cfg.batch_size):
                i = int(rng.integers(0, n))
                y = int(rng.integers(0, imgs.shape[2] - size + 1))
                x = int(rng.integers(0, imgs.shape[3] - size + 1))
                c1 = int(rng.integers(0, c))
                c2 = int(rng.integers(0, c - 1))
                if c2 >= c1:
                    c2 += 1
                v1[b, 0] = imgs[i, c1, y : y + size, x : x + size]
                v2[b, 0] = imgs[i, c2, y : y + size, x : x + size]
            tp = net.wrap(params, ("fe.", "proj."))
            z1 = net.proj(tp, net.fe(tp, params, v1, train=True))
            z2 = net.proj(tp, net.fe(tp, params, v2, train=True))
            fp = z1.shape[1]
            z1 = ad.reshape(z1, (cfg.batch_size, fp, size * size))
            z2 = ad.reshape(z2, (cfg.batch_size, fp, size * size))
            loss = losses.nt_xent_symmetric(
                z1, z2, cfg.tau, cfg.include_positive_in_denominator
            )
            if not np.isfinite(loss.data):
                return _finalize(init, last_good, "unifeat", cfg, manifest,
                                 discard=("proj.",), extra={"aborted": "non-finite loss"})
            loss.backward()
            grads = {k: tp[k].grad for k in trainable}
            opt.step(params, grads)
            epoch_loss += loss.item()
        log.log(stage="unifeat", epoch=epoch, loss=epoch_loss / steps, lr=cfg.lr)
        last_good = {k: v.copy() for k, v in params.items()}
    return _finalize(init, params, "unifeat", cfg, manifest, discard=("proj.",))


# ---------------------------------------------------------------------------
# stage: degradation reconstruction


def run_core(cfg: StageConfig, manifest: DatasetManifest, init: Checkpoint,
             out_dir: Path | None = None, cache: SampleCache | None = None) -> Checkpoint:
    """Pretrain the full FE + backbone by reconstructing the clean crop from
    a degraded one (channel dropout, cutout, blur) under the L1 loss."""
    _check_chain(init, manifest, {"random", "unifeat"})
    net = SSCLNet(init.spec)
    params = {k: v.copy() for k, v in init.params.items()}
    cache = _default_cache(manifest, cache, ("train", "pretrain"))
    imgs = cache.pretrain_images()
    n, c, _, _ = imgs.shape
    rng = _stage_rng(cfg)
    log = _MetricsLog(out_dir)
    trainable = net.trainable_names(("fe.", "backbone.", "recon."))
    opt = make_optimizer(cfg.optimizer, trainable, cfg.lr,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps = max(1, n // cfg.batch_size)
    size = cfg.crop_size
    epoch_means: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nsteps = 0
        for s in range(steps):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if idx.size == 0:
                break
            clean, _ = _random_crop(imgs, None, idx, size, rng)
            recipes = []
            corrupt = np.empty_like(clean)
            for b in range(idx.size):
                r = sample_recipe(c, size, size, cfg.p_drop, rng,
                                  cutout_count=cfg.cutout_count,
                                  cutout_range=cfg.cutout_range,
                                  sigma_range=cfg.sigma_range)
                recipes.append(r)
                corrupt[b] = apply_recipe_array(clean[b], r)
            tp = net.wrap(params, ("fe.", "backbone.", "recon."))
            pred = net.recon(tp, net.trunk(tp, params, corrupt, train=True))
            loss = losses.l1_recon(pred, Tensor(clean))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    "non-finite reconstruction loss",
                    diagnostics={"epoch": epoch, "step": s,
                                 "recipes": [r.to_json() for r in recipes]},
                )
            loss.backward()
            opt.step(params, {k: tp[k].grad for k in trainable})
            epoch_loss += loss.item()
            nsteps += 1
        mean = epoch_loss / max(1, nsteps)
        epoch_means.append(mean)
        log.log(stage="core", epoch=epoch, loss=mean, lr=cfg.lr)
    extra = {"epoch_l1": epoch_means}
    return _finalize(init, params, "core", cfg, manifest,
                     discard=("recon.",), extra=extra)


# ---------------------------------------------------------------------------
# stage: supervised finetuning


def run_finetune(cfg: StageConfig, manifest: DatasetManifest, init: Checkpoint,
                 out_dir: Path | None = None, cache: SampleCache | None = None) -> Checkpoint:
    """End-to-end supervised training with per-pixel cross-entropy. The
    segmentation head starts from its original random initialization.
    cfg.n_train optionally subsamples the training split (label-efficiency)."""
    _check_chain(init, manifest, {"random", "unifeat", "core", "simsiam"})
    net = SSCLNet(init.spec)
    params = {k: v.copy() for k, v in init.params.items()}
    cache = _default_cache(manifest, cache, ("train",))
    imgs = cache.images["train"]
    labs = cache.labels["train"]
    n = imgs.shape[0]
    if cfg.n_train is not None:
        if cfg.n_train < 1 or cfg.n_train > n:
            raise ValueError(f"n_train must be in [1, {n}]")
        imgs, labs = imgs[: cfg.n_train], labs[: cfg.n_train]
        n = cfg.n_train
    rng = _stage_rng(cfg)
    log = _MetricsLog(out_dir)
    steps = max(1, math.ceil(n / cfg.batch_size))
    size = min(cfg.crop_size, imgs.shape[2])

    def _phase(phase: str, prefixes: tuple[str, ...], epochs: int, lr: float):
        trainable = net.trainable_names(prefixes)
        opt = make_optimizer(cfg.optimizer, trainable, lr,
                             momentum=cfg.momentum,
                             weight_decay=cfg.weight_decay)
        for epoch in range(epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            nsteps = 0
            for s in range(steps):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                if idx.size == 0:
                    break
                x, y = _random_crop(imgs, labs, idx, size, rng)
                tp = net.wrap(params, prefixes)
                logits = net.seg_logits(tp, net.trunk(tp, params, x, train=True))
                loss = losses.pixel_ce(logits, y, IGNORE_LABEL)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged("non-finite cross-entropy",
                                           diagnostics={"phase": phase,
                                                        "epoch": epoch,
                                                        "step": s})
                loss.backward()
                opt.step(params, {k: tp[k].grad for k in trainable})
                epoch_loss += loss.item()
                nsteps += 1
            log.log(stage="finetune", phase=phase, epoch=epoch,
                    loss=epoch_loss / max(1, nsteps), lr=lr)

    if cfg.warmup_epochs > 0:
        # Head warmup on frozen features before joint training: adapting the
        # randomly initialized head first prevents its early gradients from
        # scrambling a pretrained trunk (the probe-then-finetune protocol).
        calibrate_normalization(net, params, imgs, cfg.batch_size)
        _phase("head_warmup", ("seg.",), cfg.warmup_epochs, cfg.warmup_lr)
    _phase("joint", ("fe.", "backbone.", "seg."), cfg.epochs, cfg.lr)
    return _finalize(init, params, "finetuned", cfg, manifest)


# ---------------------------------------------------------------------------
# stage: twin-view negative-cosine baseline


def run_simsiam(cfg: StageConfig, manifest: DatasetManifest, init: Checkpoint,
                out_dir: Path | None = None, cache: SampleCache | None = None) -> Checkpoint:
    """Baseline pretraining: two augmented views of the same crop (shared
    flip, independent blur), per-pixel negative cosine with stop-gradient."""
    _check_chain(init, manifest, {"random"})
    net = SSCLNet(init.spec)
    params = {k: v.copy() for k, v in init.params.items()}
    cache = _default_cache(manifest, cache, ("train", "pretrain"))
    imgs = cache.pretrain_images()
    n = imgs.shape[0]
    rng = _stage_rng(cfg)
    log = _MetricsLog(out_dir)
    trainable = net.trainable_names(("fe.", "backbone.", "simsiam."))
    opt = make_optimizer(cfg.optimizer, trainable, cfg.lr,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps = max(1, n // cfg.batch_size)
    size = cfg.crop_size

    def augment(batch):
        out = batch.copy()
        for b in range(out.shape[0]):
            sigma = float(rng.uniform(0.1, 1.0))
            out[b] = gaussian_blur(out[b], sigma)
        return out

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nsteps = 0
        for s in range(steps):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if idx.size == 0:
                break
            crop, _ = _random_crop(imgs, None, idx, size, rng)
            if rng.random() < 0.5:
                crop = crop[:, :, :, ::-1].copy()
            if rng.random() < 0.5:
                crop = crop[:, :, ::-1, :].copy()
            va, vb = augment(crop), augment(crop)
            tp = net.wrap(params, ("fe.", "backbone.", "simsiam."))
            za, pa = net.simsiam_heads(tp, net.trunk(tp, params, va, train=True))
            zb, pb = net.simsiam_heads(tp, net.trunk(tp, params, vb, train=True))
            loss = losses.simsiam_loss(pa, zb, pb, za)
            if not np.isfinite(loss.data):
                raise TrainingDiverged("non-finite baseline loss",
                                       diagnostics={"epoch": epoch, "step": s})
            loss.backward()
            opt.step(params, {k: tp[k].grad for k in trainable})
            epoch_loss += loss.item()
            nsteps += 1
        log.log(stage="simsiam", epoch=epoch, loss=epoch_loss / max(1, nsteps), lr=cfg.lr)
    return _finalize(init, params, "simsiam", cfg, manifest, discard=("simsiam.",))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray  # K x K, rows = ground truth
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        object.__setattr__(self, "confusion", cm)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (cm < 0).any():
            raise ValueError("confusion matrix entries must be nonnegative")

    @property
    def pixel_count(self) -> int:
        return int(self.confusion.sum())

    @property
    def per_class_accuracy(self) -> np.ndarray:
        row = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = np.diag(self.confusion) / row
        return acc  # NaN for zero-support classes

    @property
    def overall_accuracy(self) -> float:
        total = self.confusion.sum()
        if total == 0:
            raise ValueError("empty report")
        return float(np.trace(self.confusion) / total)

    @property
    def average_accuracy(self) -> float:
        """Mean per-class recall over classes present in the ground truth.

        Computed in exact rational arithmetic before the final float
        conversion, so the value equals the hand-derived fraction rather
        than an order-dependent float accumulation."""
        row = self.confusion.sum(axis=1)
        per = [Fraction(int(self.confusion[i, i]), int(row[i]))
               for i in range(self.confusion.shape[0]) if row[i] > 0]
        if not per:
            raise ValueError("no class has support")
        return float(sum(per, Fraction(0)) / len(per))

    def to_json(self) -> dict:
        acc = self.per_class_accuracy
        return {
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in acc],
            "overall_accuracy": self.overall_accuracy,
            "average_accuracy": self.average_accuracy,
            "pixel_count": self.pixel_count,
            "meta": self.meta,
        }

    @staticmethod
    def from_json(d: dict) -> "EvalReport":
        return EvalReport(np.asarray(d["confusion"], dtype=np.int64), d.get("meta", {}))


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                     ignore: int = IGNORE_LABEL) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    keep = truth != ignore
    pred, truth = pred[keep], truth[keep]
    if pred.size and (pred.max() >= num_classes or truth.max() >= num_classes):
        raise ValueError("class index out of range")
    flat = truth.astype(np.int64) * num_classes + pred.astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def overall_accuracy(cm: np.ndarray) -> float:
    return EvalReport(cm).overall_accuracy


def average_accuracy(cm: np.ndarray) -> float:
    return EvalReport(cm).average_accuracy


def _predict_batch(net: SSCLNet, params, x: np.ndarray, head: str) -> np.ndarray:
    tp = net.wrap(params)
    t = net.trunk(tp, params, x, train=False)
    if head == "seg":
        logits = net.seg_logits(tp, t)
    elif head == "probe":
        logits = net.probe_logits(tp, t)
    else:
        raise ValueError(f"unknown head {head!r}")
    return np.argmax(logits.data, axis=1)


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, split: str = "test",
             head: str = "seg", batch_size: int = 8,
             cache: SampleCache | None = None) -> EvalReport:
    """Argmax segmentation accuracy on a split; ignore-sentinel pixels are
    excluded everywhere."""
    if cache is None or split not in cache.images:
        cache = SampleCache(manifest, (split,))
    imgs, labs = cache.images[split], cache.labels[split]
    if imgs.shape[0] == 0:
        raise ValueError(f"empty split {split!r}")
    net = SSCLNet(ckpt.spec)
    k = ckpt.spec.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for s in range(0, imgs.shape[0], batch_size):
        x = imgs[s : s + batch_size]
        pred = _predict_batch(net, ckpt.params, x, head)
        cm += confusion_matrix(pred, labs[s : s + batch_size], k)
    return EvalReport(cm, meta={"split": split, "stage": ckpt.stage, "head": head,
                                "checkpoint": ckpt.content_hash()})


# ---------------------------------------------------------------------------
# stage: linear probe


def calibrate_normalization(net: SSCLNet, params: dict, imgs: np.ndarray,
                            batch_size: int = 8, passes: int = 2) -> None:
    """Refresh the running normalization statistics of a checkpoint with
    forward passes over clean images (no weight update). Pretraining sees
    degraded inputs, so its running statistics misdescribe clean data; any
    frozen-weights protocol calibrates on its training split first."""
    tp = net.wrap(params)
    for _ in range(passes):
        for s in range(0, imgs.shape[0], batch_size):
            net.trunk(tp, params, imgs[s : s + batch_size], train=True)


def run_linear_probe(cfg: StageConfig, manifest: DatasetManifest, init: Checkpoint,
                     out_dir: Path | None = None,
                     cache: SampleCache | None = None) -> tuple[Checkpoint, EvalReport]:
    """Freeze everything, train only the per-pixel linear head on trunk
    features (after recalibrating normalization statistics on the probe's
    training split), evaluate on the test split."""
    _check_chain(init, manifest, {"random", "unifeat", "core", "finetuned", "simsiam"})
    net = SSCLNet(init.spec)
    params = {k: v.copy() for k, v in init.params.items()}
    if cache is None or "train" not in cache.images:
        cache = SampleCache(manifest, ("train", "test"))
    calibrate_normalization(net, params, cache.images["train"], cfg.batch_size)
    rng = _stage_rng(cfg)
    log = _MetricsLog(out_dir)

    def trunk_features(imgs):
        feats = []
        tp = net.wrap(params)
        for s in range(0, imgs.shape[0], cfg.batch_size):
            t = net.trunk(tp, params, imgs[s : s + cfg.batch_size], train=False)
            feats.append(t.data.astype(np.float32))
        return np.concatenate(feats) if feats else np.zeros((0,))

    train_feats = trunk_features(cache.images["train"])
    train_labs = cache.labels["train"]
    n = train_feats.shape[0]
    trainable = ["probe.head.w", "probe.head.b"]
    opt = make_optimizer(cfg.optimizer, trainable, cfg.lr,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps = max(1, math.ceil(n / cfg.batch_size))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(steps):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if idx.size == 0:
                break
            tp = net.wrap(params, ("probe.",))
            logits = net.probe_logits(tp, Tensor(train_feats[idx]))
            loss = losses.pixel_ce(logits, train_labs[idx], IGNORE_LABEL)
            loss.backward()
            opt.step(params, {k: tp[k].grad for k in trainable})
            epoch_loss += loss.item()
        log.log(stage="probe", epoch=epoch, loss=epoch_loss / steps, lr=cfg.lr)
    probed = _finalize(init, params, init.stage, cfg, manifest,
                       discard=init.discard_on_use,
                       extra=dict(init.extra, probed=True))
    report = evaluate(probed, manifest, "test", head="probe",
                      batch_size=cfg.batch_size, cache=cache)
    if out_dir is not None:
        (Path(out_dir) / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    return probed, report


# ---------------------------------------------------------------------------
# feature-space analysis


def weighted_median(bin_centers: np.ndarray, masses: np.ndarray) -> float:
    """Smallest bin center at which cumulative mass reaches half the total."""
    masses = np.asarray(masses, dtype=np.float64)
    total = masses.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    cum = np.cumsum(masses)
    i = int(np.searchsorted(cum, total / 2.0))
    return float(bin_centers[i])


def similarity_histogram(ckpt: Checkpoint, manifest: DatasetManifest,
                         channel_pair: tuple[int, int], bins: int = 50,
                         n_samples: int | None = 200, split: str = "train",
                         cache: SampleCache | None = None):
    """Histogram over per-pixel cosine similarity between the FE feature maps
    of two channels, over up to n_samples scenes of a split. Returns
    (bin_centers, mass, weighted_median).

    Bin centers span [-1, 1] inclusive so that identical inputs put all mass
    exactly at 1.0. Normalization layers use statistics of the measured
    chunk: a never-trained checkpoint has no calibrated running statistics,
    and measuring both before/after checkpoints the same way keeps the
    comparison fair. The checkpoint itself is never mutated."""
    ca, cb = channel_pair
    if not (0 <= ca < manifest.C and 0 <= cb < manifest.C):
        raise ValueError(f"channel index out of range: {channel_pair}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if cache is None or split not in cache.images:
        cache = SampleCache(manifest, (split,))
    imgs = cache.images[split]
    if n_samples is not None:
        imgs = imgs[:n_samples]
    net = SSCLNet(ckpt.spec)
    scratch = {k: v.copy() for k, v in ckpt.params.items()}
    tp = net.wrap(scratch)
    width = 2.0 / (bins - 1)
    centers = np.linspace(-1.0, 1.0, bins)
    edges = np.concatenate(([-1.0 - width / 2], centers + width / 2))
    mass = np.zeros(bins, dtype=np.int64)
    for s in range(0, imgs.shape[0], 8):
        chunk = imgs[s : s + 8]
        fa = net.fe(tp, scratch, chunk[:, ca : ca + 1], train=True).data
        fb = net.fe(tp, scratch, chunk[:, cb : cb + 1], train=True).data
        na = np.linalg.norm(fa, axis=1)
        nb = np.linalg.norm(fb, axis=1)
        dot = (fa * fb).sum(axis=1)
        denom = na * nb
        sims = np.where(denom > losses.ZERO_NORM_EPS, dot / np.maximum(denom, losses.ZERO_NORM_EPS), 0.0)
        sims = np.clip(sims, -1.0, 1.0)
        hist, _ = np.histogram(sims.ravel(), bins=edges)
        mass += hist
    return centers, mass, weighted_median(centers, mass)


def export_feature_maps(ckpt: Checkpoint, sample_stack: np.ndarray, layer: str,
                        out_dir: Path, max_maps: int = 8) -> list[Path]:
    """Write feature channels of a layer as grayscale PNGs (min-max
    normalized per map; constant maps render mid-gray). layer is 'fe:<c>'
    for the FE on channel c, or 'trunk'."""
    from PIL import Image

    net = SSCLNet(ckpt.spec)
    tp = net.wrap(ckpt.params)
    x = np.asarray(sample_stack, dtype=np.float32)[None]
    if layer.startswith("fe:"):
        c = int(layer.split(":", 1)[1])
        if not 0 <= c < x.shape[1]:
            raise ValueError(f"channel {c} out of range")
        maps = net.fe(tp, ckpt.params, x[:, c : c + 1], train=False).data[0]
    elif layer == "trunk":
        maps = net.trunk(tp, ckpt.params, x, train=False).data[0]
    else:
        raise ValueError(f"unknown layer {layer!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(min(max_maps, maps.shape[0])):
        m = maps[i]
        lo, hi = float(m.min()), float(m.max())
        if hi - lo < 1e-12:
            img = np.full(m.shape, 128, dtype=np.uint8)
        else:
            img = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
        p = out_dir / f"{layer.replace(':', '_')}_f{i:03d}.png"
        Image.fromarray(img, mode="L").save(p)
        paths.append(p)
    return paths
