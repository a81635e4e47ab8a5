"""Trainable networks and checkpoint serialization.

The single-channel feature extractor (FE) is a strictly stride-1 residual
CNN applied to every input channel with one shared parameter set, so feature
maps keep the input resolution and per-pixel contrast is well defined. The
segmentation/reconstruction backbone is a skip-connected encoder-decoder on
the concatenated per-channel features; heads are 1x1 convolutions.

Parameters live in a flat name -> float32 array dict. Checkpoints serialize
as params.bin (concatenated little-endian float32 in manifest order) plus a
manifest.json with names, shapes, offsets and provenance metadata.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

STAGE_TAGS = ("random", "unifeat", "core", "finetuned", "simsiam")


@dataclass(frozen=True)
class FeatureMap:
    """Per-pixel embeddings, F x H x W, same spatial dims as the input."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ValueError("feature map must be F x H x W")
        if not np.isfinite(data).all():
            raise ValueError("non-finite feature values")

    @property
    def F(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class NetworkSpec:
    num_channels: int
    num_classes: int
    fe_width: int = 16
    fe_blocks: int = 2
    proj_dims: tuple[int, ...] = (32, 32)
    backbone_widths: tuple[int, ...] = (32, 64)

    def __post_init__(self):
        object.__setattr__(self, "proj_dims", tuple(self.proj_dims))
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        for wv in (self.fe_width, *self.proj_dims, *self.backbone_widths):
            if wv < 1:
                raise ValueError("all widths must be >= 1")

    @staticmethod
    def paper_scale(num_channels: int, num_classes: int) -> "NetworkSpec":
        return NetworkSpec(num_channels, num_classes, fe_width=64, fe_blocks=8,
                           proj_dims=(64, 64), backbone_widths=(64, 128, 128))

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            num_channels=d["num_channels"], num_classes=d["num_classes"],
            fe_width=d["fe_width"], fe_blocks=d["fe_blocks"],
            proj_dims=tuple(d["proj_dims"]),
            backbone_widths=tuple(d["backbone_widths"]),
        )


@dataclass
class _ParamSpec:
    shape: tuple[int, ...]
    init: str  # he | zeros | ones
    trainable: bool = True


class SSCLNet:
    """Builds parameter registries and forward graphs for every stage."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.registry: dict[str, _ParamSpec] = {}
        self._build_registry()

    # -- registry -----------------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int, k: int):
        self.registry[f"{name}.w"] = _ParamSpec((cout, cin, k, k), "he")
        self.registry[f"{name}.b"] = _ParamSpec((cout,), "zeros")

    def _bn_reg(self, name: str, width: int):
        self.registry[f"{name}.gamma"] = _ParamSpec((width,), "ones")
        self.registry[f"{name}.beta"] = _ParamSpec((width,), "zeros")
        self.registry[f"{name}.running_mean"] = _ParamSpec((width,), "zeros", trainable=False)
        self.registry[f"{name}.running_var"] = _ParamSpec((width,), "ones", trainable=False)

    def _build_registry(self):
        s = self.spec
        f = s.fe_width
        self._conv("fe.stem.conv", 1, f, 3)
        self._bn_reg("fe.stem.bn", f)
        for i in range(s.fe_blocks):
            self._conv(f"fe.block{i}.conv1", f, f, 3)
            self._bn_reg(f"fe.block{i}.bn1", f)
            self._conv(f"fe.block{i}.conv2", f, f, 3)
            self._bn_reg(f"fe.block{i}.bn2", f)
        prev = f
        for i, d in enumerate(s.proj_dims):
            self._conv(f"proj.layer{i}", prev, d, 1)
            prev = d
        ws = s.backbone_widths
        self._conv("backbone.reduce.conv", f * s.num_channels, ws[0], 1)
        self._bn_reg("backbone.reduce.bn", ws[0])
        for i in range(1, len(ws)):
            self._conv(f"backbone.enc{i}.down", ws[i - 1], ws[i], 3)
            self._bn_reg(f"backbone.enc{i}.bn1", ws[i])
            self._conv(f"backbone.enc{i}.conv", ws[i], ws[i], 3)
            self._bn_reg(f"backbone.enc{i}.bn2", ws[i])
        for i in range(len(ws) - 1, 0, -1):
            self._conv(f"backbone.dec{i}.up", ws[i], ws[i - 1], 3)
            self._bn_reg(f"backbone.dec{i}.bn1", ws[i - 1])
            self._conv(f"backbone.dec{i}.conv", ws[i - 1], ws[i - 1], 3)
            self._bn_reg(f"backbone.dec{i}.bn2", ws[i - 1])
        self._conv("seg.head", ws[0], s.num_classes, 1)
        self._conv("recon.head", ws[0], s.num_channels, 1)
        self._conv("probe.head", ws[0], s.num_classes, 1)
        # per-pixel projector + predictor for the negative-cosine baseline
        self._conv("simsiam.proj0", ws[0], 32, 1)
        self._conv("simsiam.proj1", 32, 32, 1)
        self._conv("simsiam.pred0", 32, 16, 1)
        self._conv("simsiam.pred1", 16, 32, 1)

    # -- parameters ----------------------------------------------------------

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """He fan-in Gaussian conv weights, zero biases; deterministic."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, ps in self.registry.items():
            if ps.init == "he":
                fan_in = int(np.prod(ps.shape[1:]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), ps.shape).astype(np.float32)
            elif ps.init == "ones":
                params[name] = np.ones(ps.shape, dtype=np.float32)
            else:
                params[name] = np.zeros(ps.shape, dtype=np.float32)
        return params

    def trainable_names(self, prefixes: tuple[str, ...]) -> list[str]:
        return [
            n for n, ps in self.registry.items()
            if ps.trainable and n.startswith(prefixes)
        ]

    def wrap(self, params: dict[str, np.ndarray],
             trainable: tuple[str, ...] = ()) -> dict[str, Tensor]:
        names = set(self.trainable_names(trainable)) if trainable else set()
        return {
            n: Tensor(v, requires_grad=n in names) for n, v in params.items()
        }

    # -- building blocks ------------------------------------------------------

    @staticmethod
    def _conv_fwd(tp, name: str, x: Tensor, pad: int = 0, stride: int = 1,
                  pad_mode: str = "zeros") -> Tensor:
        if pad:
            x = ad.pad2d(x, pad, pad_mode)
        y = ad.conv2d(x, tp[f"{name}.w"], stride)
        b = ad.reshape(tp[f"{name}.b"], (1, -1, 1, 1))
        return ad.add(y, b)

    @staticmethod
    def _bn_fwd(tp, raw, name: str, x: Tensor, train: bool) -> Tensor:
        gamma = ad.reshape(tp[f"{name}.gamma"], (1, -1, 1, 1))
        beta = ad.reshape(tp[f"{name}.beta"], (1, -1, 1, 1))
        if train:
            out, mu, var = ad.batchnorm_train(
                x, tp[f"{name}.gamma"], tp[f"{name}.beta"], BN_EPS
            )
            m = BN_MOMENTUM
            raw[f"{name}.running_mean"][:] = (
                (1 - m) * raw[f"{name}.running_mean"] + m * mu
            )
            raw[f"{name}.running_var"][:] = (
                (1 - m) * raw[f"{name}.running_var"] + m * var
            )
            return out
        mu = raw[f"{name}.running_mean"].reshape(1, -1, 1, 1)
        var = raw[f"{name}.running_var"].reshape(1, -1, 1, 1)
        xn = ad.mul(ad.add(x, -mu), 1.0 / np.sqrt(var + BN_EPS))
        return ad.add(ad.mul(xn, gamma), beta)

    # -- forward graphs --------------------------------------------------------

    def fe(self, tp, raw, x, train: bool = False, pad_mode: str = "zeros") -> Tensor:
        """Shared single-channel extractor: (B, 1, H, W) -> (B, F, H, W)."""
        x = ad.as_tensor(x)
        h = ad.relu(self._bn_fwd(tp, raw, "fe.stem.bn",
                                 self._conv_fwd(tp, "fe.stem.conv", x, 1, 1, pad_mode), train))
        n_blocks = self.spec.fe_blocks
        for i in range(n_blocks):
            y = ad.relu(self._bn_fwd(tp, raw, f"fe.block{i}.bn1",
                                     self._conv_fwd(tp, f"fe.block{i}.conv1", h, 1, 1, pad_mode), train))
            y = self._bn_fwd(tp, raw, f"fe.block{i}.bn2",
                             self._conv_fwd(tp, f"fe.block{i}.conv2", y, 1, 1, pad_mode), train)
            h = ad.add(h, y)
            if i < n_blocks - 1:  # final block output stays signed
                h = ad.relu(h)
        return h

    def proj(self, tp, f: Tensor) -> Tensor:
        """Pixel-wise projection head: 1x1 conv MLP, spatial dims preserved."""
        h = f
        last = len(self.spec.proj_dims) - 1
        for i in range(len(self.spec.proj_dims)):
            h = self._conv_fwd(tp, f"proj.layer{i}", h)
            if i < last:
                h = ad.relu(h)
        return h

    def fe_all_channels(self, tp, raw, stack: Tensor, train: bool = False) -> Tensor:
        """Run the shared FE over every channel of (B, C, H, W) and
        concatenate along features: output (B, F*C, H, W)."""
        stack = ad.as_tensor(stack)
        b, c, h, w = stack.shape
        flat = ad.reshape(stack, (b * c, 1, h, w))
        feats = self.fe(tp, raw, flat, train)
        return ad.reshape(feats, (b, c * self.spec.fe_width, h, w))

    def backbone(self, tp, raw, fused: Tensor, train: bool = False) -> Tensor:
        """Skip-connected encoder-decoder: (B, F*C, H, W) -> (B, w0, H, W)."""
        ws = self.spec.backbone_widths
        h = ad.relu(self._bn_fwd(tp, raw, "backbone.reduce.bn",
                                 self._conv_fwd(tp, "backbone.reduce.conv", fused), train))
        skips = [h]
        for i in range(1, len(ws)):
            h = ad.relu(self._bn_fwd(tp, raw, f"backbone.enc{i}.bn1",
                                     self._conv_fwd(tp, f"backbone.enc{i}.down", h, 1, 2), train))
            h = ad.relu(self._bn_fwd(tp, raw, f"backbone.enc{i}.bn2",
                                     self._conv_fwd(tp, f"backbone.enc{i}.conv", h, 1, 1), train))
            skips.append(h)
        for i in range(len(ws) - 1, 0, -1):
            h = ad.upsample2x(h)
            h = ad.relu(self._bn_fwd(tp, raw, f"backbone.dec{i}.bn1",
                                     self._conv_fwd(tp, f"backbone.dec{i}.up", h, 1, 1), train))
            h = ad.add(h, skips[i - 1])
            h = ad.relu(self._bn_fwd(tp, raw, f"backbone.dec{i}.bn2",
                                     self._conv_fwd(tp, f"backbone.dec{i}.conv", h, 1, 1), train))
        return h

    def trunk(self, tp, raw, stack, train: bool = False) -> Tensor:
        return self.backbone(tp, raw, self.fe_all_channels(tp, raw, stack, train), train)

    def seg_logits(self, tp, trunk_out: Tensor) -> Tensor:
        return self._conv_fwd(tp, "seg.head", trunk_out)

    def recon(self, tp, trunk_out: Tensor) -> Tensor:
        return self._conv_fwd(tp, "recon.head", trunk_out)

    def probe_logits(self, tp, trunk_out: Tensor) -> Tensor:
        """Per-pixel linear map, no nonlinearity."""
        return self._conv_fwd(tp, "probe.head", trunk_out)

    def simsiam_heads(self, tp, trunk_out: Tensor) -> tuple[Tensor, Tensor]:
        z = self._conv_fwd(tp, "simsiam.proj1",
                           ad.relu(self._conv_fwd(tp, "simsiam.proj0", trunk_out)))
        p = self._conv_fwd(tp, "simsiam.pred1",
                           ad.relu(self._conv_fwd(tp, "simsiam.pred0", z)))
        return z, p


# ---------------------------------------------------------------------------
# convenience wrappers matching the single-sample operation surface


def fe_forward(net: SSCLNet, params: dict, channel_image: np.ndarray,
               pad_mode: str = "zeros") -> FeatureMap:
    """Forward one 1 x H x W channel image through the shared FE."""
    x = np.asarray(channel_image, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != 1:
        raise ValueError("input must be a single channel, 1 x H x W")
    tp = net.wrap(params)
    out = net.fe(tp, params, x[None], train=False, pad_mode=pad_mode)
    return FeatureMap(out.data[0])


def assemble_stack_features(per_channel: list[FeatureMap]) -> np.ndarray:
    """Channel-order-preserving concatenation along the feature axis."""
    if not per_channel:
        raise ValueError("empty feature map list")
    dims = {fm.data.shape[1:] for fm in per_channel}
    if len(dims) != 1:
        raise ValueError(f"mismatched spatial dims: {sorted(dims)}")
    return np.concatenate([fm.data for fm in per_channel], axis=0)


def proj_forward(net: SSCLNet, params: dict, fm: FeatureMap) -> FeatureMap:
    tp = net.wrap(params)
    out = net.proj(tp, ad.Tensor(fm.data[None].astype(np.float32)))
    return FeatureMap(out.data[0])


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    stage: str = "random"
    seed: int = 0
    config_hash: str = ""
    parent_hash: str = ""
    dataset_id: str = ""
    discard_on_use: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = sorted(self.params)
        entries = []
        offset = 0
        blobs = []
        for name in names:
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            blobs.append(arr.tobytes())
        manifest = {
            "entries": entries,
            "total_size": offset,
            "stage": self.stage,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "parent_hash": self.parent_hash,
            "dataset_id": self.dataset_id,
            "discard_on_use": list(self.discard_on_use),
            "spec": self.spec.to_json(),
            "extra": self.extra,
        }
        (directory / "params.bin").write_bytes(b"".join(blobs))
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @staticmethod
    def load(directory: Path) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        raw = (directory / "params.bin").read_bytes()
        flat = np.frombuffer(raw, dtype="<f4")
        if flat.size != manifest["total_size"]:
            raise CheckpointError(
                f"params.bin holds {flat.size} floats, manifest says "
                f"{manifest['total_size']}"
            )
        params = {}
        seen = set()
        for e in manifest["entries"]:
            name, shape, offset = e["name"], tuple(e["shape"]), e["offset"]
            if name in seen:
                raise CheckpointError(f"duplicate parameter entry {name!r}")
            seen.add(name)
            n = int(np.prod(shape)) if shape else 1
            if offset + n > flat.size:
                raise CheckpointError(f"entry {name!r} overruns params.bin")
            params[name] = flat[offset : offset + n].reshape(shape).copy()
        return Checkpoint(
            spec=NetworkSpec.from_json(manifest["spec"]),
            params=params,
            stage=manifest["stage"],
            seed=manifest["seed"],
            config_hash=manifest.get("config_hash", ""),
            parent_hash=manifest.get("parent_hash", ""),
            dataset_id=manifest.get("dataset_id", ""),
            discard_on_use=tuple(manifest.get("discard_on_use", ())),
            extra=manifest.get("extra", {}),
        )


def init_checkpoint(spec: NetworkSpec, seed: int, dataset_id: str = "") -> Checkpoint:
    net = SSCLNet(spec)
    return Checkpoint(spec=spec, params=net.init_params(seed), stage="random",
                      seed=seed, dataset_id=dataset_id)
