"""Core domain types and the on-disk dataset format.

A dataset is a directory tree:

    <root>/manifest.json
    <root>/samples/<id>/image.bin    little-endian float32, C*H*W, channel-major
    <root>/samples/<id>/labels.bin   uint8, H*W, row-major, 255 = ignore
    <root>/samples/<id>/meta.json    dims, channel metadata, sample id

Round-trips are bit-exact; loading validates every invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

IGNORE_LABEL = 255
_MAX_ELEMENTS = 2**31


class Modality(str, Enum):
    OPTICAL_LIKE = "optical"
    SAR_LIKE = "sar"


class ValidationError(ValueError):
    """A sample or manifest violates a structural invariant."""


@dataclass(frozen=True)
class ChannelMeta:
    name: str
    modality: Modality
    native_resolution_factor: int = 1

    def __post_init__(self):
        if self.native_resolution_factor < 1:
            raise ValidationError(
                f"channel {self.name!r}: native_resolution_factor must be >= 1"
            )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "modality": self.modality.value,
            "native_resolution_factor": self.native_resolution_factor,
        }

    @staticmethod
    def from_json(d: dict) -> "ChannelMeta":
        return ChannelMeta(d["name"], Modality(d["modality"]), d["native_resolution_factor"])


@dataclass(frozen=True)
class ChannelStack:
    """C x H x W raster of aligned channels, values in [0, 1]."""

    data: np.ndarray
    channel_meta: tuple[ChannelMeta, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_meta", tuple(self.channel_meta))
        if data.ndim != 3:
            raise ValidationError(f"stack must be C x H x W, got shape {data.shape}")
        c, h, w = data.shape
        if c < 2:
            raise ValidationError(f"need C >= 2 channels, got {c}")
        if h < 16 or w < 16:
            raise ValidationError(f"need H,W >= 16, got {h}x{w}")
        if len(self.channel_meta) != c:
            raise ValidationError(
                f"channel_meta length {len(self.channel_meta)} != C={c}"
            )
        if data.size > _MAX_ELEMENTS:
            raise ValidationError("stack exceeds 2^31 elements")
        finite = np.isfinite(data)
        if not finite.all():
            idx = np.unravel_index(int(np.argmin(finite)), data.shape)
            raise ValidationError(f"non-finite value at (c,y,x)={idx}")

    @property
    def C(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1]

    @property
    def W(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabeledSample:
    stack: ChannelStack
    labels: np.ndarray
    sample_id: str
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        object.__setattr__(self, "labels", labels)
        if labels.shape != (self.stack.H, self.stack.W):
            raise ValidationError(
                f"labels shape {labels.shape} != stack spatial dims "
                f"({self.stack.H}, {self.stack.W})"
            )
        valid = (labels < self.num_classes) | (labels == IGNORE_LABEL)
        if not valid.all():
            raise ValidationError(
                f"label out of range: value {int(labels[~valid][0])} "
                f">= K={self.num_classes}"
            )


@dataclass(frozen=True)
class ClassMap:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValidationError("need K >= 2 classes")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")

    @property
    def K(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    class_map: ClassMap
    channel_meta: tuple[ChannelMeta, ...]
    H: int
    W: int
    splits: dict = field(default_factory=dict)  # split name -> list of sample ids
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "channel_meta", tuple(self.channel_meta))

    @property
    def C(self) -> int:
        return len(self.channel_meta)

    @property
    def sample_ids(self) -> list[str]:
        out: list[str] = []
        for ids in self.splits.values():
            out.extend(ids)
        return out

    def sample_dir(self, sample_id: str) -> Path:
        return self.root / "samples" / sample_id

    def to_json(self) -> dict:
        return {
            "classes": list(self.class_map.names),
            "channels": [m.to_json() for m in self.channel_meta],
            "H": self.H,
            "W": self.W,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "seed": self.seed,
        }

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @staticmethod
    def load(root: Path) -> "DatasetManifest":
        root = Path(root)
        d = json.loads((root / "manifest.json").read_text())
        return DatasetManifest(
            root=root,
            class_map=ClassMap(tuple(d["classes"])),
            channel_meta=tuple(ChannelMeta.from_json(m) for m in d["channels"]),
            H=d["H"],
            W=d["W"],
            splits={k: list(v) for k, v in d["splits"].items()},
            seed=d.get("seed"),
        )


def save_sample(sample: LabeledSample, directory: Path) -> None:
    """Write image.bin / labels.bin / meta.json; bit-exact on reload."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.ascontiguousarray(sample.stack.data, dtype="<f4")
    (directory / "image.bin").write_bytes(img.tobytes())
    (directory / "labels.bin").write_bytes(
        np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes()
    )
    meta = {
        "sample_id": sample.sample_id,
        "C": sample.stack.C,
        "H": sample.stack.H,
        "W": sample.stack.W,
        "num_classes": sample.num_classes,
        "channels": [m.to_json() for m in sample.stack.channel_meta],
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_sample(directory: Path, manifest: DatasetManifest) -> LabeledSample:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    c, h, w = meta["C"], meta["H"], meta["W"]
    if (c, h, w) != (manifest.C, manifest.H, manifest.W):
        raise ValidationError(
            f"{directory.name}: dims C,H,W=({c},{h},{w}) do not match manifest "
            f"({manifest.C},{manifest.H},{manifest.W})"
        )
    raw = (directory / "image.bin").read_bytes()
    expected = 4 * c * h * w
    if len(raw) != expected:
        raise ValidationError(
            f"{directory.name}/image.bin size mismatch: expected 4*C*H*W={expected} "
            f"bytes, got {len(raw)}"
        )
    img = np.frombuffer(raw, dtype="<f4").reshape(c, h, w)
    raw_labels = (directory / "labels.bin").read_bytes()
    if len(raw_labels) != h * w:
        raise ValidationError(
            f"{directory.name}/labels.bin size mismatch: expected H*W={h * w} "
            f"bytes, got {len(raw_labels)}"
        )
    labels = np.frombuffer(raw_labels, dtype=np.uint8).reshape(h, w)
    channel_meta = tuple(ChannelMeta.from_json(m) for m in meta["channels"])
    stack = ChannelStack(img, channel_meta)
    return LabeledSample(stack, labels, meta["sample_id"], manifest.class_map.K)


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return a list of violations; empty means valid. Never mutates."""
    violations: list[str] = []
    root = manifest.root
    if not root.is_dir():
        return [f"fatal: unreadable dataset root {root}"]
    seen: dict[str, str] = {}
    for split, ids in manifest.splits.items():
        for sid in ids:
            if sid in seen:
                violations.append(
                    f"overlapping splits: sample {sid!r} in both "
                    f"{seen[sid]!r} and {split!r}"
                )
            else:
                seen[sid] = split
    for sid in seen:
        d = manifest.sample_dir(sid)
        for fname in ("image.bin", "labels.bin", "meta.json"):
            if not (d / fname).is_file():
                violations.append(f"sample {sid!r}: missing {fname}")
        if (d / "meta.json").is_file():
            try:
                load_sample(d, manifest)
            except (ValidationError, OSError, KeyError, ValueError) as e:
                violations.append(f"sample {sid!r}: {e}")
    return violations
