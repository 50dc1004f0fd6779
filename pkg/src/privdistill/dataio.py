"""Paired-image dataset representation, synthetic task, splits, and disk layout.

Images are torch float32 tensors of shape (C, H, W) with values in [-1, 1]
(`check_image` enforces the contract at boundaries). The synthetic task draws
2-5 flat-colored rectangles as the input label map; the target renders each
rectangle with a class texture whose phase and shading are anchored to the
rectangle's own origin and size. The mapping x -> y is exactly deterministic,
so a perfect translator exists, but reproducing the anchored phases requires
global reasoning that small models memorize rather than generalize.

Pixel values are snapped to the 8-bit grid at generation time so the PNG disk
layout round-trips bit-exactly.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError
from .rng import mix64

N_RECT_CLASSES = 4

# Paper-style split sizes (train, proxy, test) for the two reference tasks,
# plus the desk-scale default: the first preset halved.
FACADE_SPLIT = (400, 100, 106)
CITYSCAPES_SPLIT = (2975, 250, 250)
DESK_SPLIT = (200, 50, 53)

# Flat label colors for the input map x; row 0 is the background class.
_X_COLORS = np.array(
    [
        [-0.85, -0.85, -0.85],
        [0.90, -0.60, -0.60],
        [-0.60, 0.90, -0.60],
        [-0.60, -0.60, 0.90],
        [0.90, 0.90, -0.50],
    ],
    dtype=np.float32,
)

# Base colors for the rendered target y (per class, background first).
_Y_COLORS = np.array(
    [
        [-0.10, -0.05, 0.00],
        [0.35, -0.20, -0.25],
        [-0.25, 0.30, -0.15],
        [-0.20, -0.10, 0.40],
        [0.30, 0.25, -0.30],
    ],
    dtype=np.float32,
)

_PATTERN_AMPLITUDE = 0.35
_RAMP_AMPLITUDE = 0.20
_BG_AMPLITUDE = 0.15


class _YReadCounter:
    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0


_Y_READS = _YReadCounter()


@contextmanager
def count_y_reads():
    """Audit context: yields a callable returning how many ground-truth reads
    happened since entry. Distillation paths must leave it at zero."""
    start = _Y_READS.count
    yield lambda: _Y_READS.count - start


def check_image(tensor: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Validate the (C, H, W), finite, [-1, 1] image contract."""
    if not isinstance(tensor, torch.Tensor) or tensor.dim() != 3:
        raise ConfigError(f"{name} must be a (C, H, W) tensor")
    if not torch.isfinite(tensor).all():
        raise ConfigError(f"{name} contains non-finite values")
    lo, hi = float(tensor.min()), float(tensor.max())
    if lo < -1.0 or hi > 1.0:
        raise ConfigError(f"{name} out of range [-1, 1]: min={lo:.4f} max={hi:.4f}")
    return tensor


class PairedSample:
    """An input image with (optionally) its ground-truth translation.

    The ground truth sits behind a read-counting property so audits can prove
    that a code path (e.g. distillation) never touched it. Proxy samples carry
    no ground truth at all.
    """

    __slots__ = ("id", "x", "_y")

    def __init__(self, sample_id: str, x: torch.Tensor, y: torch.Tensor | None = None):
        self.id = sample_id
        self.x = x
        self._y = y

    @property
    def y(self) -> torch.Tensor | None:
        _Y_READS.count += 1
        return self._y

    @property
    def labeled(self) -> bool:
        # Presence check, intentionally not counted as a ground-truth read.
        return self._y is not None

    def strip_label(self) -> "PairedSample":
        return PairedSample(self.id, self.x, None)

    def __repr__(self) -> str:
        return f"PairedSample(id={self.id!r}, labeled={self.labeled})"


@dataclass
class DatasetSplits:
    """Disjoint train/proxy/test views of a paired dataset.

    `proxy_truths` is the auditor-only side table of ground truths stripped
    from the proxy split; training code never receives it as sample labels.
    """

    train: list[PairedSample]
    proxy: list[PairedSample]
    test: list[PairedSample]
    proxy_truths: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def validate(self) -> "DatasetSplits":
        ids_train = {s.id for s in self.train}
        ids_proxy = {s.id for s in self.proxy}
        ids_test = {s.id for s in self.test}
        if ids_train & ids_proxy or ids_train & ids_test or ids_proxy & ids_test:
            raise ConfigError("split id sets are not pairwise disjoint")
        for name, split in (("train", self.train), ("test", self.test)):
            unlabeled = [s.id for s in split if not s.labeled]
            if unlabeled:
                raise ConfigError(f"{name} split has unlabeled samples: {unlabeled[:5]}")
        labeled = [s.id for s in self.proxy if s.labeled]
        if labeled:
            raise ConfigError(f"proxy split has labeled samples: {labeled[:5]}")
        return self


@dataclass
class AttackEvalSet:
    """Equal-sized member/nonmember sets used to evaluate the attack."""

    members: list[PairedSample]
    nonmembers: list[PairedSample]


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round((values.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _from_u8(u8: np.ndarray) -> np.ndarray:
    return ((u8.astype(np.float32) / 255.0) * 2.0 - 1.0).astype(np.float32)


def _snap_to_grid(values: np.ndarray) -> np.ndarray:
    return _from_u8(_to_u8(values))


def _render_pattern(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-class binary texture in {-1, +1}; u, v are rect-local coordinates."""
    if cls == 1:
        bit = (u // 2) % 2
    elif cls == 2:
        bit = (v // 2) % 2
    elif cls == 3:
        bit = ((u // 2) + (v // 2)) % 2
    else:
        bit = ((u + v) // 3) % 2
    return bit.astype(np.float32) * 2.0 - 1.0


def generate_synthetic_task(seed: int, n: int, h: int, w: int) -> list[PairedSample]:
    """Deterministically generate `n` paired samples of size h x w.

    Each sample pairs a flat-colored rectangle label map with a rendered
    target whose per-class texture phase and shading ramp are anchored to the
    rectangle geometry.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    if h < 8 or w < 8:
        raise ConfigError(f"need h, w >= 8, got {h}x{w}")
    rng = np.random.default_rng(mix64(seed, "synthetic-task"))
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    bg_checker = ((((rows // 8) + (cols // 8)) % 2).astype(np.float32) * 2.0 - 1.0)

    samples: list[PairedSample] = []
    for i in range(n):
        n_rects = int(rng.integers(2, 6))
        rects = []
        for _ in range(n_rects):
            cls = int(rng.integers(1, N_RECT_CLASSES + 1))
            rh = int(rng.integers(max(4, h // 5), max(5, (3 * h) // 5) + 1))
            rw = int(rng.integers(max(4, w // 5), max(5, (3 * w) // 5) + 1))
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            rects.append((cls, r0, c0, rh, rw))

        class_map = np.zeros((h, w), dtype=np.int64)
        owner = np.full((h, w), -1, dtype=np.int64)
        for idx, (cls, r0, c0, rh, rw) in enumerate(rects):
            class_map[r0 : r0 + rh, c0 : c0 + rw] = cls
            owner[r0 : r0 + rh, c0 : c0 + rw] = idx

        x_img = _X_COLORS[class_map].astype(np.float32)  # (h, w, 3)

        y_img = _Y_COLORS[0][None, None, :] + _BG_AMPLITUDE * bg_checker[:, :, None]
        y_img = np.broadcast_to(y_img, (h, w, 3)).astype(np.float32).copy()
        for idx, (cls, r0, c0, rh, rw) in enumerate(rects):
            mask = owner == idx
            if not mask.any():
                continue
            u = rows - r0
            v = cols - c0
            pattern = _render_pattern(cls, np.broadcast_to(u, (h, w)), np.broadcast_to(v, (h, w)))
            ramp = (np.broadcast_to(v, (h, w)).astype(np.float32) / max(rw - 1, 1) - 0.5) * 2.0
            value = (
                _Y_COLORS[cls][None, None, :]
                + _PATTERN_AMPLITUDE * pattern[:, :, None]
                + _RAMP_AMPLITUDE * ramp[:, :, None]
            )
            y_img[mask] = value[mask]

        x_img = _snap_to_grid(x_img)
        y_img = _snap_to_grid(np.clip(y_img, -1.0, 1.0))
        x_t = torch.from_numpy(np.ascontiguousarray(x_img.transpose(2, 0, 1)))
        y_t = torch.from_numpy(np.ascontiguousarray(y_img.transpose(2, 0, 1)))
        samples.append(PairedSample(f"{seed & 0xFFFFFFFF:08x}-{i:06d}", x_t, y_t))
    return samples


def make_splits(
    samples: list[PairedSample], n_train: int, n_proxy: int, n_test: int, seed: int
) -> DatasetSplits:
    """Shuffle and partition samples into disjoint train/proxy/test splits.

    Proxy samples get their ground truth stripped; the originals are kept in
    the auditor-only `proxy_truths` side table.
    """
    for name, value in (("n_train", n_train), ("n_proxy", n_proxy), ("n_test", n_test)):
        if value < 0:
            raise ConfigError(f"{name} must be >= 0, got {value}")
    total = n_train + n_proxy + n_test
    if total > len(samples):
        raise ConfigError(
            f"requested {total} samples ({n_train}+{n_proxy}+{n_test}) "
            f"but only {len(samples)} available"
        )
    order = np.random.default_rng(mix64(seed, "splits")).permutation(len(samples))
    picked = [samples[int(j)] for j in order[:total]]
    train = picked[:n_train]
    proxy_raw = picked[n_train : n_train + n_proxy]
    test = picked[n_train + n_proxy : total]
    proxy_truths = {s.id: s._y for s in proxy_raw if s._y is not None}
    proxy = [s.strip_label() for s in proxy_raw]
    return DatasetSplits(train=train, proxy=proxy, test=test, proxy_truths=proxy_truths).validate()


def build_attack_set(splits: DatasetSplits, seed: int) -> AttackEvalSet:
    """All test samples become nonmembers; an equal number of members is
    drawn seed-uniformly (without replacement) from the train split."""
    n_test = len(splits.test)
    if n_test < 1:
        raise ConfigError("attack set needs a non-empty test split")
    if len(splits.train) < n_test:
        raise ConfigError(
            f"train split ({len(splits.train)}) smaller than test split ({n_test})"
        )
    rng = np.random.default_rng(mix64(seed, "attack-set"))
    chosen = rng.choice(len(splits.train), size=n_test, replace=False)
    members = [splits.train[int(j)] for j in chosen]
    return AttackEvalSet(members=members, nonmembers=list(splits.test))


# ---------------------------------------------------------------------------
# Disk layout: per split, <id>_x.png / <id>_y.png 8-bit RGB plus a manifest.
# ---------------------------------------------------------------------------


def _write_png(tensor: torch.Tensor, path: Path) -> None:
    arr = _to_u8(tensor.numpy().transpose(1, 2, 0))
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _read_png(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(np.ascontiguousarray(_from_u8(arr).transpose(2, 0, 1)))


def save_dataset(samples: list[PairedSample], path: str | Path) -> None:
    """Write one split directory: PNG pairs plus a manifest listing ids."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        check_image(sample.x, f"{sample.id} x")
        _write_png(sample.x, root / f"{sample.id}_x.png")
        if sample.labeled:
            y = sample._y
            check_image(y, f"{sample.id} y")
            _write_png(y, root / f"{sample.id}_y.png")
        entries.append({"id": sample.id, "labeled": sample.labeled})
    manifest = {"format_version": 1, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_paired_folder(path: str | Path) -> list[PairedSample]:
    """Load one split directory written by `save_dataset`.

    Without a manifest, pairs are discovered by filename; with one, a missing
    counterpart for a labeled id is an ingestion error naming the id.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset folder not found: {root}")
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        entries = manifest.get("samples", [])
    else:
        entries = [
            {"id": p.name[: -len("_x.png")], "labeled": None}
            for p in sorted(root.glob("*_x.png"))
        ]
    samples = []
    for entry in entries:
        sid = entry["id"]
        x_path = root / f"{sid}_x.png"
        y_path = root / f"{sid}_y.png"
        if not x_path.exists():
            raise DataError(f"missing input image for id {sid!r}: {x_path.name}")
        labeled = entry["labeled"] if entry["labeled"] is not None else y_path.exists()
        if labeled and not y_path.exists():
            raise DataError(f"missing ground-truth image for labeled id {sid!r}: {y_path.name}")
        x = _read_png(x_path)
        y = _read_png(y_path) if labeled else None
        samples.append(PairedSample(sid, x, y))
    return samples


def save_dataset_splits(splits: DatasetSplits, path: str | Path) -> None:
    """Write the full three-directory layout plus the split-membership manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", splits.train), ("proxy", splits.proxy), ("test", splits.test)):
        save_dataset(split, root / name)
    manifest = {
        "format_version": 1,
        "splits": {
            "train": [s.id for s in splits.train],
            "proxy": [s.id for s in splits.proxy],
            "test": [s.id for s in splits.test],
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset_splits(path: str | Path) -> DatasetSplits:
    """Load the three-directory layout; proxy ground truths are not on disk,
    so the auditor side table comes back empty."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing dataset manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    loaded: dict[str, list[PairedSample]] = {}
    for name in ("train", "proxy", "test"):
        folder = root / name
        split = load_paired_folder(folder) if folder.is_dir() else []
        by_id = {s.id: s for s in split}
        want = manifest.get("splits", {}).get(name, [])
        missing = [sid for sid in want if sid not in by_id]
        if missing:
            raise DataError(f"{name} split is missing ids listed in manifest: {missing[:5]}")
        loaded[name] = [by_id[sid] for sid in want]
    return DatasetSplits(
        train=loaded["train"], proxy=loaded["proxy"], test=loaded["test"]
    ).validate()
