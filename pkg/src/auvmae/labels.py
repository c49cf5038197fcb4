"""Frame-level action-unit label sequences: ingestion, statistics, augmentation.

Label CSV schema: header ``clip_id,frame,au_<id>,...``; one row per frame;
``frame`` is a 0-based contiguous integer per clip; label cells are ``0`` or
``1``. AU columns must be named ``au_<integer>`` and appear in ascending id
order.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .seeds import derive_seed
from .video import VideoClip


@dataclass
class LabelSequence:
    """Binary per-frame AU annotations for one clip (T x N matrix)."""

    au_ids: tuple[int, ...]
    frames: np.ndarray  # (T, N) of {0, 1}
    clip_id: str = ""

    def __post_init__(self) -> None:
        self.au_ids = tuple(int(a) for a in self.au_ids)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        if self.frames.ndim != 2:
            raise DataError(f"clip '{self.clip_id}': frames must be 2-d, got shape {self.frames.shape}")
        t, n = self.frames.shape
        if n != len(self.au_ids):
            raise DataError(f"clip '{self.clip_id}': {n} label columns for {len(self.au_ids)} AU ids")
        if n < 2:
            raise DataError(f"clip '{self.clip_id}': need at least 2 AUs, got {n}")
        if t < 2:
            raise DataError(f"clip '{self.clip_id}': need at least 2 frames, got {t}")
        if list(self.au_ids) != sorted(set(self.au_ids)):
            raise DataError(f"clip '{self.clip_id}': au_ids must be unique and ascending")
        bad = (self.frames != 0) & (self.frames != 1)
        if bad.any():
            raise DataError(f"clip '{self.clip_id}': label values must be 0 or 1")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_aus(self) -> int:
        return self.frames.shape[1]


@dataclass
class RateVector:
    """Per-AU occurrence rates over a dataset. Zero rates are legal here but
    rejected by class_weights; they are flagged with a warning on creation."""

    au_ids: tuple[int, ...]
    rates: np.ndarray

    def __post_init__(self) -> None:
        self.au_ids = tuple(int(a) for a in self.au_ids)
        self.rates = np.asarray(self.rates, dtype=np.float64)
        if self.rates.shape != (len(self.au_ids),):
            raise DataError("rates must be one value per AU")
        if (self.rates < 0).any() or (self.rates > 1).any():
            raise DataError("occurrence rates must lie in [0, 1]")
        zero = self.zero_rate_au_ids()
        if zero:
            warnings.warn(f"AUs with zero occurrence rate: {zero}; class_weights will reject them")

    def zero_rate_au_ids(self) -> tuple[int, ...]:
        return tuple(a for a, r in zip(self.au_ids, self.rates) if r == 0.0)


@dataclass
class WeightVector:
    au_ids: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.au_ids = tuple(int(a) for a in self.au_ids)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.au_ids),):
            raise DataError("weights must be one value per AU")
        if (self.weights <= 0).any():
            raise DataError("class weights must be positive")


@dataclass
class AugmentPlan:
    """Minority-clip interception plan plus pixel transform parameters."""

    minority_aus: tuple[int, ...]
    majority_run_threshold: int = 15
    seed: int = 0
    crop_min_fraction: float = 0.8

    def __post_init__(self) -> None:
        self.minority_aus = tuple(int(a) for a in self.minority_aus)
        if not self.minority_aus:
            raise DataError("minority AU set must be nonempty")
        if self.majority_run_threshold < 1:
            raise DataError("majority run threshold must be >= 1")
        if not 0.0 < self.crop_min_fraction <= 1.0:
            raise DataError("crop_min_fraction must lie in (0, 1]")

    @classmethod
    def from_json(cls, path: str | Path) -> "AugmentPlan":
        doc = json.loads(Path(path).read_text())
        try:
            return cls(
                minority_aus=tuple(doc["minority_aus"]),
                majority_run_threshold=int(doc.get("majority_run_threshold", 15)),
                seed=int(doc.get("seed", 0)),
                crop_min_fraction=float(doc.get("crop_min_fraction", 0.8)),
            )
        except KeyError as exc:
            raise DataError(f"{path}: augment plan missing key {exc}") from exc

    def to_json(self, path: str | Path) -> None:
        doc = {
            "minority_aus": list(self.minority_aus),
            "majority_run_threshold": self.majority_run_threshold,
            "seed": self.seed,
            "crop_min_fraction": self.crop_min_fraction,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _au_columns(header: list[str], path: Path) -> list[int]:
    if header[:2] != ["clip_id", "frame"]:
        raise DataError(f"{path}: header must start with clip_id,frame")
    ids = []
    for col in header[2:]:
        if not col.startswith("au_"):
            raise DataError(f"{path}: label column '{col}' must be named au_<id>")
        try:
            ids.append(int(col[3:]))
        except ValueError:
            raise DataError(f"{path}: label column '{col}' has a non-integer AU id") from None
    if len(ids) < 2:
        raise DataError(f"{path}: need at least 2 AU columns")
    if ids != sorted(set(ids)):
        raise DataError(f"{path}: AU columns must be unique and ascending")
    return ids


def load_label_sequences(path: str | Path) -> list[LabelSequence]:
    """Parse a label CSV into one LabelSequence per clip, frames in index order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"label file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        au_ids = _au_columns(header, path)
        n = len(au_ids)
        rows: dict[str, dict[int, list[int]]] = {}
        order: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != n + 2:
                raise DataError(f"{path}:{line_no}: expected {n + 2} cells, got {len(row)}")
            clip_id = row[0]
            try:
                frame = int(row[1])
            except ValueError:
                raise DataError(f"{path}:{line_no}: frame index '{row[1]}' is not an integer") from None
            if frame < 0:
                raise DataError(f"{path}:{line_no}: frame index must be >= 0")
            labels = []
            for cell in row[2:]:
                if cell not in ("0", "1"):
                    raise DataError(f"{path}:{line_no}: label value '{cell}' is not 0 or 1")
                labels.append(int(cell))
            clip = rows.setdefault(clip_id, {})
            if clip_id not in order:
                order.append(clip_id)
            if frame in clip:
                raise DataError(f"{path}:{line_no}: duplicate (clip, frame) key ({clip_id}, {frame})")
            clip[frame] = labels
    sequences = []
    for clip_id in order:
        frames = rows[clip_id]
        indices = sorted(frames)
        if indices != list(range(len(indices))):
            raise DataError(f"{path}: clip '{clip_id}' frame indices are not contiguous from 0")
        matrix = np.array([frames[i] for i in indices], dtype=np.int64)
        sequences.append(LabelSequence(au_ids=tuple(au_ids), frames=matrix, clip_id=clip_id))
    return sequences


def save_label_sequences(path: str | Path, sequences: list[LabelSequence]) -> None:
    if not sequences:
        raise DataError("nothing to write: empty sequence list")
    au_ids = sequences[0].au_ids
    for seq in sequences:
        if seq.au_ids != au_ids:
            raise DataError(f"clip '{seq.clip_id}': au_ids differ from the first clip")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "frame", *[f"au_{a}" for a in au_ids]])
        for seq in sequences:
            for t in range(seq.num_frames):
                writer.writerow([seq.clip_id, t, *seq.frames[t].tolist()])


def _check_shared_au_ids(dataset: list[LabelSequence]) -> tuple[int, ...]:
    if not dataset:
        raise DataError("empty dataset")
    au_ids = dataset[0].au_ids
    for seq in dataset[1:]:
        if seq.au_ids != au_ids:
            raise DataError(f"clip '{seq.clip_id}': au_ids {seq.au_ids} differ from {au_ids}")
    return au_ids


def occurrence_rates(dataset: list[LabelSequence]) -> RateVector:
    """r_i = positive frames / total frames over the concatenated dataset."""
    au_ids = _check_shared_au_ids(dataset)
    total = sum(seq.num_frames for seq in dataset)
    positives = np.zeros(len(au_ids), dtype=np.int64)
    for seq in dataset:
        positives += seq.frames.sum(axis=0)
    return RateVector(au_ids=au_ids, rates=positives / float(total))


def class_weights(rates: RateVector) -> WeightVector:
    """w_i = N * (1/r_i) / sum_j (1/r_j). Weights sum to N by construction."""
    zero = rates.zero_rate_au_ids()
    if zero:
        raise DataError(f"cannot weight AUs with zero occurrence rate: {zero}; drop them first")
    inverse = 1.0 / rates.rates
    n = len(rates.au_ids)
    return WeightVector(au_ids=rates.au_ids, weights=n * inverse / inverse.sum())


def _minority_active(seq: LabelSequence, minority: tuple[int, ...]) -> np.ndarray:
    cols = [seq.au_ids.index(a) for a in minority]
    return seq.frames[:, cols].any(axis=1)


def extract_minority_windows(seq: LabelSequence, plan: AugmentPlan) -> list[tuple[int, int]]:
    """Scan for sub-clips per the interception rule; returns [start, end) spans.

    A window opens at the first frame where any minority AU is active and
    closes once `majority_run_threshold` consecutive frames contain no active
    minority AU (those trailing frames are included). The scan resumes after
    each close, so one source clip can yield several disjoint windows.
    """
    for a in plan.minority_aus:
        if a not in seq.au_ids:
            raise DataError(f"minority AU {a} not present in clip '{seq.clip_id}'")
    active = _minority_active(seq, plan.minority_aus)
    windows = []
    t, T = 0, seq.num_frames
    while t < T:
        if not active[t]:
            t += 1
            continue
        start = t
        quiet = 0
        t += 1
        while t < T:
            quiet = 0 if active[t] else quiet + 1
            t += 1
            if quiet >= plan.majority_run_threshold:
                break
        windows.append((start, t))
    return [(s, e) for s, e in windows if e - s >= 2]


def _random_flip_crop(pixels: np.ndarray, rng: np.random.Generator, crop_min: float) -> np.ndarray:
    out = pixels.copy()
    if rng.random() < 0.5:
        out = out[:, :, ::-1, :]
    t, h, w, c = out.shape
    frac = rng.uniform(crop_min, 1.0)
    ch, cw = max(1, int(round(frac * h))), max(1, int(round(frac * w)))
    y0 = rng.integers(0, h - ch + 1)
    x0 = rng.integers(0, w - cw + 1)
    cropped = out[:, y0 : y0 + ch, x0 : x0 + cw, :]
    return _resize_bilinear(cropped, h, w)


def _resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling, per frame and channel."""
    t, h, w, c = pixels.shape
    if (h, w) == (out_h, out_w):
        return np.ascontiguousarray(pixels)
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None, None]
    wx = (xs - x0)[None, None, :, None]
    p00 = pixels[:, y0][:, :, x0]
    p01 = pixels[:, y0][:, :, x1]
    p10 = pixels[:, y1][:, :, x0]
    p11 = pixels[:, y1][:, :, x1]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return np.ascontiguousarray((top * (1 - wy) + bot * wy).astype(pixels.dtype))


def augment_dataset(
    dataset: list[tuple[VideoClip, LabelSequence]], plan: AugmentPlan
) -> list[tuple[VideoClip, LabelSequence]]:
    """Append flip/crop-transformed minority sub-clips to the dataset.

    Labels inside extracted windows are copied verbatim; transforms touch
    pixels only. Clips with no minority activation contribute nothing.
    """
    out = list(dataset)
    for clip, seq in dataset:
        if clip.num_frames != seq.num_frames:
            raise DataError(f"clip '{seq.clip_id}': video length {clip.num_frames} != label length {seq.num_frames}")
        for k, (start, end) in enumerate(extract_minority_windows(seq, plan)):
            rng = np.random.default_rng(derive_seed(plan.seed, "augment", seq.clip_id, k))
            pixels = _random_flip_crop(clip.pixels[start:end], rng, plan.crop_min_fraction)
            new_id = f"{seq.clip_id}_aug{k}"
            out.append(
                (
                    VideoClip(pixels=np.clip(pixels, 0.0, 1.0), frame_rate=clip.frame_rate, clip_id=new_id),
                    LabelSequence(au_ids=seq.au_ids, frames=seq.frames[start:end].copy(), clip_id=new_id),
                )
            )
    return out
