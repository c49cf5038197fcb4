"""Video clips, tubelet tokenization, tube masks, and the raw clip container.

A clip is a T x H x W x C float array with values in [0, 1]. Tokenization is a
lossless rearrangement into space-time tubelets: each token covers `tubelet_t`
consecutive frames and a `patch` x `patch` spatial window, flattened row-major
(dt, dy, dx, c) into one vector.

Container format (little-endian throughout), one file holding many clips:

    magic   4 bytes  b"AUVV"
    version u32      1
    count   u32      number of clips
    per clip:
        id_len     u16     byte length of the UTF-8 clip id
        id         bytes   clip id
        T,H,W,C    4x u32  clip dimensions
        frame_rate f32     informational metadata
        pixels     T*H*W*C f32, frame-major row-major order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"AUVV"
_VERSION = 1


@dataclass
class VideoClip:
    pixels: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    frame_rate: float = 30.0
    clip_id: str = ""
    source_len: int | None = None  # original frame count before downsampling

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 4:
            raise DataError(f"clip '{self.clip_id}': pixels must be (T, H, W, C), got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(f"clip '{self.clip_id}': pixel values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def original_len(self) -> int:
        """Frame count of the source clip, surviving temporal downsampling."""
        return self.source_len if self.source_len is not None else self.num_frames


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (n_t, n_h, n_w, dim) flattened tubelet vectors
    tubelet_t: int
    patch: int
    channels: int

    @property
    def blocks(self) -> int:
        return self.tokens.shape[0]

    @property
    def spatial(self) -> int:
        return self.tokens.shape[1] * self.tokens.shape[2]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[3]


@dataclass
class MaskSpec:
    visible: np.ndarray  # (n_t, spatial) boolean, True = token fed to encoder
    kind: str  # "tube" or "none"
    ratio: float
    seed: int = 0

    def __post_init__(self) -> None:
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.visible.ndim != 2:
            raise DataError("mask must be (temporal_blocks, spatial_positions)")
        if self.kind not in ("tube", "none"):
            raise DataError(f"unknown mask kind '{self.kind}'")

    @property
    def masked(self) -> np.ndarray:
        return ~self.visible

    def masked_per_block(self) -> np.ndarray:
        return (~self.visible).sum(axis=1)

    def visible_per_block(self) -> np.ndarray:
        return self.visible.sum(axis=1)


def tokenize(clip: VideoClip, tubelet_t: int, patch: int) -> TokenGrid:
    """Rearrange pixels into flattened tubelet vectors (lossless)."""
    t, h, w, c = clip.pixels.shape
    if t % tubelet_t or h % patch or w % patch:
        raise DataError(
            f"clip dims (T={t}, H={h}, W={w}) not divisible by tubelet ({tubelet_t}, {patch})"
        )
    n_t, n_h, n_w = t // tubelet_t, h // patch, w // patch
    grid = (
        clip.pixels.reshape(n_t, tubelet_t, n_h, patch, n_w, patch, c)
        .transpose(0, 2, 4, 1, 3, 5, 6)
        .reshape(n_t, n_h, n_w, tubelet_t * patch * patch * c)
    )
    return TokenGrid(tokens=np.ascontiguousarray(grid), tubelet_t=tubelet_t, patch=patch, channels=c)


def detokenize(grid: TokenGrid) -> np.ndarray:
    """Exact inverse of tokenize; returns the (T, H, W, C) pixel array."""
    n_t, n_h, n_w, _ = grid.tokens.shape
    t_p, p, c = grid.tubelet_t, grid.patch, grid.channels
    pixels = (
        grid.tokens.reshape(n_t, n_h, n_w, t_p, p, p, c)
        .transpose(0, 3, 1, 4, 2, 5, 6)
        .reshape(n_t * t_p, n_h * p, n_w * p, c)
    )
    return np.ascontiguousarray(pixels)


def _visible_count(ratio: float, spatial: int) -> int:
    # The visible fraction is computed as the decimal complement of the ratio
    # (1 - 0.9 read as 0.1 exactly, not 0.09999999999999998) and rounded
    # half-to-even, so "ratio 0.9" keeps round(0.1 * S) positions visible.
    complement = float(Decimal(1) - Decimal(repr(float(ratio))))
    return int(round(complement * spatial))


def make_tube_mask(blocks: int, spatial: int, ratio: float, seed: int) -> MaskSpec:
    """Sample one spatial mask pattern and repeat it for every temporal block.

    The masked-position set is drawn without replacement from the seeded
    generator; identical seeds give identical masks.
    """
    if not 0.0 <= ratio < 1.0:
        raise DataError(f"mask ratio must lie in [0, 1), got {ratio}")
    visible_count = _visible_count(ratio, spatial)
    masked_count = spatial - visible_count
    rng = np.random.default_rng(seed)
    masked_positions = rng.choice(spatial, size=masked_count, replace=False)
    row = np.ones(spatial, dtype=bool)
    row[masked_positions] = False
    visible = np.repeat(row[None, :], blocks, axis=0)
    return MaskSpec(visible=visible, kind="tube", ratio=float(ratio), seed=seed)


def no_mask(blocks: int, spatial: int) -> MaskSpec:
    return MaskSpec(visible=np.ones((blocks, spatial), dtype=bool), kind="none", ratio=0.0)


def temporal_downsample(clip: VideoClip, rate: int) -> VideoClip:
    """Keep frames 0, rate, 2*rate, ...; records the original length."""
    if rate < 1:
        raise DataError(f"downsample rate must be >= 1, got {rate}")
    if rate == 1:
        return clip
    t = clip.num_frames
    if t % rate:
        raise DataError(f"frame count {t} not divisible by downsample rate {rate}")
    return replace(
        clip,
        pixels=np.ascontiguousarray(clip.pixels[::rate]),
        source_len=clip.original_len,
    )


def save_video_clips(path: str | Path, clips: list[VideoClip]) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(clips)))
        for clip in clips:
            ident = clip.clip_id.encode("utf-8")
            t, h, w, c = clip.pixels.shape
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<IIIIf", t, h, w, c, float(clip.frame_rate)))
            fh.write(np.ascontiguousarray(clip.pixels, dtype="<f4").tobytes())


def load_video_clips(path: str | Path) -> list[VideoClip]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: not a clip container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    clips: list[VideoClip] = []
    offset = 12
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        ident = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        t, h, w, c, rate = struct.unpack_from("<IIIIf", data, offset)
        offset += 20
        n = t * h * w * c
        pixels = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(t, h, w, c)
        offset += 4 * n
        clips.append(VideoClip(pixels=pixels.copy(), frame_rate=rate, clip_id=ident))
    if offset != len(data):
        raise DataError(f"{path}: trailing bytes after last clip")
    return clips
