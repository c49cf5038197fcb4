"""Toy masked video autoencoder and per-frame AU classifier.

The encoder embeds visible tubelet tokens with learned grid-position
embeddings and runs a small pre-norm transformer; the decoder fills masked
positions with a learned mask token and reconstructs tubelet vectors. The
classification head mean-pools encoder latents per temporal block, repeats
each pooled vector across the original frames that block covers, adds a
per-frame position embedding, and maps through a two-layer MLP to per-frame
sigmoid probabilities — so every input level (full, downsampled, or tube
masked frames) yields one probability row per ORIGINAL frame.

Checkpoint file layout (little-endian):

    magic   4 bytes  b"AUVC"
    version u32      1
    hdr_len u64      byte length of the UTF-8 header JSON
    header  bytes    {"config": {...}, "step": int}
    count   u32      number of parameter arrays, sorted by name
    per array:
        name_len u16, name bytes,
        dtype    u8 (0 = float32, 1 = float64, 2 = int64),
        ndim     u8, dims ndim x u64,
        data     raw little-endian values
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import DataError, NumericError
from .knowledge import InterKnowledge, IntraKnowledge
from .labels import LabelSequence, WeightVector
from .losses import (
    LossReport,
    LossWeights,
    inter_loss,
    intra_loss,
    reconstruction_loss,
    total_loss,
    weighted_bce,
)
from .seeds import derive_seed
from .video import MaskSpec, TokenGrid, VideoClip, make_tube_mask, no_mask, temporal_downsample, tokenize

LEVELS = ("video", "frame", "patch")

_CKPT_MAGIC = b"AUVC"
_CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class ModelConfig:
    au_count: int = 4
    clip_len: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    tubelet_t: int = 2
    patch: int = 8
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 2.0
    downsample_rate: int = 1
    frame_level_rate: int = 4
    pretrain_mask_ratio: float = 0.9
    patch_mask_ratio: float = 0.5
    learning_rate: float = 1e-3
    final_lr_fraction: float = 0.2  # linear decay target during finetuning
    pretrain_steps: int = 200
    finetune_steps: int = 300
    batch_clips: int = 0  # clips per finetuning step; 0 = whole dataset
    lambda_cls: float = 1.0
    lambda_intra: float = 0.01
    lambda_inter: float = 0.01
    seed: int = 0
    au_ids: tuple[int, ...] = ()  # set when a classifier head is trained

    def __post_init__(self) -> None:
        self.au_ids = tuple(int(a) for a in self.au_ids)
        if self.au_ids and len(self.au_ids) != self.au_count:
            raise DataError(f"{len(self.au_ids)} au_ids for au_count={self.au_count}")
        for name in ("au_count", "clip_len", "height", "width", "channels", "tubelet_t", "patch",
                     "embed_dim", "encoder_depth", "encoder_heads", "decoder_dim", "decoder_depth",
                     "decoder_heads", "downsample_rate", "frame_level_rate", "pretrain_steps",
                     "finetune_steps"):
            if getattr(self, name) < 1:
                raise DataError(f"config field {name} must be positive")
        for name in ("pretrain_mask_ratio", "patch_mask_ratio"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise DataError(f"config field {name} must lie in [0, 1)")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise DataError("final_lr_fraction must lie in (0, 1]")
        if self.batch_clips < 0:
            raise DataError("batch_clips must be >= 0")
        if self.clip_len % (self.tubelet_t * self.downsample_rate):
            raise DataError("clip_len must be divisible by tubelet_t * downsample_rate")
        if self.height % self.patch or self.width % self.patch:
            raise DataError("height and width must be divisible by the patch size")
        if self.embed_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise DataError("embedding widths must be divisible by head counts")

    def rate_for_level(self, level: str) -> int:
        if level not in LEVELS:
            raise DataError(f"unknown level '{level}', expected one of {LEVELS}")
        return self.frame_level_rate if level == "frame" else 1

    @property
    def spatial(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def token_dim(self) -> int:
        return self.tubelet_t * self.patch * self.patch * self.channels

    def blocks(self, rate: int | None = None) -> int:
        rate = self.downsample_rate if rate is None else rate
        if self.clip_len % (self.tubelet_t * rate):
            raise DataError(f"clip_len {self.clip_len} not divisible by tubelet*rate {self.tubelet_t * rate}")
        return self.clip_len // rate // self.tubelet_t

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, self.lambda_intra, self.lambda_inter)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class PredictionBatch:
    probs: np.ndarray  # (original_T, N) sigmoid outputs
    level: str
    clip_id: str = ""

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise DataError("prediction probs must be (T, N)")
        if self.level not in LEVELS:
            raise DataError(f"unknown level '{self.level}'")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        positions = config.blocks() * config.spatial
        self.token_embed = nn.Linear(config.token_dim, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(positions, config.embed_dim))
        self.blocks = nn.ModuleList(
            _Block(config.embed_dim, config.encoder_heads, config.mlp_ratio)
            for _ in range(config.encoder_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, vectors: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Encode visible token vectors carrying their grid positions."""
        if vectors.shape[0] == 0:
            raise DataError("encoder needs at least one visible token")
        if positions.max() >= self.pos_embed.shape[0]:
            raise DataError("token position outside the configured grid")
        x = self.token_embed(vectors) + self.pos_embed[positions]
        x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return self.norm(x).squeeze(0)


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        positions = config.blocks() * config.spatial
        self.embed = nn.Linear(config.embed_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.decoder_dim))
        self.pos_embed = nn.Parameter(torch.zeros(positions, config.decoder_dim))
        self.blocks = nn.ModuleList(
            _Block(config.decoder_dim, config.decoder_heads, config.mlp_ratio)
            for _ in range(config.decoder_depth)
        )
        self.norm = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, config.token_dim)

    def forward(self, latents: torch.Tensor, visible_positions: torch.Tensor, masked_positions: torch.Tensor) -> torch.Tensor:
        """Reconstruct tubelet vectors at masked grid positions."""
        total = self.pos_embed.shape[0]
        dim = self.pos_embed.shape[1]
        x = self.mask_token.expand(total, dim) + self.pos_embed
        x = torch.index_put(x, (visible_positions,), self.embed(latents) + self.pos_embed[visible_positions])
        x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        x = self.head(self.norm(x)).squeeze(0)
        return x[masked_positions]


class ClassifierHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(config.clip_len, config.embed_dim))
        self.fc1 = nn.Linear(config.embed_dim, config.embed_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(config.embed_dim, config.au_count)

    def forward(self, frame_features: torch.Tensor) -> torch.Tensor:
        h = frame_features + self.pos_embed[: frame_features.shape[0]]
        return torch.sigmoid(self.fc2(self.act(self.fc1(h))))


def _deterministic_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed & 0xFFFF_FFFF)
    for name, param in sorted(module.named_parameters()):
        with torch.no_grad():
            if name.endswith("bias") or "mask_token" in name:
                param.zero_()
            elif "norm" in name and param.ndim == 1:
                param.fill_(1.0)
            elif "pos_embed" in name:
                param.copy_(torch.randn(param.shape, generator=gen) * 0.02)
            else:
                bound = 1.0 / float(param.shape[-1]) ** 0.5
                param.copy_((torch.rand(param.shape, generator=gen) * 2 - 1) * bound)


def _grid_positions(mask: MaskSpec) -> tuple[torch.Tensor, torch.Tensor]:
    flat_visible = torch.as_tensor(mask.visible.reshape(-1))
    idx = torch.arange(flat_visible.shape[0])
    return idx[flat_visible], idx[~flat_visible]


def _grid_tensor(grid: TokenGrid) -> torch.Tensor:
    b, s, d = grid.blocks, grid.spatial, grid.token_dim
    return torch.from_numpy(np.ascontiguousarray(grid.tokens.reshape(b, s, d), dtype=np.float32))


def encode(grid: TokenGrid, mask: MaskSpec, encoder: Encoder) -> torch.Tensor:
    """Latents for the visible tokens of a grid, in row-major grid order."""
    tokens = _grid_tensor(grid)
    b, s, _ = tokens.shape
    if mask.visible.shape != (b, s):
        raise DataError(f"mask shape {mask.visible.shape} does not match grid ({b}, {s})")
    visible_pos, _ = _grid_positions(mask)
    return encoder(tokens.reshape(b * s, -1)[visible_pos], visible_pos)


def decode_reconstruct(latents: torch.Tensor, mask: MaskSpec, decoder: Decoder) -> torch.Tensor:
    """One reconstructed tubelet vector per masked token (row-major order)."""
    visible_pos, masked_pos = _grid_positions(mask)
    if latents.shape[0] != visible_pos.shape[0]:
        raise DataError(
            f"{latents.shape[0]} latents for {visible_pos.shape[0]} visible tokens"
        )
    if masked_pos.numel() == 0:
        raise DataError("mask has no masked tokens to reconstruct")
    return decoder(latents, visible_pos, masked_pos)


def classify_probs(
    latents: torch.Tensor,
    mask: MaskSpec,
    original_t: int,
    head: ClassifierHead,
) -> torch.Tensor:
    """Per-frame probability tensor (original_t, N) from visible-token latents;
    stays on the autodiff graph for training."""
    blocks = mask.visible.shape[0]
    if original_t % blocks:
        raise DataError(f"original length {original_t} not divisible into {blocks} temporal blocks")
    visible_pos, _ = _grid_positions(mask)
    spatial = mask.visible.shape[1]
    block_ids = visible_pos // spatial
    sums = torch.zeros(blocks, latents.shape[1], dtype=latents.dtype)
    sums = sums.index_add(0, block_ids, latents)
    counts = torch.as_tensor(mask.visible_per_block(), dtype=latents.dtype).unsqueeze(1)
    if (counts == 0).any():
        raise DataError("a temporal block has no visible tokens to pool")
    pooled = sums / counts
    frames_per_block = original_t // blocks
    frame_features = pooled.repeat_interleave(frames_per_block, dim=0)
    return head(frame_features)


def classify(
    latents: torch.Tensor,
    mask: MaskSpec,
    original_t: int,
    head: ClassifierHead,
    level: str = "video",
    clip_id: str = "",
) -> PredictionBatch:
    """Per-frame predictions for one clip, one row per ORIGINAL frame."""
    probs = classify_probs(latents, mask, original_t, head)
    return PredictionBatch(probs=probs.detach().numpy().astype(np.float64), level=level, clip_id=clip_id)


def _forward_probs(
    encoder: Encoder,
    head: ClassifierHead,
    clip: VideoClip,
    level: str,
    config: ModelConfig,
    mask_seed: int,
) -> torch.Tensor:
    rate = config.rate_for_level(level)
    x = temporal_downsample(clip, rate)
    grid = tokenize(x, config.tubelet_t, config.patch)
    if level == "patch":
        mask = make_tube_mask(grid.blocks, grid.spatial, config.patch_mask_ratio, mask_seed)
    else:
        mask = no_mask(grid.blocks, grid.spatial)
    latents = encode(grid, mask, encoder)
    return classify_probs(latents, mask, clip.original_len, head)


def _check_clip(clip: VideoClip, config: ModelConfig) -> None:
    t, h, w, c = clip.pixels.shape
    if (t, h, w, c) != (config.clip_len, config.height, config.width, config.channels):
        raise DataError(
            f"clip '{clip.clip_id}' shape {(t, h, w, c)} does not match config "
            f"({config.clip_len}, {config.height}, {config.width}, {config.channels})"
        )


def _state_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": value.detach().cpu().numpy().copy()
        for name, value in module.state_dict().items()
    }


def _load_state(module: nn.Module, params: dict[str, np.ndarray], prefix: str) -> None:
    wanted = {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + ".")}
    expected = set(module.state_dict().keys())
    if set(wanted) != expected:
        missing = sorted(expected - set(wanted))
        raise DataError(f"checkpoint missing parameters for '{prefix}': {missing[:4] or sorted(set(wanted) - expected)[:4]}")
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in wanted.items()})


StepCallback = Callable[[int, LossReport], None]


def pretrain(corpus: list[VideoClip], config: ModelConfig, on_step: StepCallback | None = None) -> Checkpoint:
    """Masked-reconstruction pretraining; the temporal downsampling rate is
    taken from the config so it matches the intended fine-tuning subtask."""
    if not corpus:
        raise DataError("pretraining corpus is empty")
    for clip in corpus:
        _check_clip(clip, config)
    encoder = Encoder(config)
    decoder = Decoder(config)
    _deterministic_init(encoder, derive_seed(config.seed, "pretrain", "encoder-init"))
    _deterministic_init(decoder, derive_seed(config.seed, "pretrain", "decoder-init"))
    optimizer = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()), lr=config.learning_rate
    )
    order = np.random.default_rng(derive_seed(config.seed, "pretrain", "order")).permutation(len(corpus))
    for step in range(config.pretrain_steps):
        clip = corpus[int(order[step % len(order)])]
        x = temporal_downsample(clip, config.downsample_rate)
        grid = tokenize(x, config.tubelet_t, config.patch)
        mask = make_tube_mask(
            grid.blocks, grid.spatial, config.pretrain_mask_ratio,
            derive_seed(config.seed, "pretrain", "mask", step),
        )
        latents = encode(grid, mask, encoder)
        recon = decode_reconstruct(latents, mask, decoder)
        loss = reconstruction_loss(_grid_tensor(grid), recon, mask)
        if not torch.isfinite(loss):
            raise NumericError(f"pretraining diverged at step {step}: loss={loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if on_step is not None:
            value = float(loss.item())
            on_step(step, LossReport(total=value, cls=0.0, intra=0.0, inter=0.0, recon=value))
    params = {**_state_arrays(encoder, "encoder"), **_state_arrays(decoder, "decoder")}
    return Checkpoint(config=config, params=params, step=config.pretrain_steps)


def finetune(
    dataset: list[tuple[VideoClip, LabelSequence]],
    priors: tuple[IntraKnowledge, InterKnowledge],
    weights: WeightVector,
    level: str,
    init: Checkpoint,
    config: ModelConfig | None = None,
    on_step: StepCallback | None = None,
) -> Checkpoint:
    """Train the per-frame classifier at one input level, starting from a
    pretrained encoder. Knowledge priors must come from the training split."""
    config = init.config if config is None else config
    if not dataset:
        raise DataError("finetuning dataset is empty")
    k_intra, k_inter = priors
    n = dataset[0][1].num_aus
    if len(k_intra.au_ids) != n or len(k_inter.au_ids) != n:
        raise DataError(f"priors sized for {len(k_intra.au_ids)} AUs, dataset has {n}")
    config = dataclasses.replace(config, au_count=n, au_ids=dataset[0][1].au_ids)
    required_rate = config.rate_for_level(level)
    if config.downsample_rate != required_rate:
        raise DataError(
            f"level '{level}' needs downsample rate {required_rate}, checkpoint was built at "
            f"{config.downsample_rate}; pretrain with the matching rate"
        )
    for clip, seq in dataset:
        _check_clip(clip, config)
        if seq.num_aus != n:
            raise DataError(f"clip '{seq.clip_id}' has {seq.num_aus} AUs, model expects {n}")
        if seq.num_frames != clip.num_frames:
            raise DataError(f"clip '{seq.clip_id}': label/video length mismatch")
    encoder = Encoder(config)
    _load_state(encoder, init.params, "encoder")
    head = ClassifierHead(config)
    _deterministic_init(head, derive_seed(config.seed, "finetune", level, "head-init"))
    loss_weights = config.loss_weights()
    optimizer = torch.optim.Adam(
        list(encoder.parameters()) + list(head.parameters()), lr=config.learning_rate
    )
    order = np.random.default_rng(derive_seed(config.seed, "finetune", level, "order")).permutation(len(dataset))
    batch = len(dataset) if config.batch_clips == 0 else min(config.batch_clips, len(dataset))
    label_tensors = [torch.from_numpy(seq.frames.astype(np.float32)) for _, seq in dataset]
    steps = config.finetune_steps
    for step in range(steps):
        decay = 1.0 - (1.0 - config.final_lr_fraction) * step / max(1, steps - 1)
        for group in optimizer.param_groups:
            group["lr"] = config.learning_rate * decay
        indices = [int(order[(step * batch + k) % len(order)]) for k in range(batch)]
        probs_list = [
            _forward_probs(
                encoder, head, dataset[i][0], level, config,
                mask_seed=derive_seed(config.seed, "finetune", level, "mask", step, i),
            )
            for i in indices
        ]
        cls = weighted_bce(
            torch.cat(probs_list), torch.cat([label_tensors[i] for i in indices]), weights
        )
        l_intra = intra_loss(torch.cat(probs_list), k_intra)
        l_inter = inter_loss(probs_list, k_inter)
        loss = total_loss(cls, l_intra, l_inter, loss_weights)
        if not torch.isfinite(loss):
            raise NumericError(f"finetuning diverged at step {step}: loss={loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if on_step is not None:
            on_step(
                step,
                LossReport(
                    total=float(loss.item()), cls=float(cls.item()),
                    intra=float(l_intra.item()), inter=float(l_inter.item()),
                ),
            )
    params = {**_state_arrays(encoder, "encoder"), **_state_arrays(head, "head")}
    return Checkpoint(config=config, params=params, step=init.step + config.finetune_steps)


def predict(checkpoint: Checkpoint, clip: VideoClip, level: str, mask_seed: int = 0) -> PredictionBatch:
    """Deterministic per-frame probabilities for one clip at a given level."""
    config = checkpoint.config
    _check_clip(clip, config)
    required_rate = config.rate_for_level(level)
    if config.downsample_rate != required_rate:
        raise DataError(
            f"checkpoint built at downsample rate {config.downsample_rate} cannot serve level '{level}'"
        )
    encoder = Encoder(config)
    _load_state(encoder, checkpoint.params, "encoder")
    head = ClassifierHead(config)
    _load_state(head, checkpoint.params, "head")
    encoder.eval()
    head.eval()
    with torch.no_grad():
        probs = _forward_probs(encoder, head, clip, level, config, mask_seed=mask_seed)
    return PredictionBatch(probs=probs.numpy().astype(np.float64), level=level, clip_id=clip.clip_id)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    header = json.dumps(
        {"config": checkpoint.config.to_dict(), "step": checkpoint.step},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(checkpoint.params)))
        for name in sorted(checkpoint.params):
            arr = np.ascontiguousarray(checkpoint.params[name])
            if arr.dtype not in _DTYPE_TAGS:
                arr = arr.astype(np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hdr_len,) = struct.unpack_from("<Q", data, 8)
    offset = 16
    header = json.loads(data[offset : offset + hdr_len].decode("utf-8"))
    offset += hdr_len
    config = ModelConfig.from_dict(header["config"])
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tag, ndim = struct.unpack_from("<BB", data, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += 8 * ndim
        if tag not in _TAG_DTYPES:
            raise DataError(f"{path}: unknown dtype tag {tag} for '{name}'")
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=n, offset=offset)
        offset += n * dtype.itemsize
        params[name] = arr.reshape(dims).astype(dtype)
    if offset != len(data):
        raise DataError(f"{path}: trailing bytes after last parameter")
    return Checkpoint(config=config, params=params, step=int(header["step"]))
