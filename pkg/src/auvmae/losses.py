"""Training losses with autodiff-checked gradients.

The hard-threshold operator forwards the indicator [p > 0.5] and passes
upstream gradients through unchanged, so statistics of binarized predictions
stay trainable. Norm-based losses use sqrt(x + eps) - sqrt(eps), which is
exactly zero at zero residual and has a bounded gradient there.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError
from .knowledge import (
    InterKnowledge,
    IntraKnowledge,
    cooccurrence_from_scores,
    mean_state_tensor,
)
from .labels import WeightVector
from .video import MaskSpec

_CLAMP_EPS = 1e-7  # probability clamp inside the weighted BCE
_NORM_EPS = 1e-12  # smoothing inside Frobenius-norm square roots


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_intra: float = 0.01
    lambda_inter: float = 0.01

    def __post_init__(self) -> None:
        if min(self.lambda_cls, self.lambda_intra, self.lambda_inter) < 0:
            raise DataError("loss weights must be nonnegative")


@dataclass
class LossReport:
    total: float
    cls: float
    intra: float
    inter: float
    recon: float | None = None

    def json_line(self, step: int) -> str:
        doc = {
            "step": step,
            "total": self.total,
            "cls": self.cls,
            "intra": self.intra,
            "inter": self.inter,
        }
        if self.recon is not None:
            doc["recon"] = self.recon
        return json.dumps(doc, sort_keys=True)


class _HardThreshold(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p: torch.Tensor) -> torch.Tensor:
        return (p > 0.5).to(p.dtype)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor) -> torch.Tensor:
        return grad_output


def straight_through_threshold(p: torch.Tensor) -> torch.Tensor:
    """Forward [p > 0.5]; backward is the identity on upstream gradients."""
    p = torch.as_tensor(p)
    if p.numel() and (p.min() < 0 or p.max() > 1):
        raise DataError("probabilities must lie in [0, 1]")
    return _HardThreshold.apply(p)


def _smooth_norm(residual_sq_sum: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(residual_sq_sum + _NORM_EPS) - math.sqrt(_NORM_EPS)


def _as_weight_tensor(w, n: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(w, WeightVector):
        w = w.weights
    w = torch.as_tensor(np.asarray(w, dtype=np.float64), dtype=like.dtype, device=like.device)
    if w.shape != (n,):
        raise DataError(f"expected {n} class weights, got shape {tuple(w.shape)}")
    return w


def weighted_bce(p: torch.Tensor, y: torch.Tensor, w) -> torch.Tensor:
    """Class-weighted binary cross entropy, summed over AUs, mean over frames."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    if p.shape != y.shape or p.ndim != 2:
        raise DataError(f"probability/label shapes differ: {tuple(p.shape)} vs {tuple(y.shape)}")
    weights = _as_weight_tensor(w, p.shape[1], p)
    pc = p.clamp(_CLAMP_EPS, 1.0 - _CLAMP_EPS)
    per_frame = -(y * torch.log(pc) + (1 - y) * torch.log(1 - pc)) @ weights
    return per_frame.mean()


def _prior_tensors(matrix: np.ndarray, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    defined = torch.as_tensor(~np.isnan(matrix), device=like.device)
    values = torch.as_tensor(np.nan_to_num(matrix, nan=0.0), dtype=like.dtype, device=like.device)
    return values, defined


def intra_loss_from_scores(h: torch.Tensor, prior: IntraKnowledge) -> torch.Tensor:
    """Distance between prior co-occurrence and the co-occurrence of already
    hardened (or otherwise real-valued) scores; smooth in the scores."""
    h = torch.as_tensor(h)
    n = len(prior.au_ids)
    if h.ndim != 2 or h.shape[1] != n:
        raise DataError(f"scores must be (b, {n}), got {tuple(h.shape)}")
    learned = cooccurrence_from_scores(h)
    k, prior_defined = _prior_tensors(prior.matrix, h)
    mask = prior_defined & learned.defined
    if not bool(mask.any()):
        warnings.warn("intra loss: no entry defined in both prior and batch; returning 0")
        return (learned.matrix * 0).sum()
    residual = torch.where(mask, k - learned.matrix, torch.zeros((), dtype=h.dtype, device=h.device))
    return _smooth_norm((residual * residual).sum())


def intra_loss(p: torch.Tensor, prior: IntraKnowledge) -> torch.Tensor:
    """L2 distance between the prior co-occurrence matrix and the learned one,
    computed from thresholded batch predictions (gradients pass through the
    threshold unchanged)."""
    return intra_loss_from_scores(straight_through_threshold(torch.as_tensor(p)), prior)


def inter_loss(p_seq, prior: InterKnowledge) -> torch.Tensor:
    """L2 distance between the prior transition distribution and the mean soft
    state tensor over all consecutive-frame pairs of the batch. Fully smooth.

    Accepts one (T, N) probability sequence or a list of them; sequences are
    pooled by their pair counts so transitions never cross clip boundaries.
    """
    seqs = list(p_seq) if isinstance(p_seq, (list, tuple)) else [torch.as_tensor(p_seq)]
    if not seqs:
        raise DataError("inter loss needs at least one sequence")
    n = len(prior.au_ids)
    tensors, pair_counts = [], []
    for s in seqs:
        s = torch.as_tensor(s)
        if s.ndim != 2 or s.shape[1] != n:
            raise DataError(f"probabilities must be (T, {n}), got {tuple(s.shape)}")
        if s.shape[0] < 2:
            raise DataError("inter loss needs at least two frames per sequence")
        tensors.append(mean_state_tensor(s))
        pair_counts.append(s.shape[0] - 1)
    weights = torch.tensor(pair_counts, dtype=tensors[0].dtype, device=tensors[0].device)
    mean_states = torch.einsum("c,cijs->ijs", weights / weights.sum(), torch.stack(tensors))
    k, defined = _prior_tensors(prior.tensor, mean_states)
    if not bool(defined.any()):
        warnings.warn("inter loss: prior has no defined entries; returning 0")
        return (mean_states * 0).sum()
    zero = torch.zeros((), dtype=mean_states.dtype, device=mean_states.device)
    residual = torch.where(defined, k - mean_states, zero)
    return _smooth_norm((residual * residual).sum())


def total_loss(cls, intra, inter, weights: LossWeights):
    """Weighted sum of the three fine-tuning loss terms."""
    return weights.lambda_cls * cls + weights.lambda_intra * intra + weights.lambda_inter * inter


def reconstruction_loss(
    original: torch.Tensor, reconstructed: torch.Tensor, mask: MaskSpec
) -> torch.Tensor:
    """Masked-token reconstruction error.

    `original` is the full token grid as (blocks, spatial, dim); `reconstructed`
    holds one vector per masked token, ordered block-major then by spatial
    position. Per temporal block, averages the L2 norms of masked-token
    residuals; returns the mean over blocks that have masked tokens.
    """
    original = torch.as_tensor(original)
    reconstructed = torch.as_tensor(reconstructed)
    if original.ndim != 3:
        raise DataError(f"original tokens must be (blocks, spatial, dim), got {tuple(original.shape)}")
    blocks, spatial, dim = original.shape
    if mask.visible.shape != (blocks, spatial):
        raise DataError(
            f"mask shape {mask.visible.shape} does not match token grid ({blocks}, {spatial})"
        )
    masked = torch.as_tensor(mask.masked, device=original.device)
    total_masked = int(masked.sum())
    if total_masked == 0:
        raise DataError("reconstruction loss needs at least one masked token")
    if reconstructed.shape != (total_masked, dim):
        raise DataError(
            f"expected {total_masked} reconstructed vectors of dim {dim}, got {tuple(reconstructed.shape)}"
        )
    target = original[masked]
    diff = target - reconstructed
    token_norms = _smooth_norm((diff * diff).sum(dim=1))
    per_block = mask.masked_per_block()
    block_ids = torch.as_tensor(
        np.repeat(np.arange(blocks), per_block), device=original.device
    )
    block_sums = torch.zeros(blocks, dtype=token_norms.dtype, device=original.device)
    block_sums = block_sums.index_add(0, block_ids, token_norms)
    counts = torch.as_tensor(per_block, dtype=token_norms.dtype, device=original.device)
    nonempty = counts > 0
    return (block_sums[nonempty] / counts[nonempty]).mean()
