"""Pairwise AU knowledge: empirical priors and their differentiable twins.

Two priors are estimated from labeled frames:

* intra-frame: for each AU pair (i, j), the probability that both are active
  given that at least one is, tallied over every frame of every clip;
* inter-frame: for each pair, a 16-way distribution over two-frame state
  transitions, tallied over consecutive frames within each clip.

Transition states are indexed by 4 bits (s3 s2 s1 s0) covering
(i at t, j at t, i at t+1, j at t+1) in that order. Bit value 1 encodes the
INACTIVE label, so that the soft state weight of a probability x is x for bit 0
and 1 - x for bit 1; the hard tally and the soft tensor use the same
convention throughout, which is what the losses require.

Undefined entries (zero support) are NaN in memory and ``null`` in the JSON
serialization: {"au_ids", "k_intra", "k_intra_support", "k_inter"}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import DataError
from .labels import LabelSequence, _check_shared_au_ids

NUM_STATES = 16

# _STATE_BITS[s, k] = k-th bit of state s; slot order (i@t, j@t, i@t+1, j@t+1)
_STATE_BITS = np.array([[(s >> k) & 1 for k in range(4)] for s in range(NUM_STATES)], dtype=np.int64)


def transition_state_index(i_t: int, j_t: int, i_next: int, j_next: int) -> int:
    """State index of a hard label transition (bit 1 = inactive)."""
    for v in (i_t, j_t, i_next, j_next):
        if v not in (0, 1):
            raise DataError("labels must be 0 or 1")
    return (1 - i_t) | ((1 - j_t) << 1) | ((1 - i_next) << 2) | ((1 - j_next) << 3)


@dataclass
class IntraKnowledge:
    au_ids: tuple[int, ...]
    matrix: np.ndarray  # (N, N) in [0, 1], NaN where support == 0
    support: np.ndarray  # (N, N) int64 counts of frames with i or j active

    def __post_init__(self) -> None:
        n = len(self.au_ids)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.support = np.asarray(self.support, dtype=np.int64)
        if self.matrix.shape != (n, n) or self.support.shape != (n, n):
            raise DataError(f"intra knowledge must be {n}x{n}")

    def defined(self) -> np.ndarray:
        return self.support > 0


@dataclass
class InterKnowledge:
    au_ids: tuple[int, ...]
    tensor: np.ndarray  # (N, N, 16) in [0, 1], NaN where no transitions observed

    def __post_init__(self) -> None:
        n = len(self.au_ids)
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.shape != (n, n, NUM_STATES):
            raise DataError(f"inter knowledge must be {n}x{n}x{NUM_STATES}")

    def defined(self) -> np.ndarray:
        return ~np.isnan(self.tensor).any(axis=2)


@dataclass
class LearnedCooccurrence:
    matrix: torch.Tensor  # (N, N), meaningful only where defined
    defined: torch.Tensor  # (N, N) bool; False where no frame activates either AU


def estimate_intra_knowledge(dataset: list[LabelSequence], smoothing: float = 0.0) -> IntraKnowledge:
    """Co-activation probability per pair, conditioned on at least one active.

    `smoothing` adds that many pseudo-counts to the co-active and
    not-co-active outcomes of each supported pair; 0 keeps plain
    maximum-likelihood ratios. Zero-support entries stay undefined either way.
    """
    if smoothing < 0:
        raise DataError("smoothing must be nonnegative")
    au_ids = _check_shared_au_ids(dataset)
    n = len(au_ids)
    both = np.zeros((n, n), dtype=np.int64)
    neither = np.zeros((n, n), dtype=np.int64)
    total = 0
    for seq in dataset:
        a = seq.frames
        both += a.T @ a
        inv = 1 - a
        neither += inv.T @ inv
        total += seq.num_frames
    support = total - neither
    with np.errstate(invalid="ignore"):
        matrix = np.where(support > 0, both + smoothing, np.nan) / np.where(
            support > 0, support + 2.0 * smoothing, 1
        )
    matrix[support == 0] = np.nan
    return IntraKnowledge(au_ids=au_ids, matrix=matrix, support=support)


def estimate_inter_knowledge(dataset: list[LabelSequence], smoothing: float = 0.0) -> InterKnowledge:
    """Per-pair distribution over the 16 transition states; transitions never
    cross clip boundaries.

    `smoothing` adds that many pseudo-counts to every state of a pair that has
    at least one observed transition; 0 keeps plain maximum likelihood.
    """
    if smoothing < 0:
        raise DataError("smoothing must be nonnegative")
    au_ids = _check_shared_au_ids(dataset)
    n = len(au_ids)
    counts = np.zeros((n, n, NUM_STATES), dtype=np.int64)
    pair_offset = NUM_STATES * np.arange(n * n).reshape(n, n)
    for seq in dataset:
        cur = 1 - seq.frames[:-1]
        nxt = 1 - seq.frames[1:]
        state = (
            cur[:, :, None]
            + 2 * cur[:, None, :]
            + 4 * nxt[:, :, None]
            + 8 * nxt[:, None, :]
        )  # (T-1, N, N)
        flat = (state + pair_offset[None, :, :]).ravel()
        counts += np.bincount(flat, minlength=n * n * NUM_STATES).reshape(n, n, NUM_STATES)
    totals = counts.sum(axis=2)
    with np.errstate(invalid="ignore"):
        tensor = (counts + smoothing) / np.where(
            totals > 0, totals + NUM_STATES * smoothing, 1
        )[:, :, None]
    tensor[totals == 0] = np.nan
    return InterKnowledge(au_ids=au_ids, tensor=tensor)


def state_function(x, bit: int):
    """Soft weight of a probability under one state bit: x for bit 0, 1 - x for bit 1."""
    if bit not in (0, 1):
        raise DataError(f"state bit must be 0 or 1, got {bit}")
    _check_unit_range(x, "state_function input")
    return 1 - x if bit == 1 else x


def _check_unit_range(x, what: str) -> None:
    if isinstance(x, torch.Tensor):
        if x.numel() and (x.min() < 0 or x.max() > 1):
            raise DataError(f"{what} must lie in [0, 1]")
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise DataError(f"{what} must lie in [0, 1]")


def _soft_state_factors(x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    # D(x, b) = b + (1 - 2b) x, broadcasting x (..., N) against bits (16,)
    b = bits.to(x.dtype)
    return b + (1 - 2 * b) * x.unsqueeze(-1)


def mean_state_tensor(p_seq: torch.Tensor) -> torch.Tensor:
    """Average soft transition tensor over the T-1 consecutive-frame pairs of a
    (T, N) probability sequence. Differentiable; sums to 1 over states."""
    p_seq = torch.as_tensor(p_seq)
    if p_seq.ndim != 2 or p_seq.shape[0] < 2:
        raise DataError(f"need a (T>=2, N) probability sequence, got {tuple(p_seq.shape)}")
    _check_unit_range(p_seq, "probabilities")
    bits = torch.as_tensor(_STATE_BITS, device=p_seq.device)
    cur, nxt = p_seq[:-1], p_seq[1:]
    fac_i = _soft_state_factors(cur, bits[:, 0]) * _soft_state_factors(nxt, bits[:, 2])
    fac_j = _soft_state_factors(cur, bits[:, 1]) * _soft_state_factors(nxt, bits[:, 3])
    return torch.einsum("tis,tjs->ijs", fac_i, fac_j) / (p_seq.shape[0] - 1)


def state_tensor(p_t, p_next) -> torch.Tensor:
    """Soft transition tensor (N, N, 16) for one pair of consecutive frames."""
    if not torch.is_tensor(p_t):
        p_t = torch.as_tensor(np.asarray(p_t, dtype=np.float64))
    if not torch.is_tensor(p_next):
        p_next = torch.as_tensor(np.asarray(p_next, dtype=np.float64))
    if p_t.shape != p_next.shape or p_t.ndim != 1:
        raise DataError("expected two equal-length probability vectors")
    return mean_state_tensor(torch.stack([p_t, p_next.to(p_t.dtype)], dim=0))


def cooccurrence_from_scores(h: torch.Tensor) -> LearnedCooccurrence:
    """Pairwise co-occurrence of a (b, N) score matrix, smooth in its entries.

    numerator[i, j] counts frames scoring both AUs active; the denominator is
    the batch size minus frames scoring both inactive. Entries whose
    denominator is zero are undefined and carry no gradient.
    """
    h = torch.as_tensor(h)
    if h.ndim != 2 or h.shape[0] < 1:
        raise DataError(f"need a (b>=1, N) score matrix, got {tuple(h.shape)}")
    _check_unit_range(h, "scores")
    b = h.shape[0]
    num = h.T @ h
    inv = 1 - h
    den = b - inv.T @ inv
    defined = den > 0
    zero = torch.zeros((), dtype=num.dtype, device=num.device)
    matrix = torch.where(defined, num / den.clamp(min=1e-30), zero)
    return LearnedCooccurrence(matrix=matrix, defined=defined)


def learned_cooccurrence(
    p: torch.Tensor, hardening: Callable[[torch.Tensor], torch.Tensor] | None = None
) -> LearnedCooccurrence:
    """Co-occurrence of hardened batch predictions (the learned intra statistic)."""
    if hardening is None:
        from .losses import straight_through_threshold

        hardening = straight_through_threshold
    p = torch.as_tensor(p)
    _check_unit_range(p, "probabilities")
    return cooccurrence_from_scores(hardening(p))


def _matrix_to_lists(matrix: np.ndarray):
    return [[None if math.isnan(v) else v for v in row] for row in matrix.tolist()]


def _lists_to_matrix(rows, shape, what: str) -> np.ndarray:
    arr = np.array(
        [[np.nan if v is None else float(v) for v in row] for row in rows], dtype=np.float64
    )
    if arr.shape != shape:
        raise DataError(f"{what}: expected shape {shape}, got {arr.shape}")
    return arr


def save_knowledge(path: str | Path, intra: IntraKnowledge, inter: InterKnowledge) -> None:
    if intra.au_ids != inter.au_ids:
        raise DataError("intra/inter knowledge describe different AU sets")
    doc = {
        "au_ids": list(intra.au_ids),
        "k_intra": _matrix_to_lists(intra.matrix),
        "k_intra_support": intra.support.tolist(),
        "k_inter": [
            [[None if math.isnan(v) else v for v in states] for states in row]
            for row in inter.tensor.tolist()
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_knowledge(path: str | Path) -> tuple[IntraKnowledge, InterKnowledge]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"knowledge file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        au_ids = tuple(int(a) for a in doc["au_ids"])
        n = len(au_ids)
        matrix = _lists_to_matrix(doc["k_intra"], (n, n), f"{path}: k_intra")
        support = np.array(doc["k_intra_support"], dtype=np.int64)
        tensor = np.array(
            [
                [[np.nan if v is None else float(v) for v in states] for states in row]
                for row in doc["k_inter"]
            ],
            dtype=np.float64,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed knowledge document ({exc})") from exc
    if support.shape != (n, n):
        raise DataError(f"{path}: k_intra_support must be {n}x{n}")
    if tensor.shape != (n, n, NUM_STATES):
        raise DataError(f"{path}: k_inter must be {n}x{n}x{NUM_STATES}")
    return IntraKnowledge(au_ids, matrix, support), InterKnowledge(au_ids, tensor)
