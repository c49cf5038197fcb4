"""Synthetic label sequences from a joint Markov chain, with exact knowledge.

Ground truth is a single Markov chain over the 2^N joint activation states
(AU i is active in joint state s iff bit i of s is 1). Pair marginals of a
joint chain are automatically mutually consistent, so the analytically derived
co-occurrence and transition statistics are exact targets for the empirical
estimators. Rendering paints one rectangle per AU so labels are recoverable
from pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .knowledge import NUM_STATES, InterKnowledge, IntraKnowledge
from .labels import LabelSequence
from .seeds import derive_seed
from .video import VideoClip

_POWER_ITER_LIMIT = 100_000
_POWER_ITER_TOL = 1e-12


@dataclass
class GeneratorSpec:
    num_aus: int
    joint_transition: np.ndarray  # (2^N, 2^N) row-stochastic
    initial: np.ndarray  # (2^N,) distribution over joint states
    seed: int = 0
    au_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 2 <= self.num_aus <= 8:
            raise DataError(f"need 2..8 AUs (joint state space stays enumerable), got {self.num_aus}")
        m = 1 << self.num_aus
        self.joint_transition = np.asarray(self.joint_transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if self.joint_transition.shape != (m, m):
            raise DataError(f"joint transition must be {m}x{m}")
        if self.initial.shape != (m,):
            raise DataError(f"initial distribution must have length {m}")
        if (self.joint_transition < 0).any() or (self.initial < 0).any():
            raise DataError("probabilities must be nonnegative")
        if np.abs(self.joint_transition.sum(axis=1) - 1.0).max() > 1e-12:
            raise DataError("joint transition rows must sum to 1 (within 1e-12)")
        if abs(self.initial.sum() - 1.0) > 1e-12:
            raise DataError("initial distribution must sum to 1 (within 1e-12)")
        if not self.au_ids:
            self.au_ids = tuple(range(1, self.num_aus + 1))
        if len(self.au_ids) != self.num_aus:
            raise DataError("au_ids must name every AU")

    def to_json(self, path: str | Path) -> None:
        doc = {
            "num_aus": self.num_aus,
            "joint_transition": self.joint_transition.tolist(),
            "initial": self.initial.tolist(),
            "seed": self.seed,
            "au_ids": list(self.au_ids),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "GeneratorSpec":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(
                num_aus=int(doc["num_aus"]),
                joint_transition=np.array(doc["joint_transition"], dtype=np.float64),
                initial=np.array(doc["initial"], dtype=np.float64),
                seed=int(doc.get("seed", 0)),
                au_ids=tuple(doc.get("au_ids", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed generator spec ({exc})") from exc


@dataclass
class RenderSpec:
    height: int = 32
    width: int = 32
    channels: int = 1
    regions: dict[int, tuple[int, int, int, int]] = field(default_factory=dict)  # au -> (y, x, h, w)
    on_intensity: float = 0.9
    off_intensity: float = 0.1
    noise_sigma: float = 0.1
    au_gain: dict[int, float] = field(default_factory=dict)  # per-AU contrast scale, default 1

    def __post_init__(self) -> None:
        for au, (y, x, h, w) in self.regions.items():
            if h < 1 or w < 1 or y < 0 or x < 0 or y + h > self.height or x + w > self.width:
                raise DataError(f"AU {au} region {(y, x, h, w)} out of bounds for {self.height}x{self.width}")
        if not 0.0 <= self.off_intensity <= self.on_intensity <= 1.0:
            raise DataError("need 0 <= off_intensity <= on_intensity <= 1")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be nonnegative")
        for au, gain in self.au_gain.items():
            if not 0.0 <= gain <= 1.0:
                raise DataError(f"AU {au} gain must lie in [0, 1], got {gain}")

    def to_json(self, path: str | Path) -> None:
        doc = {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "regions": {str(a): list(r) for a, r in self.regions.items()},
            "on_intensity": self.on_intensity,
            "off_intensity": self.off_intensity,
            "noise_sigma": self.noise_sigma,
            "au_gain": {str(a): g for a, g in self.au_gain.items()},
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "RenderSpec":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(
                height=int(doc["height"]),
                width=int(doc["width"]),
                channels=int(doc["channels"]),
                regions={int(a): tuple(r) for a, r in doc["regions"].items()},
                on_intensity=float(doc["on_intensity"]),
                off_intensity=float(doc["off_intensity"]),
                noise_sigma=float(doc["noise_sigma"]),
                au_gain={int(a): float(g) for a, g in doc.get("au_gain", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed render spec ({exc})") from exc


def _decode_joint_states(states: np.ndarray, num_aus: int) -> np.ndarray:
    bits = (states[:, None] >> np.arange(num_aus)[None, :]) & 1
    return bits.astype(np.int64)


def sample_sequence(spec: GeneratorSpec, length: int, seed: int, clip_id: str = "clip") -> LabelSequence:
    """Sample a length-T label sequence from the joint chain."""
    if length < 2:
        raise DataError(f"need at least 2 frames, got {length}")
    rng = np.random.default_rng(seed)
    m = 1 << spec.num_aus
    cumulative = np.cumsum(spec.joint_transition, axis=1)
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.choice(m, p=spec.initial / spec.initial.sum())
    draws = rng.random(length - 1)
    for t in range(1, length):
        states[t] = np.searchsorted(cumulative[states[t - 1]], draws[t - 1], side="right")
    frames = _decode_joint_states(states, spec.num_aus)
    return LabelSequence(au_ids=spec.au_ids, frames=frames, clip_id=clip_id)


def stationary_distribution(spec: GeneratorSpec) -> np.ndarray:
    """Long-run state distribution via power iteration from the chain's own
    initial distribution; raises if it fails to settle."""
    pi = spec.initial / spec.initial.sum()
    for _ in range(_POWER_ITER_LIMIT):
        nxt = pi @ spec.joint_transition
        if np.abs(nxt - pi).sum() < _POWER_ITER_TOL:
            return nxt
        pi = nxt
    raise NumericError(
        f"power iteration did not converge in {_POWER_ITER_LIMIT} steps; chain may be periodic or reducible"
    )


def analytic_knowledge(spec: GeneratorSpec) -> tuple[IntraKnowledge, InterKnowledge]:
    """Exact co-occurrence and transition statistics under the stationary law."""
    pi = stationary_distribution(spec)
    n = spec.num_aus
    m = 1 << n
    bits = _decode_joint_states(np.arange(m), n)  # (m, N)

    # intra: pi-mass of {both active} over {at least one active}, per pair
    active = bits.astype(np.float64)
    p_both = np.einsum("s,si,sj->ij", pi, active, active)
    p_neither = np.einsum("s,si,sj->ij", pi, 1 - active, 1 - active)
    support_mass = 1.0 - p_neither
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = np.where(support_mass > 1e-15, p_both / np.where(support_mass > 1e-15, support_mass, 1.0), np.nan)
    support = (support_mass > 1e-15).astype(np.int64)  # indicator support: mass > 0
    intra = IntraKnowledge(au_ids=spec.au_ids, matrix=matrix, support=support)

    # inter: stationary pair-transition measure marginalized to each AU pair,
    # under the shared bit convention (bit 1 = inactive)
    flow = pi[:, None] * spec.joint_transition  # (m, m) measure over (s, s')
    inactive = 1 - bits  # (m, N)
    low = inactive[:, :, None] + 2 * inactive[:, None, :]  # (m, N, N) bits of the t frame
    high = 4 * inactive[:, :, None] + 8 * inactive[:, None, :]  # bits of the t+1 frame
    tensor = np.zeros((n, n, NUM_STATES), dtype=np.float64)
    flat_flow = flow.ravel()
    for i in range(n):
        for j in range(n):
            idx = (low[:, i, j][:, None] + high[:, i, j][None, :]).ravel()
            tensor[i, j] = np.bincount(idx, weights=flat_flow, minlength=NUM_STATES)
    inter = InterKnowledge(au_ids=spec.au_ids, tensor=tensor)
    return intra, inter


def render_video(labels: LabelSequence, spec: RenderSpec, seed: int) -> VideoClip:
    """Paint each active AU's rectangle, add seeded Gaussian noise, clamp."""
    missing = [a for a in labels.au_ids if a not in spec.regions]
    if missing:
        raise DataError(f"render spec has no region for AUs {missing}")
    t = labels.num_frames
    shape = (t, spec.height, spec.width, spec.channels)
    canvas = np.full(shape, spec.off_intensity, dtype=np.float64)
    delta = spec.on_intensity - spec.off_intensity
    for col, au in enumerate(labels.au_ids):
        y, x, h, w = spec.regions[au]
        gain = spec.au_gain.get(au, 1.0)
        active = labels.frames[:, col].astype(np.float64)
        canvas[:, y : y + h, x : x + w, :] += gain * delta * active[:, None, None, None]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        canvas += rng.normal(0.0, spec.noise_sigma, size=shape)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return VideoClip(pixels=canvas.astype(np.float32), clip_id=labels.clip_id)


def _pair_chain(stationary: np.ndarray, stay: float) -> np.ndarray:
    """4-state chain that keeps its state with probability `stay` and otherwise
    redraws from `stationary`; its stationary law is exactly `stationary`."""
    stationary = np.asarray(stationary, dtype=np.float64)
    return stay * np.eye(4) + (1 - stay) * np.tile(stationary, (4, 1))


def default_generator_spec(seed: int = 0) -> GeneratorSpec:
    """Four AUs as two independent pairs: one strongly co-activating pair
    (joint activation 0.195 of an active mass 0.5, co-occurrence 0.39) and one
    anti-correlated pair. Pairs evolve independently; each pair chain mixes a
    stay probability with redraws from its stationary law."""
    coupled = _pair_chain(np.array([0.50, 0.1525, 0.1525, 0.195]), stay=0.55)
    anti = _pair_chain(np.array([0.15, 0.35, 0.35, 0.15]), stay=0.45)
    joint = np.kron(anti, coupled)  # state bits: (AU1, AU2) low pair, (AU3, AU4) high pair
    m = joint.shape[0]
    initial = np.full(m, 1.0 / m)
    return GeneratorSpec(num_aus=4, joint_transition=joint, initial=initial, seed=seed)


def imbalanced_generator_spec(seed: int = 0) -> GeneratorSpec:
    """Default-style chain whose high pair is rare and bursty, for exercising
    minority augmentation."""
    coupled = _pair_chain(np.array([0.50, 0.1525, 0.1525, 0.195]), stay=0.5)
    rare = _pair_chain(np.array([0.88, 0.05, 0.04, 0.03]), stay=0.75)
    joint = np.kron(rare, coupled)
    m = joint.shape[0]
    initial = np.full(m, 1.0 / m)
    return GeneratorSpec(num_aus=4, joint_transition=joint, initial=initial, seed=seed)


def default_render_spec(au_ids: tuple[int, ...] = (1, 2, 3, 4), noise_sigma: float = 0.1) -> RenderSpec:
    regions = {
        au_ids[0]: (4, 4, 8, 8),
        au_ids[1]: (4, 20, 8, 8),
        au_ids[2]: (20, 4, 8, 8),
        au_ids[3]: (20, 20, 8, 8),
    }
    return RenderSpec(regions=regions, noise_sigma=noise_sigma)


def sample_dataset(
    spec: GeneratorSpec,
    render: RenderSpec,
    num_clips: int,
    clip_len: int,
    seed: int,
    id_prefix: str = "clip",
) -> list[tuple[VideoClip, LabelSequence]]:
    """Sample clips with per-clip derived seeds; deterministic in (spec, seed)."""
    out = []
    for k in range(num_clips):
        clip_id = f"{id_prefix}{k:04d}"
        seq = sample_sequence(spec, clip_len, derive_seed(seed, "labels", k), clip_id=clip_id)
        clip = render_video(seq, render, derive_seed(seed, "render", k))
        out.append((clip, seq))
    return out
