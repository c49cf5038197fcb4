"""Shared test utilities: independent oracles and gradient-check machinery.

Everything here is deliberately written the dumb way (plain Python loops,
frame-by-frame counting) so it stays independent of the vectorized library
implementations it is used to check.
"""

from __future__ import annotations

import numpy as np
import torch

from auvmae.labels import LabelSequence


def random_label_sequences(rng: np.random.Generator, num_clips=3, max_n=5, max_t=50):
    """Random dataset sharing one AU id set; N in [2, max_n], T in [2, max_t]."""
    n = int(rng.integers(2, max_n + 1))
    au_ids = tuple(sorted(rng.choice(np.arange(1, 30), size=n, replace=False).tolist()))
    out = []
    for k in range(num_clips):
        t = int(rng.integers(2, max_t + 1))
        frames = rng.integers(0, 2, size=(t, n))
        out.append(LabelSequence(au_ids=au_ids, frames=frames, clip_id=f"c{k}"))
    return out


def brute_force_intra(dataset):
    """Frame-by-frame tally of the pairwise co-activation probability."""
    n = len(dataset[0].au_ids)
    both = [[0] * n for _ in range(n)]
    either = [[0] * n for _ in range(n)]
    for seq in dataset:
        for row in seq.frames.tolist():
            for i in range(n):
                for j in range(n):
                    if row[i] == 1 and row[j] == 1:
                        both[i][j] += 1
                    if row[i] == 1 or row[j] == 1:
                        either[i][j] += 1
    matrix = [
        [both[i][j] / either[i][j] if either[i][j] > 0 else None for j in range(n)]
        for i in range(n)
    ]
    return matrix, either


def brute_force_inter(dataset):
    """Transition tally over all consecutive frame pairs of every clip.

    State index convention (same contract the library promises): 4 bits with
    weights 1, 2, 4, 8 for (i at t, j at t, i at t+1, j at t+1), bit value 1
    meaning the label is INACTIVE.
    """
    n = len(dataset[0].au_ids)
    counts = [[[0] * 16 for _ in range(n)] for _ in range(n)]
    for seq in dataset:
        rows = seq.frames.tolist()
        for t in range(len(rows) - 1):
            for i in range(n):
                for j in range(n):
                    s = (
                        (1 - rows[t][i])
                        + 2 * (1 - rows[t][j])
                        + 4 * (1 - rows[t + 1][i])
                        + 8 * (1 - rows[t + 1][j])
                    )
                    counts[i][j][s] += 1
    tensor = [[[None] * 16 for _ in range(n)] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            total = sum(counts[i][j])
            if total > 0:
                tensor[i][j] = [c / total for c in counts[i][j]]
    return tensor


def finite_difference_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for k in range(flat_x.size):
        orig = flat_x[k]
        flat_x[k] = orig + h
        f_plus = float(fn(x))
        flat_x[k] = orig - h
        f_minus = float(fn(x))
        flat_x[k] = orig
        flat_g[k] = (f_plus - f_minus) / (2.0 * h)
    return grad


def autograd_gradient(fn, x: np.ndarray) -> np.ndarray:
    t = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    fn(t).backward()
    return t.grad.numpy().copy()


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(fn, x: np.ndarray, tol: float = 1e-4, h: float = 1e-6) -> float:
    """Assert the autograd gradient of fn matches central differences."""
    analytic = autograd_gradient(fn, x)
    numeric = finite_difference_gradient(lambda arr: float(fn(torch.tensor(arr))), x, h=h)
    err = relative_gradient_error(analytic, numeric)
    assert err <= tol, f"gradient mismatch: relative error {err:.3e} > {tol}"
    return err
