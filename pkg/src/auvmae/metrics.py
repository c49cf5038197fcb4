"""Per-AU detection metrics and prior-vs-learned knowledge comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .knowledge import (
    NUM_STATES,
    InterKnowledge,
    IntraKnowledge,
    cooccurrence_from_scores,
    mean_state_tensor,
)


@dataclass
class MetricReport:
    au_ids: tuple[int, ...]
    per_au_f1: np.ndarray
    per_au_acc: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def avg_f1(self) -> float:
        return float(self.per_au_f1.mean())

    @property
    def avg_acc(self) -> float:
        return float(self.per_au_acc.mean())

    def to_json(self) -> str:
        doc = {
            "au_ids": list(self.au_ids),
            "per_au_f1": self.per_au_f1.tolist(),
            "per_au_acc": self.per_au_acc.tolist(),
            "avg_f1": self.avg_f1,
            "avg_acc": self.avg_acc,
            "tp": self.tp.tolist(),
            "fp": self.fp.tolist(),
            "fn": self.fn.tolist(),
            "tn": self.tn.tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    def to_csv(self, path: str | Path) -> None:
        """One row per AU, mirroring the usual per-label results table."""
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["au_id", "f1", "acc", "tp", "fp", "fn", "tn"])
            for k, au in enumerate(self.au_ids):
                writer.writerow(
                    [au, f"{self.per_au_f1[k]:.6f}", f"{self.per_au_acc[k]:.6f}",
                     int(self.tp[k]), int(self.fp[k]), int(self.fn[k]), int(self.tn[k])]
                )


def _stack_pairs(probs, labels) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    if not isinstance(probs, (list, tuple)):
        probs = [probs]
    if not isinstance(labels, (list, tuple)):
        labels = [labels]
    if len(probs) != len(labels):
        raise DataError(f"{len(probs)} prediction batches vs {len(labels)} label sequences")
    if not probs:
        raise DataError("nothing to evaluate")
    au_ids = labels[0].au_ids
    p_rows, y_rows = [], []
    for batch, seq in zip(probs, labels):
        p = np.asarray(batch.probs if hasattr(batch, "probs") else batch, dtype=np.float64)
        if seq.au_ids != au_ids:
            raise DataError(f"clip '{seq.clip_id}': au_ids differ across evaluation inputs")
        if p.shape != seq.frames.shape:
            raise DataError(
                f"clip '{seq.clip_id}': prediction shape {p.shape} != label shape {seq.frames.shape}"
            )
        p_rows.append(p)
        y_rows.append(seq.frames)
    return np.concatenate(p_rows), np.concatenate(y_rows), au_ids


def f1_scores(probs, labels, threshold: float = 0.5) -> MetricReport:
    """Binarize at `threshold` and compute per-AU F1 and accuracy.

    F1 is 0 whenever its precision/recall denominators vanish. Accepts a single
    prediction batch and label sequence or parallel lists of them.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must lie in (0, 1), got {threshold}")
    p, y, au_ids = _stack_pairs(probs, labels)
    pred = (p > threshold).astype(np.int64)
    tp = ((pred == 1) & (y == 1)).sum(axis=0)
    fp = ((pred == 1) & (y == 0)).sum(axis=0)
    fn = ((pred == 0) & (y == 1)).sum(axis=0)
    tn = ((pred == 0) & (y == 0)).sum(axis=0)
    total = y.shape[0]
    f1 = np.zeros(len(au_ids), dtype=np.float64)
    for k in range(len(au_ids)):
        if tp[k] + fp[k] == 0 or tp[k] + fn[k] == 0:
            continue
        precision = tp[k] / (tp[k] + fp[k])
        recall = tp[k] / (tp[k] + fn[k])
        if precision + recall > 0:
            f1[k] = 2 * precision * recall / (precision + recall)
    acc = (tp + tn) / float(total)
    return MetricReport(au_ids=au_ids, per_au_f1=f1, per_au_acc=acc, tp=tp, fp=fp, fn=fn, tn=tn)


@dataclass
class LearnedKnowledge:
    """Batch statistics of model predictions, comparable against the priors."""

    au_ids: tuple[int, ...]
    intra: np.ndarray  # (N, N), NaN where undefined
    inter: np.ndarray  # (N, N, 16)


def learned_statistics(probs_list, au_ids: tuple[int, ...], threshold: float = 0.5) -> LearnedKnowledge:
    """Pool predictions into learned intra (thresholded co-occurrence) and
    inter (mean soft transition tensor over within-clip frame pairs) statistics."""
    if not isinstance(probs_list, (list, tuple)):
        probs_list = [probs_list]
    mats = [np.asarray(b.probs if hasattr(b, "probs") else b, dtype=np.float64) for b in probs_list]
    if not mats:
        raise DataError("no predictions given")
    n = len(au_ids)
    for m in mats:
        if m.ndim != 2 or m.shape[1] != n:
            raise DataError(f"prediction matrix must be (T, {n}), got {m.shape}")
    hard = torch.as_tensor((np.concatenate(mats) > threshold).astype(np.float64))
    cooc = cooccurrence_from_scores(hard)
    intra = cooc.matrix.numpy().copy()
    intra[~cooc.defined.numpy()] = np.nan
    weights = np.array([m.shape[0] - 1 for m in mats], dtype=np.float64)
    tensors = [mean_state_tensor(torch.as_tensor(m)).numpy() for m in mats]
    inter = np.einsum("c,cijs->ijs", weights / weights.sum(), np.stack(tensors))
    return LearnedKnowledge(au_ids=tuple(au_ids), intra=intra, inter=inter)


def knowledge_divergence(
    prior: tuple[IntraKnowledge, InterKnowledge], learned: LearnedKnowledge
) -> tuple[float, float]:
    """Frobenius distances (intra, inter) over entries defined on both sides."""
    k_intra, k_inter = prior
    if k_intra.au_ids != learned.au_ids or k_inter.au_ids != learned.au_ids:
        raise DataError("prior and learned knowledge describe different AU sets")
    n = len(learned.au_ids)
    if learned.intra.shape != (n, n) or learned.inter.shape != (n, n, NUM_STATES):
        raise DataError("learned knowledge has wrong dimensions")
    intra_mask = k_intra.defined() & ~np.isnan(learned.intra)
    diff_intra = np.where(intra_mask, np.nan_to_num(k_intra.matrix) - np.nan_to_num(learned.intra), 0.0)
    inter_mask = k_inter.defined()[:, :, None] & ~np.isnan(learned.inter)
    diff_inter = np.where(inter_mask, np.nan_to_num(k_inter.tensor) - np.nan_to_num(learned.inter), 0.0)
    return float(np.sqrt((diff_intra**2).sum())), float(np.sqrt((diff_inter**2).sum()))


def knowledge_comparison_dump(
    prior: tuple[IntraKnowledge, InterKnowledge], learned: LearnedKnowledge | None
) -> dict:
    """Side-by-side matrix dump consumed by the report command's heatmaps."""
    k_intra, k_inter = prior
    doc = {
        "au_ids": list(k_intra.au_ids),
        "prior_intra": np.nan_to_num(k_intra.matrix).tolist(),
        "prior_inter": np.nan_to_num(k_inter.tensor).tolist(),
    }
    if learned is not None:
        intra_d, inter_d = knowledge_divergence(prior, learned)
        doc["learned_intra"] = np.nan_to_num(learned.intra).tolist()
        doc["learned_inter"] = np.nan_to_num(learned.inter).tolist()
        doc["intra_distance"] = intra_d
        doc["inter_distance"] = inter_d
    return doc
