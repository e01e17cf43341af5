"""Recall@K for speech->image and image->speech retrieval."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_KS = (1, 5, 10)


@dataclass
class RecallReport:
    r_at_k: dict[int, tuple[float, float]]
    s2i_ranks: np.ndarray
    i2s_ranks: np.ndarray
    Q: int = field(init=False)

    def __post_init__(self):
        self.Q = len(self.s2i_ranks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "s2i", "i2s"])
        for k, (s2i, i2s) in sorted(self.r_at_k.items()):
            writer.writerow([k, f"{s2i:.6f}", f"{i2s:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"Q = {self.Q}", f"{'K':>4}  {'speech->image':>14}  {'image->speech':>14}"]
        for k, (s2i, i2s) in sorted(self.r_at_k.items()):
            lines.append(f"{k:>4}  {s2i:>14.4f}  {i2s:>14.4f}")
        return "\n".join(lines)


def similarity_matrix(A: np.ndarray, I: np.ndarray) -> np.ndarray:
    """M[q, r] = A_q . I_r for audio rows A and image rows I."""
    A = np.asarray(A, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if A.shape[1] != I.shape[1]:
        raise ValueError("embedding dimensions differ")
    return A @ I.T


def true_ranks(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1-based rank of the true counterpart for each row (s2i) and column (i2s).

    Ties are pessimistic: every other item scoring at least as high as the
    true one is ranked ahead of it.
    """
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("similarity matrix must be square")
    diag = np.diag(M)
    s2i = (M >= diag[:, None]).sum(axis=1)
    i2s = (M >= diag[None, :]).sum(axis=0)
    return s2i, i2s


def recall_at_k(M: np.ndarray, k: int) -> tuple[float, float]:
    Q = np.asarray(M).shape[0]
    if not 1 <= k <= Q:
        raise ValueError(f"k must be in [1, {Q}], got {k}")
    s2i, i2s = true_ranks(M)
    return float(np.mean(s2i <= k)), float(np.mean(i2s <= k))


def recall_report(M: np.ndarray, ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    Q = np.asarray(M).shape[0]
    s2i, i2s = true_ranks(M)
    rates = {}
    for k in ks:
        if not 1 <= k <= Q:
            raise ValueError(f"k must be in [1, {Q}], got {k}")
        rates[k] = (float(np.mean(s2i <= k)), float(np.mean(i2s <= k)))
    return RecallReport(rates, s2i, i2s)


def query(probe: np.ndarray, gallery: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k gallery indices by descending dot product; equal scores keep index order."""
    scores = np.asarray(gallery, dtype=np.float64) @ np.asarray(probe, dtype=np.float64)
    k = min(k, len(scores))
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def embed_pairs(dataset, pairs, audio_model, image_model, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings (full-length MFCC, center crop) for ``pairs``, in order."""
    import torch

    from .dataset import iter_batches

    audio_model.eval()
    image_model.eval()
    dtype = next(audio_model.parameters()).dtype
    A, I = [], []
    with torch.no_grad():
        for batch in iter_batches(dataset, pairs, batch_size, None, "eval", shuffle=False):
            A.append(audio_model(batch.mfcc.to(dtype), batch.lengths).numpy())
            I.append(image_model(batch.images.to(dtype)).numpy())
    return np.concatenate(A), np.concatenate(I)


def evaluate(dataset, pairs, audio_model, image_model, ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    """Recall@K over aligned test pairs; K values above the set size are clamped to it."""
    pairs = dataset.usable(pairs)
    if not pairs:
        raise ValueError("no evaluation pairs")
    A, I = embed_pairs(dataset, pairs, audio_model, image_model)
    Q = len(pairs)
    ks = sorted({min(k, Q) for k in ks})
    return recall_report(similarity_matrix(A, I), ks)
