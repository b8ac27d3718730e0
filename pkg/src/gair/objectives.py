"""Contrastive objectives: symmetric InfoNCE between localized RS and SV
embeddings, the location-anchored loss with a FIFO memory bank of past
location embeddings, and their weighted combination."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, concat, log_softmax_rows, matmul

__all__ = ["LossConfig", "MemoryBank", "sim_matrix", "incl_loss", "secl_loss", "combined_loss"]


@dataclass
class LossConfig:
    tau: float = 0.07
    lambda_secl: float = 1.0
    bank_capacity: int = 4096

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.bank_capacity < 1:
            raise ValueError("bank capacity must be positive")


class MemoryBank:
    """FIFO ring of detached unit-norm vectors from past mini-batches."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.capacity = capacity
        self._entries = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def push(self, batch: np.ndarray):
        batch = np.atleast_2d(np.asarray(batch))
        if batch.shape[0] > self.capacity:
            raise ValueError(f"batch of {batch.shape[0]} exceeds bank capacity {self.capacity}")
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ContractError("bank entries must be unit-norm")
        for row in batch:
            self._entries.append(row.copy())

    def snapshot(self) -> np.ndarray:
        """Contents oldest-first as a detached (k, D) array."""
        if not self._entries:
            return np.zeros((0, 0))
        return np.stack(list(self._entries))

    def state(self) -> np.ndarray:
        return self.snapshot()

    def load_state(self, entries: np.ndarray):
        self._entries.clear()
        for row in np.atleast_2d(entries):
            if row.size:
                self._entries.append(np.asarray(row).copy())


def _check_unit_rows(x: Tensor, what: str):
    norms = np.linalg.norm(x.values, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ContractError(f"{what} rows are not unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities of unit-norm rows: (n, D) x (m, D) -> (n, m)."""
    _check_unit_rows(a, "sim_matrix lhs")
    _check_unit_rows(b, "sim_matrix rhs")
    return matmul(a, b.transpose())


def _diag_nll(logits: Tensor) -> Tensor:
    """Mean over rows of -log softmax at the diagonal entry."""
    n = logits.shape[0]
    mask = Tensor(np.eye(n, logits.shape[1], dtype=logits.dtype))
    return -(log_softmax_rows(logits) * mask).sum().scale(1.0 / n)

def incl_loss(z_q: Tensor, g_s: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE between matched localized-RS and SV embeddings."""
    if z_q.shape[0] == 0:
        raise ValueError("empty batch")
    logits = sim_matrix(z_q, g_s).scale(1.0 / tau)
    forward = _diag_nll(logits)
    reverse = _diag_nll(logits.transpose())
    return (forward + reverse).scale(0.5)


def secl_loss(e_x: Tensor, z_q: Tensor, g_s: Tensor, bank: MemoryBank, tau: float) -> Tensor:
    """Location-anchored InfoNCE, negatives = current batch plus bank.

    For each anchor (z or g), the positive is its colocated current-batch
    location embedding; the denominator additionally ranges over stored
    past location embeddings, which receive no gradient.
    """
    n = e_x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    _check_unit_rows(e_x, "location embeddings")
    stored = bank.snapshot()
    candidates = e_x
    if stored.size:
        candidates = concat([e_x, Tensor(stored.astype(e_x.dtype))], axis=0)
    logits_rs = sim_matrix(z_q, candidates).scale(1.0 / tau)
    logits_sv = sim_matrix(g_s, candidates).scale(1.0 / tau)
    return (_diag_nll(logits_rs) + _diag_nll(logits_sv)).scale(0.5)


def combined_loss(incl: Tensor, secl: Tensor, lambda_secl: float) -> Tensor:
    return incl + secl.scale(lambda_secl)
