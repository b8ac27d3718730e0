"""Continuous feature-map lookup: 3x3 unfolding, area-weighted local
ensemble interpolation, and a single-layer implicit decoder.

A query inside a footprint lands inside a cell of the patch-center hull;
the four surrounding patch latents each produce a decoder prediction,
blended with bilinear area weights so the result is continuous across
cell boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import OutOfFootprintError
from .tensor import Tensor, concat, gather_cells, l2_normalize_rows, matmul

__all__ = [
    "FThetaParams",
    "EnsembleGeometry",
    "unfold3x3",
    "ensemble_weights",
    "f_theta",
    "inr_query",
    "inr_query_batch",
    "bilinear_oracle",
]

# Raster order of the 3x3 neighborhood: NW, N, NE, W, center, E, SW, S, SE.
_NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class FThetaParams:
    """Single affine layer over concat(latent, offset): W [9D+2, D], b [D]."""

    weight: Tensor
    bias: Tensor

    @staticmethod
    def init(d: int, rng: np.random.Generator, dtype=np.float32) -> "FThetaParams":
        fan_in = 9 * d + 2
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, d))
        return FThetaParams(
            weight=Tensor(w.astype(dtype), requires_grad=True, name="ftheta.weight"),
            bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name="ftheta.bias"),
        )

    @staticmethod
    def passthrough(d: int, dtype=np.float64) -> "FThetaParams":
        """Extracts the center block of the unfolded latent; ignores the offset."""
        w = np.zeros((9 * d + 2, d), dtype=dtype)
        w[4 * d : 5 * d, :] = np.eye(d, dtype=dtype)
        return FThetaParams(weight=Tensor(w), bias=Tensor(np.zeros(d, dtype=dtype)))

    def named(self) -> dict:
        return {"ftheta.weight": self.weight, "ftheta.bias": self.bias}


def unfold3x3(fm: Tensor) -> Tensor:
    """Concatenate each cell's 3x3 neighborhood along channels.

    fm has shape (..., P, P, D); output (..., P, P, 9D). Out-of-grid
    neighbors contribute zero blocks.
    """
    P = fm.shape[-2]
    pieces = []
    for di, dj in _NEIGHBOR_OFFSETS:
        shifted = _shift(fm, di, dj, P)
        pieces.append(shifted)
    return concat(pieces, axis=-1)


def _shift(fm: Tensor, di: int, dj: int, P: int) -> Tensor:
    """fm shifted so cell (a,b) holds the neighbor at (a+di, b+dj), zero-padded."""
    zeros_like = lambda shape: Tensor(np.zeros(shape, dtype=fm.dtype))
    lead = fm.shape[:-3]
    D = fm.shape[-1]

    row_lo, row_hi = max(di, 0), P + min(di, 0)
    core = fm[..., row_lo:row_hi, :, :]
    pad_shape_top = lead + (max(-di, 0), P, D)
    pad_shape_bot = lead + (max(di, 0), P, D)
    if di < 0:
        rows = [zeros_like(pad_shape_top), core]
    elif di > 0:
        rows = [core, zeros_like(pad_shape_bot)]
    else:
        rows = [core]
    out = rows[0] if len(rows) == 1 else concat(rows, axis=-3)

    col_lo, col_hi = max(dj, 0), P + min(dj, 0)
    core = out[..., :, col_lo:col_hi, :]
    if dj < 0:
        out = concat([zeros_like(lead + (P, -dj, D)), core], axis=-2)
    elif dj > 0:
        out = concat([core, zeros_like(lead + (P, dj, D))], axis=-2)
    else:
        out = core
    return out


@dataclass
class EnsembleGeometry:
    """Corner indices, decoder offsets, and area weights for one query."""

    rows: np.ndarray  # (n, 4) int, corner row indices (N then S)
    cols: np.ndarray  # (n, 4) int
    weights: np.ndarray  # (n, 4), nonnegative, rows sum to 1
    deltas: np.ndarray  # (n, 4, 2) query-minus-corner offsets in cell units
    clamped: np.ndarray  # (n,) bool, query was outside the patch-center hull


def ensemble_weights(queries: np.ndarray, P: int) -> EnsembleGeometry:
    """Corner geometry for queries (n, 2) of local (u, v) coordinates.

    Corner k is weighted by the area of the rectangle between the query and
    the diagonally opposite corner (bilinear convention), so a query that
    coincides with a corner takes that corner's value exactly. Queries in
    the outer half-patch margin are clamped to the hull with a flag; queries
    outside the footprint are rejected.
    """
    if P < 2:
        raise ValueError("local ensemble needs a grid of at least 2x2 patches")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if np.any(np.abs(q) > 1.0 + 1e-12):
        bad = q[np.any(np.abs(q) > 1.0 + 1e-12, axis=1)][0]
        raise OutOfFootprintError(f"query (u={bad[0]}, v={bad[1]}) outside footprint")

    hull = 1.0 - 1.0 / P
    clamped = np.any(np.abs(q) > hull, axis=1)
    qc = np.clip(q, -hull, hull)

    cell = 2.0 / P
    # Column pair west of / east of the query; cols increase eastward.
    b0 = np.clip(np.floor((qc[:, 0] + 1.0) * P / 2.0 - 0.5).astype(int), 0, P - 2)
    u0 = -1.0 + (2 * b0 + 1) / P
    tu = (qc[:, 0] - u0) / cell  # 0 at west corner, 1 at east
    # Row pair north of / south of the query; rows increase southward.
    a0 = np.clip(np.floor((1.0 - qc[:, 1]) * P / 2.0 - 0.5).astype(int), 0, P - 2)
    v0 = 1.0 - (2 * a0 + 1) / P
    tv = (v0 - qc[:, 1]) / cell  # 0 at north corner, 1 at south

    # Corner order: (N,W), (N,E), (S,W), (S,E).
    rows = np.stack([a0, a0, a0 + 1, a0 + 1], axis=1)
    cols = np.stack([b0, b0 + 1, b0, b0 + 1], axis=1)
    w_nw = (1 - tu) * (1 - tv)
    w_ne = tu * (1 - tv)
    w_sw = (1 - tu) * tv
    w_se = tu * tv
    weights = np.stack([w_nw, w_ne, w_sw, w_se], axis=1)

    corner_u = -1.0 + (2 * cols + 1) / P
    corner_v = 1.0 - (2 * rows + 1) / P
    deltas = np.stack([(qc[:, 0:1] - corner_u) / cell, (qc[:, 1:2] - corner_v) / cell], axis=2)
    return EnsembleGeometry(rows=rows, cols=cols, weights=weights, deltas=deltas, clamped=clamped)


def f_theta(params: FThetaParams, z_k: Tensor, delta: Tensor) -> Tensor:
    """Implicit decoder: affine layer over concat(latent, cell-unit offset)."""
    joined = concat([z_k, delta], axis=-1)
    return matmul(joined, params.weight) + params.bias


def inr_query_batch(params: FThetaParams, unfolded: Tensor, queries: np.ndarray, normalize: bool = True) -> Tensor:
    """Localized embeddings for one query per sample.

    unfolded: (N, P, P, 9D); queries: (N, 2) local coordinates. Returns
    (N, D), L2-normalized unless normalize=False; differentiable back to
    the feature map and the decoder parameters.
    """
    P = unfolded.shape[1]
    geom = ensemble_weights(queries, P)
    dtype = unfolded.dtype
    out = None
    for k in range(4):
        z_k = gather_cells(unfolded, geom.rows[:, k], geom.cols[:, k])
        delta = Tensor(geom.deltas[:, k, :].astype(dtype))
        pred = f_theta(params, z_k, delta)
        w = Tensor(geom.weights[:, k : k + 1].astype(dtype))
        term = pred * w
        out = term if out is None else out + term
    return l2_normalize_rows(out) if normalize else out


def inr_query(params: FThetaParams, unfolded: Tensor, query, normalize: bool = True) -> Tensor:
    """Single-sample convenience wrapper; unfolded (P, P, 9D), query LocalCoord."""
    u, v = (query.u, query.v) if hasattr(query, "u") else (query[0], query[1])
    batched = unfolded.reshape((1,) + unfolded.shape)
    out = inr_query_batch(params, batched, np.array([[u, v]]), normalize=normalize)
    return out[0]


def bilinear_oracle(grid: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Plain bilinear interpolation over patch centers, for cross-checking.

    grid: (P, P, C) with row 0 northernmost; queries: (n, 2) of local (u, v).
    Brackets each query between patch centers by linear search and composes
    two 1-d lerps; shares no code with the graph path.
    """
    P = grid.shape[0]
    centers_u = [-1.0 + (2 * b + 1) / P for b in range(P)]
    centers_v = [1.0 - (2 * a + 1) / P for a in range(P)]  # descending
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.zeros((len(q), grid.shape[2]))
    for i, (u, v) in enumerate(q):
        u = min(max(u, centers_u[0]), centers_u[-1])
        v = min(max(v, centers_v[-1]), centers_v[0])
        bw = 0
        while bw < P - 2 and centers_u[bw + 1] <= u:
            bw += 1
        an = 0
        while an < P - 2 and centers_v[an + 1] >= v:
            an += 1
        tu = (u - centers_u[bw]) / (centers_u[bw + 1] - centers_u[bw])
        tv = (centers_v[an] - v) / (centers_v[an] - centers_v[an + 1])
        north = (1 - tu) * grid[an, bw] + tu * grid[an, bw + 1]
        south = (1 - tu) * grid[an + 1, bw] + tu * grid[an + 1, bw + 1]
        out[i] = (1 - tv) * north + tv * south
    return out
