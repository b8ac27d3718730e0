"""Transfer and analysis tools: cross-modal retrieval, linear and
non-linear probes over frozen embeddings, location-prior fusion,
concatenated-embedding regression, and similarity heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geo import GeoFootprint, GeoPoint
from .inr import inr_query_batch
from .tensor import Tensor, backward, log_softmax_rows, matmul

__all__ = [
    "retrieval_metrics",
    "ProbeHead",
    "fit_probe",
    "geo_aware_predict",
    "geo_regression",
    "HeatmapGrid",
    "heatmap_loc",
    "heatmap_inr",
    "write_heatmap_csv",
    "write_heatmap_pgm",
]


def retrieval_metrics(queries: np.ndarray, candidates: np.ndarray, truth: np.ndarray, ks=(1, 5, 10)) -> dict:
    """Rank candidates per query by cosine similarity (descending, ties to
    the lower index) and report recall@k and the median true rank."""
    if candidates.shape[0] == 0:
        raise ValueError("empty candidate set")
    sims = queries @ candidates.T
    # stable argsort of -sims gives descending order with lower-index ties first
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.empty(len(queries), dtype=int)
    for i, t in enumerate(truth):
        ranks[i] = int(np.where(order[i] == t)[0][0]) + 1
    out = {f"recall@{k}": float(np.mean(ranks <= k)) for k in ks}
    out["median_rank"] = float(np.median(ranks))
    return out


@dataclass
class ProbeHead:
    kind: str  # "linear" or "nonlinear"
    params: dict  # name -> Tensor

    def logits(self, x: Tensor) -> Tensor:
        if self.kind == "linear":
            return matmul(x, self.params["w"]) + self.params["b"]
        h = matmul(x, self.params["w1"]) + self.params["b1"]
        # sigmoid via exp: 1 / (1 + e^-x)
        h = Tensor(np.ones(1, dtype=x.dtype)) / ((-h).exp() + 1.0)
        return matmul(h, self.params["w2"]) + self.params["b2"]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(Tensor(x)).values

    @staticmethod
    def init(kind: str, d_in: int, d_out: int, rng: np.random.Generator, hidden: int = 64) -> "ProbeHead":
        def t(arr):
            return Tensor(arr.astype(np.float64), requires_grad=True)

        if kind == "linear":
            params = {"w": t(rng.normal(0, 1 / math.sqrt(d_in), (d_in, d_out))), "b": t(np.zeros(d_out))}
        elif kind == "nonlinear":
            params = {
                "w1": t(rng.normal(0, 1 / math.sqrt(d_in), (d_in, hidden))),
                "b1": t(np.zeros(hidden)),
                "w2": t(rng.normal(0, 1 / math.sqrt(hidden), (hidden, d_out))),
                "b2": t(np.zeros(d_out)),
            }
        else:
            raise ValueError(f"unknown probe kind {kind!r}")
        return ProbeHead(kind=kind, params=params)


def fit_probe(embeddings: np.ndarray, labels: np.ndarray, kind: str = "linear", task: str = "classification",
              epochs: int = 200, lr: float = 0.05, batch_size: int = 128, seed: int = 0,
              val_fraction: float = 0.25, hidden: int = 64):
    """Train a probe head on frozen embeddings; returns (head, held-out metric).

    Classification reports accuracy, regression reports RMSE, both on a
    deterministic trailing split.
    """
    if len(embeddings) != len(labels):
        raise ValueError("embedding/label count mismatch")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n = len(embeddings)
    n_val = max(1, int(n * val_fraction))
    x_tr, x_va = embeddings[: n - n_val], embeddings[n - n_val :]
    y_tr, y_va = labels[: n - n_val], labels[n - n_val :]
    d_in = embeddings.shape[1]
    if task == "classification":
        classes = int(np.max(labels)) + 1
        d_out = classes
    else:
        d_out = 1
    head = ProbeHead.init(kind, d_in, d_out, rng, hidden=hidden)

    # Plain Adam over the probe parameters; the backbone is untouched.
    m = {k: np.zeros_like(p.values) for k, p in head.params.items()}
    v = {k: np.zeros_like(p.values) for k, p in head.params.items()}
    t = 0
    for epoch in range(epochs):
        perm = rng.permutation(len(x_tr))
        for s in range(0, len(x_tr), batch_size):
            idx = perm[s : s + batch_size]
            xb = Tensor(x_tr[idx].astype(np.float64))
            logits = head.logits(xb)
            if task == "classification":
                mask = np.zeros((len(idx), d_out))
                mask[np.arange(len(idx)), y_tr[idx].astype(int)] = 1.0
                loss = -(log_softmax_rows(logits) * Tensor(mask)).sum().scale(1.0 / len(idx))
            else:
                diff = logits.reshape(len(idx)) - Tensor(y_tr[idx].astype(np.float64))
                loss = (diff * diff).mean()
            for p in head.params.values():
                p.zero_grad()
            backward(loss)
            t += 1
            for k, p in head.params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.values)
                m[k] = 0.9 * m[k] + 0.1 * g
                v[k] = 0.999 * v[k] + 0.001 * g * g
                p.values = p.values - lr * (m[k] / (1 - 0.9**t)) / (np.sqrt(v[k] / (1 - 0.999**t)) + 1e-8)

    pred = head.predict(x_va)
    if task == "classification":
        metric = float(np.mean(np.argmax(pred, axis=1) == y_va.astype(int)))
    else:
        metric = float(np.sqrt(np.mean((pred.reshape(-1) - y_va) ** 2)))
    return head, metric


def geo_aware_predict(log_p_image: np.ndarray, log_p_loc: np.ndarray) -> dict:
    """Fuse an image classifier with a location prior by adding log scores."""
    log_p_image = np.asarray(log_p_image, dtype=np.float64)
    log_p_loc = np.asarray(log_p_loc, dtype=np.float64)
    if log_p_image.shape != log_p_loc.shape:
        raise ValueError(f"score length mismatch: {log_p_image.shape} vs {log_p_loc.shape}")
    scores = log_p_image + log_p_loc
    shifted = scores - scores.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    return {"scores": scores, "probs": probs, "argmax": int(np.argmax(scores))}


def geo_regression(image_emb: np.ndarray, loc_emb: np.ndarray, head: ProbeHead) -> float:
    """Affine prediction over the concatenated image and location embeddings."""
    x = np.concatenate([np.asarray(image_emb), np.asarray(loc_emb)])
    expected = head.params["w"].shape[0]
    if x.shape[0] != expected:
        raise ValueError(f"head expects input width {expected}, got {x.shape[0]}")
    return float(head.predict(x[None, :])[0, 0])


@dataclass
class HeatmapGrid:
    origin: GeoPoint  # NW corner cell center
    resolution: float  # radians per cell, positive
    values: np.ndarray  # (rows, cols), row 0 northernmost

    def cell_center(self, row: int, col: int) -> GeoPoint:
        return GeoPoint(self.origin.lon + col * self.resolution, self.origin.lat - row * self.resolution)

    def argmax_cell(self) -> tuple:
        idx = int(np.argmax(self.values))
        return divmod(idx, self.values.shape[1])


def heatmap_loc(sv_emb: np.ndarray, loc_encoder, center: GeoPoint, resolution: float, rows: int, cols: int) -> HeatmapGrid:
    """Cosine similarity between one SV embedding and location embeddings on
    a mesh centered at `center`."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    origin = GeoPoint(center.lon - (cols - 1) / 2 * resolution, center.lat + (rows - 1) / 2 * resolution)
    lons = origin.lon + np.arange(cols) * resolution
    lats = origin.lat - np.arange(rows) * resolution
    lon_g, lat_g = np.meshgrid(lons, lats)
    pts = np.stack([lon_g.reshape(-1), lat_g.reshape(-1)], axis=1)
    emb = loc_encoder.encode(pts).values
    sims = emb @ np.asarray(sv_emb)
    return HeatmapGrid(origin=origin, resolution=resolution, values=sims.reshape(rows, cols))


def heatmap_inr(sv_emb: np.ndarray, ftheta, unfolded, footprint: GeoFootprint, resolution: float) -> HeatmapGrid:
    """Cosine similarity between one SV embedding and localized RS embeddings
    on a mesh over the footprint's interpolation hull."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    P = unfolded.shape[1]
    hull = 1.0 - 1.0 / P
    lon_span = footprint.lon_max - footprint.lon_min
    lat_span = footprint.lat_max - footprint.lat_min
    lon_c = (footprint.lon_min + footprint.lon_max) / 2
    lat_c = (footprint.lat_min + footprint.lat_max) / 2
    cols = max(1, int(hull * lon_span / resolution)) + 1
    rows = max(1, int(hull * lat_span / resolution)) + 1
    lons = lon_c + (np.arange(cols) - (cols - 1) / 2) * resolution
    lats = lat_c - (np.arange(rows) - (rows - 1) / 2) * resolution
    us = 2 * (lons - footprint.lon_min) / lon_span - 1
    vs = 2 * (lats - footprint.lat_min) / lat_span - 1
    u_g, v_g = np.meshgrid(us, vs)
    queries = np.stack([u_g.reshape(-1), v_g.reshape(-1)], axis=1)
    n = len(queries)
    rep = Tensor(np.repeat(unfolded.values, n, axis=0))
    emb = inr_query_batch(ftheta, rep, queries).values
    sims = emb @ np.asarray(sv_emb)
    return HeatmapGrid(origin=GeoPoint(lons[0], lats[0]), resolution=resolution, values=sims.reshape(rows, cols))


def write_heatmap_csv(grid: HeatmapGrid, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid.values:
            writer.writerow([f"{v:.9g}" for v in row])


def write_heatmap_pgm(grid: HeatmapGrid, path):
    """8-bit binary PGM; values mapped affinely from [-1, 1] to [0, 255]."""
    rows, cols = grid.values.shape
    pixels = np.clip(np.round((grid.values + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode())
        fh.write(pixels.tobytes())
