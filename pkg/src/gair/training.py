"""Pretraining engine: per-step pipeline (encode, localized lookup, both
contrastive losses, backward, AdamW with warmup-cosine schedule), memory
bank maintenance, JSON-lines metrics, and versioned binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import TripleBatch
from .encoders import EncoderConfig, ImageEncoder, LocEncoderConfig, LocationEncoder
from .errors import FormatError
from .inr import FThetaParams, inr_query_batch, unfold3x3
from .objectives import LossConfig, MemoryBank, combined_loss, incl_loss, secl_loss
from .tensor import Tensor, backward

__all__ = ["TrainConfig", "AdamW", "Model", "lr_at", "train_step", "train", "save_checkpoint", "load_checkpoint"]

CKPT_MAGIC = b"GAIRCKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    base_lr: float = 1e-3
    warmup_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.003
    grad_clip: float = 5.0
    schedule: str = "cosine"  # or "constant" after warmup
    seed: int = 7
    eval_every: int = 0  # 0 disables periodic checkpoints
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch size >= 2")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 (or constant)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(config.warmup_fraction * total_steps)
    if step < warmup:
        return config.base_lr * step / warmup
    if config.schedule == "constant":
        return config.base_lr
    if total_steps == warmup:
        return config.base_lr
    t = (step - warmup) / (total_steps - warmup)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Decoupled-weight-decay Adam over a name->Tensor parameter dict."""

    def __init__(self, params: dict, config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, lr: float):
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            if not np.all(np.isfinite(g)):
                raise ArithmeticError(f"non-finite gradient in parameter {name}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.values = p.values - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.values)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k]).reshape(self.m[k].shape).astype(self.m[k].dtype)
            self.v[k] = np.asarray(state["v"][k]).reshape(self.v[k].shape).astype(self.v[k].dtype)


class Model:
    """The full parameter bundle: RS encoder, SV encoder, location encoder,
    and the implicit decoder."""

    def __init__(self, rs_config: EncoderConfig, sv_config: EncoderConfig, loc_config: LocEncoderConfig, seed: int, dtype=np.float32):
        if rs_config.dim != sv_config.dim or rs_config.dim != loc_config.dim:
            raise ValueError("all encoders must share the embedding dimension")
        rng = np.random.Generator(np.random.Philox(key=(np.uint64(seed), np.uint64(0))))
        self.rs = ImageEncoder(rs_config, rng, prefix="rs", dtype=dtype)
        self.sv = ImageEncoder(sv_config, rng, prefix="sv", dtype=dtype)
        self.loc = LocationEncoder(loc_config, rng, prefix="loc", dtype=dtype)
        self.ftheta = FThetaParams.init(rs_config.dim, rng, dtype=dtype)
        self.seed = seed
        self.dtype = dtype

    def parameters(self) -> dict:
        out = {}
        out.update(self.rs.params)
        out.update(self.sv.params)
        out.update(self.loc.params)
        out.update(self.ftheta.named())
        return out

    def localized_rs(self, rs_images: np.ndarray, local_uv: np.ndarray) -> Tensor:
        fm = self.rs.encode_feature_maps(rs_images)
        return inr_query_batch(self.ftheta, unfold3x3(fm), local_uv)

    def configs(self) -> dict:
        return {
            "rs": asdict(self.rs.config),
            "sv": asdict(self.sv.config),
            "loc": asdict(self.loc.config),
            "seed": self.seed,
        }

    @staticmethod
    def from_configs(cfg: dict, dtype=np.float32) -> "Model":
        return Model(
            EncoderConfig(**cfg["rs"]),
            EncoderConfig(**cfg["sv"]),
            LocEncoderConfig(**cfg["loc"]),
            seed=cfg["seed"],
            dtype=dtype,
        )


def _clip_gradients(params: dict, max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train_step(model: Model, batch: TripleBatch, bank: MemoryBank, optimizer: AdamW, config: TrainConfig, lr: float) -> dict:
    """One optimization step; pushes the batch's location embeddings into
    the bank after the loss is computed."""
    t0 = time.perf_counter()
    optimizer.zero_grad()
    z_q = model.localized_rs(batch.rs, batch.local_uv)
    g_s = model.sv.encode_pooled(batch.sv)
    e_x = model.loc.encode(batch.lonlat)
    incl = incl_loss(z_q, g_s, config.loss.tau)
    secl = secl_loss(e_x, z_q, g_s, bank, config.loss.tau)
    total = combined_loss(incl, secl, config.loss.lambda_secl)
    backward(total)
    grad_norm = _clip_gradients(optimizer.params, config.grad_clip)
    loc_norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in model.loc.params.values() if p.grad is not None))
    optimizer.step(lr)
    bank.push(e_x.values.astype(np.float64))
    return {
        "incl": float(incl.values),
        "secl": float(secl.values),
        "total": float(total.values),
        "grad_norm": grad_norm,
        "grad_norm_loc": loc_norm,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def train(model, records, config: TrainConfig, bank=None, optimizer=None, start_step=0, metrics_fh=None, checkpoint_dir=None):
    """Run the full training loop; deterministic given (model seed, config).

    Epoch shuffling and augmentation draw from counter-based streams keyed
    by (seed, epoch), so a resumed run replays the identical batches.
    """
    import os

    bank = bank or MemoryBank(config.loss.bank_capacity)
    optimizer = optimizer or AdamW(model.parameters(), config)
    from .datagen import make_batch

    n = len(records)
    steps_per_epoch = n // config.batch_size  # last incomplete batch dropped
    if steps_per_epoch == 0:
        raise ValueError("dataset smaller than one batch")
    total_steps = steps_per_epoch * config.epochs
    step = start_step
    metrics_log = []
    while step < total_steps:
        epoch = step // steps_per_epoch
        perm_rng = np.random.Generator(np.random.Philox(key=(np.uint64(config.seed), np.uint64(2_000_000 + epoch))))
        perm = perm_rng.permutation(n)
        for b in range(steps_per_epoch):
            global_step = epoch * steps_per_epoch + b
            if global_step < step:
                continue
            aug_rng = np.random.Generator(np.random.Philox(key=(np.uint64(config.seed), np.uint64(3_000_000 + global_step))))
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            batch = make_batch(records, idx, aug_rng, augment=True)
            lr = lr_at(config, global_step, total_steps)
            metrics = train_step(model, batch, bank, optimizer, config, lr)
            metrics.update(step=global_step, lr=lr)
            metrics_log.append(metrics)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(metrics, sort_keys=True) + "\n")
                metrics_fh.flush()
            step = global_step + 1
            if checkpoint_dir and config.eval_every and step % config.eval_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_{step:06d}.bin"), model, optimizer, bank, config, step)
    return model, optimizer, bank, metrics_log


# -- checkpoint format ----------------------------------------------------------
#
# magic (8) | version <u32 | header_len <u64 | header JSON (utf-8) | raw data.
# The header lists every array (name, dtype, shape, offset into the data
# section, in order), the step, config, and config hash.


def save_checkpoint(path, model: Model, optimizer: AdamW, bank: MemoryBank, config: TrainConfig, step: int):
    params = model.parameters()
    arrays = []
    for name in sorted(params):
        arrays.append((f"param/{name}", params[name].values))
    for name in sorted(optimizer.m):
        arrays.append((f"adam_m/{name}", optimizer.m[name]))
        arrays.append((f"adam_v/{name}", optimizer.v[name]))
    arrays.append(("bank", bank.snapshot()))
    arrays.append(("rff_B", model.loc.B))

    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr).astype("<f8" if arr.dtype == np.float64 else "<f4").tobytes()
        entries.append({"name": name, "dtype": "f8" if arr.dtype == np.float64 else "f4", "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": CKPT_VERSION,
        "step": step,
        "adam_t": optimizer.t,
        "model": model.configs(),
        "train_config": _config_dict(config),
        "config_hash": config_hash({**model.configs(), **_config_dict(config)}),
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for b in blobs:
            fh.write(b)


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    return d


def load_checkpoint(path) -> dict:
    """Returns dict with model, optimizer state arrays, bank, config, step."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, header_len = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header_end = 20 + header_len
    try:
        header = json.loads(raw[20:header_end])
    except json.JSONDecodeError:
        raise FormatError("corrupt checkpoint header", offset=20) from None
    data = raw[header_end:]
    arrays = {}
    for e in header["arrays"]:
        dtype = "<" + e["dtype"]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + count * np.dtype(dtype).itemsize
        if end > len(data):
            raise FormatError(f"checkpoint truncated in array {e['name']}", offset=header_end + e["offset"])
        arrays[e["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=e["offset"]).reshape(e["shape"]).copy()

    model = Model.from_configs(header["model"])
    params = model.parameters()
    for name, p in params.items():
        p.values = arrays[f"param/{name}"].astype(p.dtype).reshape(p.shape)
    model.loc.B = arrays["rff_B"].astype(np.float64)
    config = TrainConfig(**header["train_config"])
    optimizer = AdamW(params, config)
    optimizer.t = header["adam_t"]
    for name in optimizer.m:
        optimizer.m[name] = arrays[f"adam_m/{name}"].astype(np.float32).reshape(optimizer.m[name].shape)
        optimizer.v[name] = arrays[f"adam_v/{name}"].astype(np.float32).reshape(optimizer.v[name].shape)
    bank = MemoryBank(config.loss.bank_capacity)
    bank_arr = arrays["bank"]
    if bank_arr.size:
        bank.load_state(bank_arr.astype(np.float64))
    return {
        "model": model,
        "optimizer": optimizer,
        "bank": bank,
        "config": config,
        "step": header["step"],
        "header": header,
    }
