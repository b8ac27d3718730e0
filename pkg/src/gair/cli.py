"""Command-line entry point: data generation, pretraining, evaluation,
heatmap emission, and the gradient audit.

Exit codes: 0 success, 1 check failure, 2 usage, 3 data/format error,
4 numeric divergence. Logs go to stderr; machine-readable output to files
or stdout. A JSON config file may supply any flag's value; explicit flags
win. GAIR_THREADS caps numpy worker threads.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from .datagen import DataConfig, generate_records, make_batch, read_dataset, write_dataset
from .encoders import EncoderConfig, LocEncoderConfig
from .errors import FormatError
from .evalkit import fit_probe, heatmap_inr, heatmap_loc, retrieval_metrics, write_heatmap_csv, write_heatmap_pgm
from .geo import GeoPoint
from .inr import unfold3x3
from .objectives import LossConfig
from .training import Model, TrainConfig, config_hash, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DEG = math.pi / 180.0


def _log(msg: str):
    print(msg, file=sys.stderr)


def _apply_threads_cap():
    cap = os.environ.get("GAIR_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config file {path}: {exc}") from None


def _merged(args, file_cfg: dict, key: str, default):
    """Flag > config file > default."""
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    if key in file_cfg:
        return file_cfg[key]
    return default


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gair", description=__doc__)
    parser.add_argument("--config", help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic triple dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="contrastive pretraining on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--schedule", choices=["cosine", "constant"])
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lambda_secl", type=float)
    p.add_argument("--bank-capacity", type=int)
    p.add_argument("--rff-sigma", type=float)
    p.add_argument("--rff-sigma-min", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("evaluate", help="retrieval metrics and probes on a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="metrics JSON path (default stdout)")
    e.add_argument("--probe", action="append", choices=["linear", "nonlinear"], default=None)
    e.add_argument("--holdout", type=int, default=256)

    h = sub.add_parser("heatmap", help="similarity heatmap around one sample")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--index", type=int, required=True)
    h.add_argument("--mode", choices=["loc", "inr"], default="loc")
    h.add_argument("--resolution", type=float, default=0.01, help="degrees per cell")
    h.add_argument("--cells", type=int, default=9, help="grid rows/cols for loc mode")
    h.add_argument("--out", required=True, help="output path prefix")

    sub.add_parser("gradcheck", help="finite-difference audit of all ops")
    return parser


def _dataset_config(args, file_cfg) -> DataConfig:
    cfg = DataConfig()
    cfg.count = int(_merged(args, file_cfg, "count", cfg.count))
    cfg.seed = int(_merged(args, file_cfg, "seed", cfg.seed))
    for key in ("region_deg", "footprint_deg", "rs_size", "sv_size", "temporal_variants", "modes",
                "sigma_rs", "sigma_sv", "sigma_temporal"):
        if key in file_cfg:
            setattr(cfg, key, type(getattr(cfg, key))(file_cfg[key]))
    return cfg


def cmd_gen_data(args, file_cfg) -> int:
    cfg = _dataset_config(args, file_cfg)
    if cfg.count <= 0:
        _log("error: --count must be positive")
        return EXIT_USAGE
    try:
        records = generate_records(cfg)
        manifest_path = write_dataset(records, args.out, cfg)
    except OSError as exc:
        _log(f"error: cannot write dataset: {exc}")
        return EXIT_USAGE
    region = cfg.region()
    _log(f"wrote {len(records)} records to {manifest_path}")
    print(json.dumps({
        "manifest": manifest_path,
        "count": len(records),
        "seed": cfg.seed,
        "region_deg": [region.lon_min / _DEG, region.lon_max / _DEG, region.lat_min / _DEG, region.lat_max / _DEG],
    }))
    return EXIT_OK


def _train_config(args, file_cfg) -> TrainConfig:
    cfg = TrainConfig()
    cfg.batch_size = int(_merged(args, file_cfg, "batch_size", cfg.batch_size))
    cfg.epochs = int(_merged(args, file_cfg, "epochs", cfg.epochs))
    cfg.base_lr = float(_merged(args, file_cfg, "lr", cfg.base_lr))
    cfg.beta1 = float(_merged(args, file_cfg, "beta1", cfg.beta1))
    cfg.beta2 = float(_merged(args, file_cfg, "beta2", cfg.beta2))
    cfg.weight_decay = float(_merged(args, file_cfg, "weight_decay", cfg.weight_decay))
    cfg.warmup_fraction = float(_merged(args, file_cfg, "warmup", cfg.warmup_fraction))
    cfg.schedule = _merged(args, file_cfg, "schedule", cfg.schedule)
    cfg.seed = int(_merged(args, file_cfg, "seed", cfg.seed))
    cfg.eval_every = int(_merged(args, file_cfg, "eval_every", cfg.eval_every))
    cfg.loss = LossConfig(
        tau=float(_merged(args, file_cfg, "tau", 0.07)),
        lambda_secl=float(_merged(args, file_cfg, "lambda_secl", 1.0)),
        bank_capacity=int(_merged(args, file_cfg, "bank_capacity", 4096)),
    )
    return cfg


def build_model(data_cfg: dict, seed: int, dim: int = 64, rff_sigma: float = 1000.0, rff_sigma_min: float = 0.0) -> Model:
    rs_cfg = EncoderConfig(channels=data_cfg["rs_channels"], image_size=data_cfg["rs_size"], dim=dim)
    sv_cfg = EncoderConfig(channels=1, image_size=data_cfg["sv_size"], dim=dim)
    loc_cfg = LocEncoderConfig(sigma=rff_sigma, sigma_min=rff_sigma_min, dim=dim)
    return Model(rs_cfg, sv_cfg, loc_cfg, seed=seed)


def cmd_pretrain(args, file_cfg) -> int:
    try:
        records, manifest = read_dataset(args.data)
    except (FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    cfg = _train_config(args, file_cfg)
    os.makedirs(args.out, exist_ok=True)

    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except (FormatError, OSError) as exc:
            _log(f"error: {exc}")
            return EXIT_DATA
        model, optimizer, bank, start = state["model"], state["optimizer"], state["bank"], state["step"]
        cfg = state["config"]
    else:
        dim = int(_merged(args, file_cfg, "dim", 64))
        sigma = float(_merged(args, file_cfg, "rff_sigma", 1000.0))
        sigma_min = float(_merged(args, file_cfg, "rff_sigma_min", 0.0))
        model = build_model(manifest["config"], seed=cfg.seed, dim=dim, rff_sigma=sigma, rff_sigma_min=sigma_min)
        optimizer = bank = None
        start = 0

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    run_cfg = {"train": asdict(cfg), "data": manifest["config"]}
    with open(os.path.join(args.out, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(run_cfg, fh, indent=1, sort_keys=True)
    mode = "a" if args.resume else "w"
    try:
        with open(metrics_path, mode, encoding="utf-8") as fh:
            model, optimizer, bank, _ = train(
                model, records, cfg, bank=bank, optimizer=optimizer,
                start_step=start, metrics_fh=fh, checkpoint_dir=args.out,
            )
    except ArithmeticError as exc:
        _log(f"error: numeric divergence: {exc}")
        return EXIT_NUMERIC
    final = os.path.join(args.out, "checkpoint.bin")
    total_steps = (len(records) // cfg.batch_size) * cfg.epochs
    save_checkpoint(final, model, optimizer, bank, cfg, total_steps)
    _log(f"wrote {final}")
    print(json.dumps({"checkpoint": final, "metrics": metrics_path, "steps": total_steps}))
    return EXIT_OK


def _holdout_embeddings(model: Model, records, holdout: int, batch: int = 64):
    """Embeddings for the trailing holdout split, computed without augmentation."""
    idx = list(range(len(records) - holdout, len(records)))
    rng = np.random.default_rng(0)  # unused: augment off
    z_all, g_all, cls, reg = [], [], [], []
    for s in range(0, len(idx), batch):
        chunk = make_batch(records, idx[s : s + batch], rng, augment=False)
        z_all.append(model.localized_rs(chunk.rs, chunk.local_uv).values)
        g_all.append(model.sv.encode_pooled(chunk.sv).values)
        cls.append(chunk.label_class)
        reg.append(chunk.label_reg)
    return np.concatenate(z_all), np.concatenate(g_all), np.concatenate(cls), np.concatenate(reg)


def cmd_evaluate(args, file_cfg) -> int:
    try:
        state = load_checkpoint(args.checkpoint)
        records, manifest = read_dataset(args.data)
    except (FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    model = state["model"]
    holdout = min(args.holdout, len(records))
    z, g, cls, _ = _holdout_embeddings(model, records, holdout)
    truth = np.arange(len(z))
    report = {
        "task": "sv_to_inr_rs_retrieval",
        "split": f"holdout[{holdout}]",
        "metrics": retrieval_metrics(g, z, truth, ks=(1, 5, 10)),
        "config_hash": state["header"]["config_hash"],
    }
    for kind in args.probe or []:
        _, acc = fit_probe(g, cls, kind=kind, task="classification", seed=0)
        report[f"probe_{kind}_accuracy"] = acc
    out = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    else:
        print(out)
    return EXIT_OK


def cmd_heatmap(args, file_cfg) -> int:
    try:
        state = load_checkpoint(args.checkpoint)
        records, _ = read_dataset(args.data)
    except (FormatError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    if not 0 <= args.index < len(records):
        _log(f"error: sample index {args.index} out of range (dataset has {len(records)})")
        return EXIT_USAGE
    model = state["model"]
    r = records[args.index]
    rng = np.random.default_rng(0)
    batch = make_batch(records, [args.index], rng, augment=False)
    sv_emb = model.sv.encode_pooled(batch.sv).values[0]
    res_rad = args.resolution * _DEG
    if args.mode == "loc":
        center = GeoPoint((r.footprint.lon_min + r.footprint.lon_max) / 2, (r.footprint.lat_min + r.footprint.lat_max) / 2)
        grid = heatmap_loc(sv_emb, model.loc, center, res_rad, args.cells, args.cells)
    else:
        fm = model.rs.encode_feature_maps(batch.rs)
        grid = heatmap_inr(sv_emb, model.ftheta, unfold3x3(fm), r.footprint, res_rad)
    write_heatmap_csv(grid, args.out + ".csv")
    write_heatmap_pgm(grid, args.out + ".pgm")
    row, col = grid.argmax_cell()
    peak = grid.cell_center(row, col)
    print(json.dumps({
        "argmax_cell": [row, col],
        "argmax_lonlat_deg": [peak.lon / _DEG, peak.lat / _DEG],
        "true_lonlat_deg": [r.lon / _DEG, r.lat / _DEG],
        "csv": args.out + ".csv",
        "pgm": args.out + ".pgm",
    }))
    return EXIT_OK


def cmd_gradcheck(args, file_cfg) -> int:
    from .gradaudit import run_audit

    reports = run_audit(tolerance=1e-4)
    width = max(len(r.op_name) for r in reports)
    all_passed = True
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.op_name:<{width}}  max_rel_err={r.max_relative_error:.3e}  tol={r.tolerance:.0e}  {status}")
        all_passed &= r.passed
    return EXIT_OK if all_passed else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    _apply_threads_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        file_cfg = _load_config_file(args.config)
    except FormatError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    handlers = {
        "gen-data": cmd_gen_data,
        "pretrain": cmd_pretrain,
        "evaluate": cmd_evaluate,
        "heatmap": cmd_heatmap,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args, file_cfg)
    except FormatError as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
