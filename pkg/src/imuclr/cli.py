"""Command-line entry point.

Commands: gen-data, pretrain, probe, ablate, gradcheck, import-csv,
inspect-queue. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error. Flags mirror config-file keys one-to-one; a JSON
config file can supply any value and explicit flags win over it. The
IMUCLR_OUT environment variable provides a default output root for
commands that write run directories.
"""

from __future__ import annotations

import argparse
import base64
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .data import (
    SyntheticSpec,
    dataset_content_hash,
    gen_synthetic,
    import_csv,
    load_dataset,
    save_dataset,
    strip_alignment,
)
from .encoder import EncoderConfig, load_encoder
from .errors import (
    ConfigError,
    ContractViolationError,
    DataError,
    EmptyBatchError,
    ParseError,
    ShapeError,
    TrainingDivergenceError,
)
from .evaluation import ProbeConfig, few_shot_eval
from .experiments import emit_results, grid_from_json, preset_grid, run_ablation
from .losses import LossConfig
from .nn_ops import set_adjoint_fault
from .seeding import make_rng
from .training import TrainConfig, load_checkpoint, pretrain
from .verification import GRADCHECK_TERMS, gradcheck_terms

_USAGE_ERRORS = (ConfigError, DataError, ParseError, ShapeError,
                 EmptyBatchError, ContractViolationError)


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get("IMUCLR_OUT")
    if root:
        return Path(root) / command
    raise ConfigError(f"--out is required (or set IMUCLR_OUT) for {command}")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    raw = json.loads(Path(path).read_text())
    # a run manifest is accepted directly: re-running with it reproduces the run
    if "config" in raw and isinstance(raw["config"], dict) and "command" in raw:
        cfg = dict(raw["config"])
        if raw.get("aligned_fraction") is not None:
            cfg["aligned_fraction"] = raw["aligned_fraction"]
        return cfg
    return raw


def _pick(args, flag: str, file_cfg: dict, key_path: list[str], default):
    """Flag value if explicitly set, else config-file value, else default."""
    val = getattr(args, flag, None)
    if val is not None:
        return val
    node = file_cfg
    for key in key_path:
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


def _build_train_config(args, ds, file_cfg: dict | None = None) -> TrainConfig:
    if file_cfg is None:
        file_cfg = _load_config_file(getattr(args, "config", None))
    conv = _pick(args, "conv_channels", file_cfg, ["encoder", "conv_channels"], None)
    if isinstance(conv, str):
        conv = tuple(int(c) for c in conv.split(","))
    elif isinstance(conv, list):
        conv = tuple(conv)
    enc_defaults = EncoderConfig()
    embed = _pick(args, "embed_dim", file_cfg, ["encoder", "embed_dim"], None)
    if embed is None:
        # The multimodal terms align to the dataset's embedding space.
        embed = ds.embed_dim if ds.video_mask.any() else enc_defaults.embed_dim
    encoder = EncoderConfig(
        in_channels=ds.imu.shape[1],
        conv_channels=conv or enc_defaults.conv_channels,
        kernel=_pick(args, "kernel", file_cfg, ["encoder", "kernel"], enc_defaults.kernel),
        pool_window=_pick(args, "pool_window", file_cfg, ["encoder", "pool_window"],
                          enc_defaults.pool_window),
        gn_groups=_pick(args, "gn_groups", file_cfg, ["encoder", "gn_groups"],
                        enc_defaults.gn_groups),
        gru_hidden=_pick(args, "gru_hidden", file_cfg, ["encoder", "gru_hidden"],
                         enc_defaults.gru_hidden),
        gru_layers=_pick(args, "gru_layers", file_cfg, ["encoder", "gru_layers"],
                         enc_defaults.gru_layers),
        head_hidden=_pick(args, "head_hidden", file_cfg, ["encoder", "head_hidden"],
                          enc_defaults.head_hidden),
        embed_dim=embed,
    )
    loss = LossConfig(
        alpha=_pick(args, "alpha", file_cfg, ["loss", "alpha"], 1.0),
        beta=_pick(args, "beta", file_cfg, ["loss", "beta"], 1.0),
        gamma=_pick(args, "gamma", file_cfg, ["loss", "gamma"], 1.0),
        tau_init=_pick(args, "tau_init", file_cfg, ["loss", "tau_init"], 0.07),
        per_term_tau=bool(_pick(args, "per_term_tau", file_cfg,
                                ["loss", "per_term_tau"], False)),
    )
    from .augment import AugmentConfig
    aug = AugmentConfig(
        scale_low=_pick(args, "scale_low", file_cfg, ["augment", "scale_low"], 0.5),
        scale_high=_pick(args, "scale_high", file_cfg, ["augment", "scale_high"], 2.0),
        p_reverse=_pick(args, "p_reverse", file_cfg, ["augment", "p_reverse"], 0.5),
        per_channel_scale=bool(_pick(args, "per_channel_scale", file_cfg,
                                     ["augment", "per_channel"], False)),
    )
    return TrainConfig(
        batch_size=_pick(args, "batch_size", file_cfg, ["batch_size"], 64),
        epochs=_pick(args, "epochs", file_cfg, ["epochs"], 20),
        lr=_pick(args, "lr", file_cfg, ["lr"], 1e-4),
        seed=_pick(args, "seed", file_cfg, ["seed"], 0),
        loss=loss,
        augment=aug,
        encoder=encoder,
        queue_capacity=_pick(args, "queue_capacity", file_cfg, ["queue_capacity"], 4096),
        queue_min=_pick(args, "queue_min", file_cfg, ["queue_min"], 128),
        checkpoint_every=_pick(args, "ckpt_every", file_cfg, ["checkpoint_every"], 0),
    )


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        segments_per_class=args.per_class,
        T=args.segment_length,
        sample_rate_hz=args.rate,
        embed_dim=args.embed_dim,
        imu_noise=args.imu_noise,
        video_noise=args.video_noise,
        text_noise=args.text_noise,
        text_coarseness=args.coarseness,
        seed=args.seed,
    )
    ds = gen_synthetic(spec)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_segments} segments ({ds.n_classes} classes, "
          f"T={ds.segment_length}, d={ds.embed_dim}) to {args.out}")
    print(f"splits: train={ds.train_range} test={ds.test_range}")
    print(f"content hash: {dataset_content_hash(args.out)}")
    return 0


def cmd_pretrain(args) -> int:
    ds = load_dataset(args.data)
    file_cfg = _load_config_file(args.config)
    cfg = _build_train_config(args, ds, file_cfg)
    out = _out_dir(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)

    aligned_fraction = args.aligned_fraction
    if aligned_fraction is None:
        aligned_fraction = file_cfg.get("aligned_fraction")
    if aligned_fraction is not None:
        ds = strip_alignment(ds, aligned_fraction, make_rng(cfg.seed, "strip"))
    stats = ds.alignment_stats()
    print(f"aligned segments: video={stats['video_aligned']} "
          f"text={stats['text_aligned']} of {ds.n_segments}")

    manifest_path = out / "run_manifest.json"
    manifest = {
        "tool": "imuclr",
        "version": __version__,
        "command": "pretrain",
        "dataset": {"path": str(args.data),
                    "content_hash": dataset_content_hash(args.data)},
        "aligned_fraction": aligned_fraction,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "finished_at": None,
    }
    _write_manifest(manifest_path, manifest)

    ckpt = out / "checkpoint.ckpt"
    result = pretrain(
        ds, cfg,
        log_path=str(out / "train_log.jsonl"),
        checkpoint_path=str(ckpt),
        resume_from=args.resume,
    )
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    _write_manifest(manifest_path, manifest)

    first, last = result.log[0]["total"], result.log[-1]["total"]
    print(f"{len(result.log)} steps; loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _check_probe_compat(enc_cfg: EncoderConfig, ds) -> None:
    if ds.imu.shape[1] != enc_cfg.in_channels:
        raise ConfigError(
            f"checkpoint expects {enc_cfg.in_channels} channels but dataset has "
            f"{ds.imu.shape[1]}"
        )
    if ds.video_mask.any() and ds.embed_dim != enc_cfg.embed_dim:
        raise ConfigError(
            f"checkpoint embed_dim {enc_cfg.embed_dim} does not match dataset "
            f"embedding dim {ds.embed_dim}"
        )


def cmd_probe(args) -> int:
    if not args.standard_training and not args.ckpt:
        raise ConfigError("probe needs --ckpt (or --standard-training)")
    ds = load_dataset(args.data)
    shots = [int(s) for s in args.shots.split(",")]
    if args.standard_training:
        # no-pretraining baseline: random init, encoder and classifier
        # trained jointly on the few-shot labels (untuned by design; a
        # compact backbone keeps joint training tractable)
        from .evaluation import standard_training_eval

        enc_cfg = EncoderConfig(
            in_channels=ds.imu.shape[1], conv_channels=(16, 32), kernel=5,
            gn_groups=4, gru_hidden=32, gru_layers=1, head_hidden=32,
            embed_dim=ds.embed_dim if ds.video_mask.any() else 32,
        )
        reports = [standard_training_eval(ds, enc_cfg, n, trials=args.trials,
                                          base_seed=args.seed)
                   for n in shots]
    else:
        params = load_encoder(args.ckpt)
        _check_probe_compat(params.config, ds)
        reports = few_shot_eval(
            params, ds, shots, trials=args.trials, base_seed=args.seed,
            task=args.task, probe_cfg=ProbeConfig(seed=args.seed),
        )
    out = _out_dir(args, "probe")
    if out.suffix not in (".csv", ".json"):
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"results.{args.format}"
    emit_results(reports, str(out), fmt=args.format)
    for rep in reports:
        print(f"{rep.task} n={rep.n_per_class}: "
              f"{rep.mean:.4f} +/- {rep.stderr:.4f} over {rep.trials} trials")
    print(f"results: {out}")
    return 0


def cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    shots = [int(s) for s in args.shots.split(",")]
    if args.grid:
        grid = grid_from_json(args.grid, trials=args.trials)
    else:
        grid = preset_grid(args.preset, shots=shots, trials=args.trials)
    base_cfg = _build_train_config(args, ds)
    out = _out_dir(args, "ablate")
    out.mkdir(parents=True, exist_ok=True)

    eval_seed = args.seed if args.seed is not None else base_cfg.seed
    outcomes = run_ablation(ds, grid, base_cfg, eval_seed=eval_seed,
                            workers=args.workers)
    reports = [rep for oc in outcomes for rep in oc.reports]
    if reports:
        emit_results(reports, str(out / "results.csv"), fmt="csv")
    diagnostics = {
        oc.point.name: None if oc.diagnostic is None else dataclasses.asdict(oc.diagnostic)
        for oc in outcomes
    }
    errors = {oc.point.name: oc.error for oc in outcomes if oc.error}
    _write_manifest(out / "diagnostics.json",
                    {"diagnostics": diagnostics, "errors": errors})

    for oc in outcomes:
        if oc.error:
            print(f"{oc.point.name}: FAILED ({oc.error})")
            continue
        summary = ", ".join(f"n={r.n_per_class}: {r.mean:.3f}+/-{r.stderr:.3f}"
                            for r in oc.reports)
        flag = " [collapsed]" if oc.diagnostic and oc.diagnostic.collapsed else ""
        print(f"{oc.point.name}: {summary}{flag}")
    print(f"results: {out / 'results.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    terms = tuple(args.terms.split(",")) if args.terms else GRADCHECK_TERMS
    for term in terms:
        if term not in GRADCHECK_TERMS:
            raise ConfigError(f"unknown term '{term}'; available: {GRADCHECK_TERMS}")
    if args.inject_fault:
        set_adjoint_fault(True)
    try:
        results = gradcheck_terms(terms, seed=args.seed, eps=args.eps)
    finally:
        set_adjoint_fault(False)
    failed = False
    for term, err in results.items():
        status = "ok" if err < args.tol else "FAIL"
        print(f"{term:9s} worst rel err {err:.3e}  [{status}]")
        failed = failed or err >= args.tol
    return 1 if failed else 0


def cmd_import_csv(args) -> int:
    schema = None
    if args.schema:
        schema = json.loads(Path(args.schema).read_text())
    ds = import_csv(
        args.csv,
        sample_rate_hz=args.rate,
        label_column=args.label_col,
        schema=schema,
        timestamp_column=args.timestamp_col,
        window_s=args.window_s,
        hop_s=args.hop_s,
    )
    save_dataset(ds, args.out)
    print(f"imported {ds.n_segments} windows, classes: {ds.class_names}")
    return 0


def cmd_inspect_queue(args) -> int:
    state = load_checkpoint(args.ckpt)
    if state.queue is None:
        print("checkpoint has no feature queue (gamma was 0)")
        return 0
    stats = state.queue.snapshot_stats()
    print(f"size={stats.size} capacity={state.queue.capacity} "
          f"steps=[{stats.oldest_step}, {stats.newest_step}] "
          f"mean_video_similarity={stats.mean_pairwise_video_similarity}")
    if args.dump:
        with open(args.dump, "w") as f:
            for e in state.queue.entries():
                f.write(json.dumps({
                    "insert_step": e.insert_step,
                    "z_m": base64.b64encode(e.z_m.tobytes()).decode(),
                    "z_v": base64.b64encode(e.z_v.tobytes()).decode(),
                    "z_t": None if e.z_t is None
                    else base64.b64encode(e.z_t.tobytes()).decode(),
                }) + "\n")
        print(f"dumped {stats.size} entries to {args.dump}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau-init", dest="tau_init", type=float)
    p.add_argument("--per-term-tau", dest="per_term_tau", action="store_const", const=True)
    p.add_argument("--queue-capacity", dest="queue_capacity", type=int)
    p.add_argument("--queue-min", dest="queue_min", type=int)
    p.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    p.add_argument("--scale-low", dest="scale_low", type=float)
    p.add_argument("--scale-high", dest="scale_high", type=float)
    p.add_argument("--p-reverse", dest="p_reverse", type=float)
    p.add_argument("--per-channel-scale", dest="per_channel_scale",
                   action="store_const", const=True)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--gru-hidden", dest="gru_hidden", type=int)
    p.add_argument("--gru-layers", dest="gru_layers", type=int)
    p.add_argument("--head-hidden", dest="head_hidden", type=int)
    p.add_argument("--kernel", dest="kernel", type=int)
    p.add_argument("--gn-groups", dest="gn_groups", type=int)
    p.add_argument("--conv-channels", dest="conv_channels",
                   help="comma-separated, e.g. 64,128,256")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imuclr",
                                     description="IMU encoder pretraining toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic aligned-triplet dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", dest="per_class", type=int, default=250)
    p.add_argument("--segment-length", dest="segment_length", type=int, default=100)
    p.add_argument("--rate", type=float, default=20.0)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=64)
    p.add_argument("--imu-noise", dest="imu_noise", type=float, default=0.7)
    p.add_argument("--video-noise", dest="video_noise", type=float, default=0.25)
    p.add_argument("--text-noise", dest="text_noise", type=float, default=0.1)
    p.add_argument("--coarseness", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain an encoder on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--aligned-fraction", dest="aligned_fraction", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="few-shot linear probe of a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--shots", default="10,50,100")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", default="few-shot")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--standard-training", dest="standard_training",
                   action="store_true",
                   help="no-pretraining baseline: train encoder + classifier "
                        "jointly on the few-shot labels (no --ckpt needed)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="run a grid of pretraining objectives")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=sorted(k for k in ("fig4", "fig5")))
    p.add_argument("--grid", help="JSON grid file (overrides --preset)")
    p.add_argument("--shots", default="10,50,100")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--workers", type=int, default=1,
                   help="grid points to run in parallel processes")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss terms")
    p.add_argument("--terms", help="comma list from: ss,mm,nn,combined")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true",
                   help="corrupt one adjoint to demonstrate checker sensitivity")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("import-csv", help="ingest a labeled 6-channel CSV recording")
    p.add_argument("--csv", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--label-col", dest="label_col", default="label")
    p.add_argument("--schema", help="JSON role->column map")
    p.add_argument("--timestamp-col", dest="timestamp_col")
    p.add_argument("--window-s", dest="window_s", type=float, default=5.0)
    p.add_argument("--hop-s", dest="hop_s", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_csv)

    p = sub.add_parser("inspect-queue", help="show (and optionally dump) the feature queue")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dump", help="write queue entries as JSON lines here")
    p.set_defaults(func=cmd_inspect_queue)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.checkpoint_path:
            print(f"last good checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
