"""Command-line entry point.

Subcommands cover the whole workflow: gen-data, train, finetune, eval,
stream, sweep, attribute. Config values resolve as defaults < config
file < command-line flags. Every command that produces a run directory
writes exactly one manifest.json recording the command line, the merged
config, seeds, input hashes and output hashes; rerunning with the same
inputs reproduces the non-manifest outputs bit for bit.

Exit codes: 0 success, 2 usage or malformed input, 3 no detection
(stream/attribute), 4 runtime failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_DETECTION = 3
EXIT_RUNTIME = 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_config_file(path) -> dict:
    from .errors import ConfigError
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: invalid JSON ({e})")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path}: expected a JSON object")
    known = {"model", "train", "finetune", "synthetic", "loss"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"config file {path}: unknown sections {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    out = dict(cfg.get(name, {}))
    if name in ("train", "finetune") and "loss" in cfg:
        out.setdefault("loss", dict(cfg["loss"]))
    return out


def _run_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_manifest(out_dir, command, argv, config_snapshot, seed,
                    inputs, outputs, started, extra=None) -> None:
    from . import __version__
    manifest = {
        "command": command,
        "argv": list(argv),
        "run_id": _run_id({"command": command, "config": config_snapshot}),
        "seed": seed,
        "config": config_snapshot,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in outputs],
        "wall_clock_seconds": round(time.time() - started, 3),
        "package_version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _parse_floats(text: str):
    from .errors import ConfigError
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise ConfigError(f"expected at least one number in {text!r}")
    return values


def _prepared_dataset(path, seed):
    """Load raw JSONL, split by user, z-score on the train split."""
    from . import data as D
    ds = D.load_jsonl(path)
    ds.split = D.split_users({s.user_id for s in ds.sequences}, seed)
    return D.normalize_dataset(ds)


def cmd_gen_data(args, argv) -> int:
    from . import data as D
    started = time.time()
    cfg_file = _section(_load_config_file(args.config), "synthetic")
    kwargs = dict(cfg_file)
    for flag, key in (("users", "n_users"), ("days", "days_per_user"),
                      ("features", "input_dim"), ("signal_features", "signal_features"),
                      ("noise_std", "noise_std"), ("holiday_rate", "holiday_rate"),
                      ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            kwargs[key] = value
    cfg = D.SyntheticConfig(**kwargs)
    ds = D.generate_synthetic_dataset(cfg)
    D.save_jsonl(ds, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    from dataclasses import asdict
    _write_manifest(out_dir, "gen-data", argv, {"synthetic": asdict(cfg)},
                    cfg.seed, [], [args.out], started)
    print(f"wrote {len(ds.sequences)} sequences to {args.out}")
    return EXIT_OK


def _model_config(cfg_file_section, input_dim_from_data):
    from . import model as M
    section = dict(cfg_file_section)
    section.setdefault("input_dim", input_dim_from_data)
    return M.ModelConfig.from_dict(section)


def cmd_train(args, argv) -> int:
    from dataclasses import asdict
    from . import data as D
    from . import model as M
    from . import train as T
    started = time.time()
    cfg = _load_config_file(args.config)
    ds = _prepared_dataset(args.data, args.seed)
    input_dim = ds.sequences[0].context.shape[1]
    model_cfg = _model_config(_section(cfg, "model"), input_dim)
    train_kwargs = _section(cfg, "train")
    for flag in ("lr", "batch_size", "max_epochs", "patience"):
        value = getattr(args, flag)
        if value is not None:
            train_kwargs[flag] = value
    train_kwargs["seed"] = args.seed
    train_cfg = T.TrainConfig(**train_kwargs)

    resume = None
    if args.resume:
        resume = M.load_checkpoint(args.resume)

    params, history = T.train_global(ds, model_cfg, train_cfg, resume=resume)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    history_path = os.path.join(args.out, "history.csv")
    config_path = os.path.join(args.out, "config.json")
    snapshot = {"model": asdict(model_cfg), "train": asdict(train_cfg)}
    M.save_checkpoint(ckpt_path, params, adam=history.adam,
                      norm_stats=ds.norm_stats.to_json(), split=ds.split,
                      meta={"epoch": history.stopped_epoch,
                            "best_epoch": history.best_epoch,
                            "best_val_loss": history.best_val_loss})
    history.to_csv(history_path)
    with open(config_path, "w") as fh:
        json.dump(snapshot, fh, indent=2)
        fh.write("\n")
    _write_manifest(args.out, "train", argv, snapshot, args.seed,
                    [args.data], [ckpt_path, history_path, config_path], started)
    print(f"trained {history.stopped_epoch} epochs, best val loss "
          f"{history.best_val_loss:.6f} at epoch {history.best_epoch}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_finetune(args, argv) -> int:
    from dataclasses import asdict
    from . import data as D
    from . import model as M
    from . import train as T
    started = time.time()
    cfg = _load_config_file(args.config)
    ckpt = M.load_checkpoint(args.checkpoint)
    if ckpt.norm_stats is None:
        from .errors import ConfigError
        raise ConfigError("checkpoint has no normalization stats; cannot fine-tune")
    stats = D.NormStats.from_json(ckpt.norm_stats)
    ds = D.load_jsonl(args.data)
    user_days = [D.apply_normalizer(s, stats) for s in ds.sequences
                 if s.user_id == args.user]
    if not user_days:
        from .errors import UsageError
        raise UsageError(f"no sequences for user {args.user!r} in {args.data}")
    ft_kwargs = _section(cfg, "finetune")
    ft_kwargs["seed"] = args.seed
    ft_cfg = T.FinetuneConfig(**ft_kwargs)
    personal, history = T.fine_tune(ckpt.params, user_days, ft_cfg)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    history_path = os.path.join(args.out, "history.csv")
    M.save_checkpoint(ckpt_path, personal, norm_stats=ckpt.norm_stats,
                      split=ckpt.split,
                      meta={"finetuned_user": args.user,
                            "base_checkpoint": os.path.abspath(args.checkpoint),
                            "best_epoch": history.best_epoch})
    history.to_csv(history_path)
    snapshot = {"finetune": asdict(ft_cfg), "model": asdict(personal.config)}
    _write_manifest(args.out, "finetune", argv, snapshot, args.seed,
                    [args.checkpoint, args.data], [ckpt_path, history_path], started)
    print(f"fine-tuned {args.user} for {len(history.records)} epochs, "
          f"best val loss {history.best_val_loss:.6f}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from . import data as D
    from . import evaluation as E
    from . import model as M
    started = time.time()
    ckpt = M.load_checkpoint(args.checkpoint)
    ds = D.load_jsonl(args.data)
    split = ckpt.split or D.split_users({s.user_id for s in ds.sequences}, args.seed)
    ds.split = split
    role_seqs = ds.subset(args.split)
    if ckpt.norm_stats is None:
        from .errors import ConfigError
        raise ConfigError("checkpoint has no normalization stats")
    stats = D.NormStats.from_json(ckpt.norm_stats)
    normalized = [D.apply_normalizer(s, stats) for s in role_seqs]
    thresholds = _parse_floats(args.threshold)

    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for p in thresholds:
        report = E.evaluate(ckpt.params, normalized, p, include_kde=args.kde,
                            min_history=args.min_history)
        tag = f"p{p:g}"
        json_path = os.path.join(args.out, f"report_{tag}.json")
        csv_path = os.path.join(args.out, f"report_{tag}.csv")
        E.emit_report(report, json_path, "json")
        E.emit_report(report, csv_path, "csv")
        outputs += [json_path, csv_path]
        if args.kde:
            kde_path = os.path.join(args.out, f"kde_{tag}.csv")
            E.emit_kde_csv(report, kde_path)
            outputs.append(kde_path)
        wd = "-" if report.mae_weekday is None else f"{report.mae_weekday:.3f}"
        we = "-" if report.mae_weekend is None else f"{report.mae_weekend:.3f}"
        print(f"p={p:g}: MAE {report.mae_all:.3f} h (weekday {wd}, weekend {we}, "
              f"n={report.n_all})")
    if args.baseline:
        train_seqs = ds.subset("train")
        feats, targets = E.build_mlr_training(train_seqs)
        mlr = E.fit_mlr(feats, targets)
        report = E.evaluate(mlr, role_seqs, thresholds[0], include_kde=args.kde)
        json_path = os.path.join(args.out, "baseline.json")
        csv_path = os.path.join(args.out, "baseline.csv")
        E.emit_report(report, json_path, "json")
        E.emit_report(report, csv_path, "csv")
        outputs += [json_path, csv_path]
        print(f"mlr baseline: MAE {report.mae_all:.3f} h (n={report.n_all})")
    snapshot = {"thresholds": thresholds, "split": args.split,
                "min_history": args.min_history, "baseline": bool(args.baseline)}
    _write_manifest(args.out, "eval", argv, snapshot, args.seed,
                    [args.checkpoint, args.data], outputs, started)
    return EXIT_OK


def cmd_stream(args, argv) -> int:
    from . import data as D
    from . import model as M
    from .infer import StreamSession
    ckpt = M.load_checkpoint(args.checkpoint)
    ds = D.load_jsonl(args.data)
    if not 0 <= args.index < len(ds.sequences):
        from .errors import UsageError
        raise UsageError(f"--index {args.index} outside 0..{len(ds.sequences) - 1}")
    seq = ds.sequences[args.index]
    stats = D.NormStats.from_json(ckpt.norm_stats) if ckpt.norm_stats else None
    session = StreamSession(ckpt.params, threshold=args.threshold,
                            day_type=seq.day_type, norm_stats=stats)
    for t in range(seq.context.shape[0]):
        curve, detected = session.push(seq.context[t], seq.abs_time[t])
        if args.emit_curve:
            print(json.dumps({"t": t, "clock": D.index_to_clock(t),
                              "survival": curve[t]}))
        if session.state != "open":
            break
    if session.state == "detected":
        t = session.detected_index
        print(json.dumps({"event": "detected", "t": t,
                          "clock": D.index_to_clock(t),
                          "survival": session.curve[t],
                          "true_t": seq.event_index,
                          "true_clock": D.index_to_clock(seq.event_index)}))
        return EXIT_OK
    print(json.dumps({"event": "exhausted", "threshold": args.threshold,
                      "true_t": seq.event_index}))
    return EXIT_NO_DETECTION


def cmd_sweep(args, argv) -> int:
    from dataclasses import asdict
    from . import model as M
    from . import train as T
    started = time.time()
    cfg = _load_config_file(args.config)
    ds = _prepared_dataset(args.data, args.seed)
    input_dim = ds.sequences[0].context.shape[1]
    model_cfg = _model_config(_section(cfg, "model"), input_dim)
    train_kwargs = _section(cfg, "train")
    train_kwargs["seed"] = args.seed
    if args.max_epochs is not None:
        train_kwargs["max_epochs"] = args.max_epochs
    train_cfg = T.TrainConfig(**train_kwargs)
    axes = {}
    if args.omega_e:
        axes["omega_e"] = _parse_floats(args.omega_e)
    if args.omega_w:
        axes["omega_w"] = _parse_floats(args.omega_w)
    if args.p:
        axes["p"] = _parse_floats(args.p)
    rows = T.grid_sweep(ds, axes, model_cfg, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    T.sweep_to_csv(rows, csv_path)
    snapshot = {"model": asdict(model_cfg), "train": asdict(train_cfg), "axes": axes}
    _write_manifest(args.out, "sweep", argv, snapshot, args.seed,
                    [args.data], [csv_path], started)
    for row in rows:
        print(f"omega_e={row['omega_e']:g} omega_w={row['omega_w']:g} "
              f"p={row['p']:g}: val MAE {row['val_mae_all']:.3f} h")
    print(f"sweep grid: {csv_path}")
    return EXIT_OK


def cmd_attribute(args, argv) -> int:
    from . import data as D
    from . import model as M
    from .infer import attribution_report, detect_offline, predict_curve
    ckpt = M.load_checkpoint(args.checkpoint)
    ds = D.load_jsonl(args.data)
    if not 0 <= args.index < len(ds.sequences):
        from .errors import UsageError
        raise UsageError(f"--index {args.index} outside 0..{len(ds.sequences) - 1}")
    seq = ds.sequences[args.index]
    if ckpt.norm_stats is not None:
        seq = D.apply_normalizer(seq, D.NormStats.from_json(ckpt.norm_stats))
    curve = predict_curve(ckpt.params, seq)
    detected = detect_offline(curve, args.threshold)
    if detected is None:
        print(json.dumps({"event": "exhausted", "threshold": args.threshold}))
        return EXIT_NO_DETECTION
    report = attribution_report(ckpt.params, seq, detected,
                                top_k=args.top_k, steps=args.steps)
    blob = json.dumps({"user_id": seq.user_id, "date": seq.date,
                       "detected_t": detected, "report": report}, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(blob)
            fh.write("\n")
        print(f"attribution report: {args.out}")
    else:
        print(blob)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttdsurv",
        description="Departure-time survival modeling on a 5-minute day grid.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic JSONL corpus")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--features", type=int, default=None)
    p.add_argument("--signal-features", dest="signal_features", type=int, default=None)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=None)
    p.add_argument("--holiday-rate", dest="holiday_rate", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the global model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="personalize a checkpoint for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", default="0.1",
                   help="comma-separated detection thresholds")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--kde", action="store_true", help="emit KDE arrays")
    p.add_argument("--baseline", action="store_true",
                   help="also fit and score the MLR baseline")
    p.add_argument("--min-history", dest="min_history", type=int, default=0)
    p.add_argument("--seed", type=int, default=42,
                   help="split seed when the checkpoint has none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="replay one day as a live stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="line number in the JSONL")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--emit-curve", dest="emit_curve", action="store_true")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("sweep", help="grid over loss weights and thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--omega-e", dest="omega_e", default=None)
    p.add_argument("--omega-w", dest="omega_w", default=None)
    p.add_argument("--p", default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attribute", help="integrated-gradients feature report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--top-k", dest="top_k", type=int, default=10)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_attribute)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(args.threads))
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    from .errors import ConfigError, DataFormatError, TrainingDiverged, UsageError
    try:
        return args.func(args, argv)
    except (ConfigError, UsageError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
