"""Command-line entry points.

Commands: synth, train, ablate, sweep, probe, report.  Training commands
read a JSON experiment config (unknown keys are rejected so stale configs
fail loudly); synth and probe take flags.  `AFT_THREADS` caps worker
threads for grid points and sweep cells (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import evaluation, featurestore, models, trainer
from .errors import AftError, ConfigError
from .models import ExtractorSpec
from .regularizers import MuWeights, RegularizerSpec
from .trainer import TrainConfig

METHODS = ("stl", "aft", "l2", "kd", "rkd", "ft")
ABLATION_VARIANTS = ("no-kernel", "identity-mu", "dense-mu", "rbf", "bilevel")

_CONFIG_KEYS = {
    "method",
    "manifest",
    "out",
    "run_id",
    "dataset",
    "seed",
    "batch_size",
    "steps",
    "lr_theta",
    "lr_mu",
    "beta",
    "beta_grid",
    "schedule",
    "bilevel_inner_steps",
    "kernel",
    "mu_mode",
    "eps_norm",
    "eps_sqrt",
    "huber_delta",
    "ft_pretrain_steps",
    "ft_pretrain_lr",
    "extractor_kind",
    "extractor_hidden",
    "extractor_activation",
    "d_phi",
    "eval_every",
    "init_checkpoint",
}
_REQUIRED_KEYS = {"method", "manifest", "out"}


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("AFT_THREADS", "1")))
    except ValueError:
        return 1


def load_experiment_config(path: str) -> tuple[TrainConfig, dict]:
    """Parse an experiment config file into a TrainConfig plus run metadata."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    missing = _REQUIRED_KEYS - set(doc)
    if missing:
        raise ConfigError(f"{path}: missing required keys {sorted(missing)}")
    method = doc["method"]
    if method not in METHODS:
        raise ConfigError(f"{path}: unknown method {method!r}; valid methods: {', '.join(METHODS)}")

    reg = RegularizerSpec(
        kind=method if method != "stl" else "aft",
        kernel=doc.get("kernel", "linear"),
        mu_mode=doc.get("mu_mode", "diagonal"),
        beta=0.0 if method == "stl" else float(doc.get("beta", 0.0)),
        eps_norm=float(doc.get("eps_norm", 1e-12)),
        eps_sqrt=float(doc.get("eps_sqrt", 1e-12)),
        huber_delta=float(doc.get("huber_delta", 1.0)),
        ft_pretrain_steps=int(doc.get("ft_pretrain_steps", 1000)),
        ft_pretrain_lr=float(doc.get("ft_pretrain_lr", 1e-3)),
    )
    extractor = ExtractorSpec(
        kind=doc.get("extractor_kind", "mlp"),
        hidden=tuple(doc.get("extractor_hidden", [64])),
        activation=doc.get("extractor_activation", "tanh"),
        d_phi=int(doc.get("d_phi", 32)),
    )
    manifest = doc["manifest"]
    if not os.path.isabs(manifest):
        manifest = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)), manifest))
    config = TrainConfig(
        batch_size=int(doc.get("batch_size", 32)),
        steps=int(doc.get("steps", 2000)),
        lr_theta=float(doc.get("lr_theta", 1e-3)),
        lr_mu=float(doc.get("lr_mu", 1e-2)),
        schedule=doc.get("schedule", "cosine_to_zero"),
        bilevel_inner_steps=int(doc.get("bilevel_inner_steps", 0)),
        seed=int(doc.get("seed", 0)),
        regularizer=reg,
        extractor=extractor,
        eval_every=int(doc.get("eval_every", 0)),
        dataset_label=doc.get("dataset", os.path.splitext(os.path.basename(doc["manifest"]))[0]),
        init_checkpoint=doc.get("init_checkpoint"),
    ).validate()
    beta_grid = doc.get("beta_grid")
    if method == "stl" and beta_grid:
        raise ConfigError(f"{path}: method stl takes no beta grid")
    if method != "stl" and not beta_grid and reg.beta == 0:
        raise ConfigError(f"{path}: method {method!r} needs beta > 0 or a beta_grid")
    meta = {
        "method": method,
        "out": doc["out"],
        "run_id": doc.get("run_id", method),
        "beta_grid": [float(b) for b in beta_grid] if beta_grid else None,
        "config_dir": os.path.dirname(os.path.abspath(path)),
    }
    return config, meta


def _resolve_out(meta: dict) -> str:
    out = meta["out"]
    if not os.path.isabs(out):
        out = os.path.normpath(os.path.join(meta["config_dir"], out))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = featurestore.SyntheticSpec(
        n_examples=args.n,
        d_signal=args.d_signal,
        d_distractor=args.d_distractor,
        d_noise=args.d_noise,
        n_classes=args.classes,
        label_temperature=args.label_temperature,
        seed=args.seed,
    )
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    manifest_path, checksums = featurestore.write_synthetic_dataset(
        spec, args.out, test_fraction=args.test_fraction
    )
    for name, digest in sorted(checksums.items()):
        print(f"sha256 {name} {digest}")
    print(f"manifest {manifest_path}")
    return 0


def cmd_train(args) -> int:
    config, meta = load_experiment_config(args.config)
    dataset = featurestore.load_dataset(config_manifest_path(args.config))
    out_dir = _resolve_out(meta)
    os.makedirs(out_dir, exist_ok=True)
    record = trainer.execute(
        config,
        dataset,
        beta_grid=meta["beta_grid"],
        run_id=meta["run_id"],
        out_dir=out_dir,
        threads=worker_threads(),
    )
    print(f"run_id {meta['run_id']}")
    print(f"method {record.header['method']}")
    if "beta_star" in record.header:
        print(f"beta_star {record.header['beta_star']:g}")
    print(f"test_accuracy {record.final['test_accuracy']:.6f}")
    print(f"metrics {os.path.join(out_dir, meta['run_id'] + '.metrics')}")
    return 0


def config_manifest_path(config_path: str) -> str:
    with open(config_path) as fh:
        doc = json.load(fh)
    manifest = doc["manifest"]
    if not os.path.isabs(manifest):
        manifest = os.path.normpath(
            os.path.join(os.path.dirname(os.path.abspath(config_path)), manifest)
        )
    return manifest


def cmd_ablate(args) -> int:
    config, meta = load_experiment_config(args.config)
    if meta["method"] not in ("aft", "stl"):
        raise ConfigError("ablations apply to the kernel objective; set method to aft")
    overrides = {
        "no-kernel": lambda c: replace(c, regularizer=replace(c.regularizer, kind="l2")),
        "identity-mu": lambda c: replace(c, regularizer=replace(c.regularizer, mu_mode="identity")),
        "dense-mu": lambda c: replace(c, regularizer=replace(c.regularizer, mu_mode="dense")),
        "rbf": lambda c: replace(c, regularizer=replace(c.regularizer, kernel="rbf")),
        "bilevel": lambda c: replace(c, bilevel_inner_steps=5),
    }
    config = overrides[args.variant](config)
    dataset = featurestore.load_dataset(config_manifest_path(args.config))
    out_dir = _resolve_out(meta)
    os.makedirs(out_dir, exist_ok=True)
    run_id = f"{meta['run_id']}_{args.variant}"
    record = trainer.execute(
        config,
        dataset,
        beta_grid=meta["beta_grid"],
        run_id=run_id,
        out_dir=out_dir,
        threads=worker_threads(),
    )
    print(f"run_id {run_id}")
    print(f"variant {args.variant}")
    print(f"kernel {config.regularizer.kernel}")
    print(f"mu_mode {config.regularizer.mu_mode}")
    print(f"test_accuracy {record.final['test_accuracy']:.6f}")
    return 0


def cmd_sweep(args) -> int:
    config, meta = load_experiment_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    d_noise_list = [int(v) for v in args.d_noise_list.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    out_dir = _resolve_out(meta)
    report = evaluation.noise_robustness_sweep(
        config_manifest_path(args.config),
        d_noise_list,
        methods,
        config,
        seeds,
        out_dir,
        noise_seed=args.noise_seed,
        threads=worker_threads(),
    )
    for s in report.summary:
        print(
            f"{s['method']} mean_normalized_error {s['mean_normalized_error']:.6f} "
            f"se {s['standard_error']:.6f}"
        )
    print(f"report {os.path.join(out_dir, 'sweep.report')}")
    return 0


def _parse_dims(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi)))
    return [int(v) for v in text.split(",") if v]


def cmd_probe(args) -> int:
    if args.manifest:
        dataset = featurestore.load_dataset(args.manifest)
        feats, labels, splits = dataset.psi, dataset.labels, dataset.splits
    else:
        if not (args.features and args.labels):
            raise ConfigError("probe needs --manifest or both --features and --labels")
        feats = featurestore.read_features(args.features)
        labels, _ = featurestore.read_labels(args.labels)
        splits = featurestore.make_splits(feats.shape[0], args.seed, args.test_fraction)
    if args.weights_checkpoint:
        tensors = models.load_checkpoint(args.weights_checkpoint)
        if "mu.s" not in tensors:
            raise ConfigError(f"{args.weights_checkpoint}: no diagonal feature weights found")
        mu = MuWeights(mode="diagonal", s=tensors["mu.s"])
        err_raw, err_weighted = evaluation.weighted_probe_comparison(
            feats, labels, mu, splits, l2_penalty=args.l2_penalty
        )
        print(f"test_error_raw {err_raw:.6f}")
        print(f"test_error_weighted {err_weighted:.6f}")
        return 0
    result = evaluation.linear_probe(feats, labels, splits, l2_penalty=args.l2_penalty)
    print(f"train_accuracy {result.train_accuracy:.6f}")
    print(f"test_accuracy {result.test_accuracy:.6f}")
    print(f"iterations {result.n_iterations}")
    return 0


def cmd_report(args) -> int:
    if args.mu_checkpoint:
        tensors = models.load_checkpoint(args.mu_checkpoint)
        if "mu.s" not in tensors:
            raise ConfigError(f"{args.mu_checkpoint}: no diagonal feature weights found")
        mu = MuWeights(mode="diagonal", s=tensors["mu.s"])
        stats = evaluation.mu_distribution_report(
            mu, _parse_dims(args.signal_dims), _parse_dims(args.noise_dims)
        )
        for group, st in stats.items():
            print(
                f"{group} mean {st.mean:.6f} median {st.median:.6f} "
                f"q25 {st.q25:.6f} q75 {st.q75:.6f}"
            )
        return 0
    cells = evaluation.records_from_run_dir(args.runs)
    if not cells:
        raise ConfigError(f"{args.runs}: no .metrics files with final results")
    report = evaluation.aggregate_normalized_error(cells)
    out = args.out or os.path.join(args.runs, "aggregate.report")
    evaluation.write_report(report, out)
    for s in report.summary:
        print(
            f"{s['method']} mean_normalized_error {s['mean_normalized_error']:.6f} "
            f"se {s['standard_error']:.6f} n {s['n_cells']}"
        )
    print(f"report {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aft",
        description="Train small downstream models against precomputed pretrained features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-signal synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of examples")
    p.add_argument("--d-signal", type=int, default=8, dest="d_signal")
    p.add_argument("--d-distractor", type=int, default=8, dest="d_distractor")
    p.add_argument("--d-noise", type=int, default=0, dest="d_noise")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--label-temperature", type=float, default=1.0, dest="label_temperature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25, dest="test_fraction")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train per an experiment config file")
    p.add_argument("config", help="path to JSON experiment config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run a kernel-objective ablation variant")
    p.add_argument("config", help="path to JSON experiment config (method aft)")
    p.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="noise-robustness sweep over appended noise features")
    p.add_argument("config", help="path to JSON experiment config")
    p.add_argument("--d-noise-list", default="0,64", dest="d_noise_list")
    p.add_argument("--methods", default="stl,kd,aft")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--noise-seed", type=int, default=0, dest="noise_seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--manifest", help="probe the manifest's pretrained features")
    p.add_argument("--features", help="probe a raw feature file")
    p.add_argument("--labels", help="label file for --features")
    p.add_argument("--seed", type=int, default=0, help="split seed for --features mode")
    p.add_argument("--test-fraction", type=float, default=0.25, dest="test_fraction")
    p.add_argument("--l2-penalty", type=float, default=1e-4, dest="l2_penalty")
    p.add_argument(
        "--weights-checkpoint",
        dest="weights_checkpoint",
        help="compare raw vs weighted probe using learned feature weights",
    )
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="aggregate run metrics or summarize feature weights")
    p.add_argument("runs", nargs="?", help="directory of .metrics files")
    p.add_argument("--out", help="report output path")
    p.add_argument("--mu-checkpoint", dest="mu_checkpoint", help="checkpoint with mu.s tensor")
    p.add_argument("--signal-dims", default="", dest="signal_dims", help="e.g. 0:8 or 0,1,2")
    p.add_argument("--noise-dims", default="", dest="noise_dims")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report" and not args.mu_checkpoint and not args.runs:
        parser.error("report needs a runs directory or --mu-checkpoint")
    try:
        return args.func(args)
    except AftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
