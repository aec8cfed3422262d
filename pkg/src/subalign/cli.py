"""Command-line pipeline: synthetic data generation, source training,
dimension estimation, adaptation, evaluation, and the shift gate.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numerical failure. Every command writes exactly one JSON manifest
alongside its outputs; timing lives only in the manifest so the data
outputs stay digest-identical across re-runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    AdaptConfig,
    evaluate,
    full_pass_latent,
    run_adaptation,
    run_baseline,
)
from .dataio import (
    SynthConfig,
    gen_synthetic,
    read_embeddings,
    read_labels,
    read_subspace,
    write_embeddings,
    write_labels,
    write_subspace,
)
from .detector import (
    DEFAULT_TAU,
    Hypothesis,
    HypothesisEnsemble,
    build_hypotheses,
    gated_predict,
)
from .errors import FormatError, NoStableDimension, NumericalError
from .model import TrainConfig, load_checkpoint, save_checkpoint, train_source
from .numerics import make_rng
from .subspace import DimSelectConfig, fit_pca, select_dim

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, inputs, outputs, seed, started):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "seed": seed,
        "wall_time_s": round(time.monotonic() - started, 6),
        "library_version": __version__,
    }
    path = Path(out_dir) / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SystemExitError(EXIT_USAGE, f"invalid JSON in {path}: {exc}")
    except OSError as exc:
        raise SystemExitError(EXIT_DATA, f"cannot read {path}: {exc}")


class SystemExitError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def cmd_gen_synth(args):
    started = time.monotonic()
    cfg_dict = _load_json(args.config) if args.config else {}
    cfg = SynthConfig.from_dict(cfg_dict)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = gen_synthetic(cfg, make_rng(cfg.seed))
    files = {
        "source.emb": lambda p: write_embeddings(p, data.source_x),
        "source.lbl": lambda p: write_labels(p, data.source_y),
        "target.emb": lambda p: write_embeddings(p, data.target_x),
        "target.lbl": lambda p: write_labels(p, data.target_y),
        "shift.emb": lambda p: write_embeddings(p, data.shift_matrix),
    }
    for name, writer in files.items():
        writer(out / name)
    config = dict(cfg.__dict__)
    config["shift_offset"] = data.shift_offset.tolist()
    _write_manifest(
        out, "gen-synth", config,
        [args.config] if args.config else [],
        [out / n for n in files], cfg.seed, started,
    )
    print(json.dumps({"out_dir": str(out), "files": sorted(files)}))


def cmd_train_source(args):
    started = time.monotonic()
    x = read_embeddings(args.features)
    y = read_labels(args.labels)
    if len(x) != len(y):
        raise SystemExitError(EXIT_DATA, "feature/label row counts differ")
    cfg = TrainConfig(
        latent_dim=args.latent_dim,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
    )
    sub_dim = args.sub_dim
    if sub_dim != "auto":
        sub_dim = int(sub_dim)
        if not (1 <= sub_dim <= min(cfg.latent_dim, len(x))):
            raise SystemExitError(
                EXIT_USAGE,
                f"--sub-dim {sub_dim} out of range for latent dim "
                f"{cfg.latent_dim} and {len(x)} samples",
            )
    rng = make_rng(args.seed)
    model = train_source(x, y, cfg, rng)
    z_s = full_pass_latent(model, x)
    if sub_dim == "auto":
        # The target is unknown at training time: the gap rule is applied
        # with the source spectrum standing in for both sequences.
        spectrum = fit_pca(z_s, min(model.latent_dim, len(x) - 1))
        dim_cfg = DimSelectConfig(delta=args.delta, epsilon=args.epsilon,
                                  d_max=len(spectrum.eigenvalues) - 1)
        sub_dim, _ = select_dim(
            spectrum.eigenvalues, spectrum.eigenvalues, len(x), dim_cfg
        )
    w_s = fit_pca(z_s, sub_dim)
    save_checkpoint(model, args.out_model)
    write_subspace(args.out_subspace, w_s)
    report = evaluate(model, x, y)
    config = {
        "latent_dim": cfg.latent_dim, "epochs": cfg.epochs,
        "batch_size": cfg.batch_size, "lr": cfg.lr,
        "sub_dim": sub_dim, "train_accuracy": report.accuracy,
        "train_ece": report.ece,
    }
    _write_manifest(
        Path(args.out_model).parent, "train-source", config,
        [args.features, args.labels], [args.out_model, args.out_subspace],
        args.seed, started,
    )
    print(json.dumps({"train_accuracy": report.accuracy, "sub_dim": sub_dim}))


def cmd_estimate_dim(args):
    started = time.monotonic()
    w_s = read_subspace(args.source_subspace)
    model = load_checkpoint(args.model)
    x_t = read_embeddings(args.target_features)
    z_t = full_pass_latent(model, x_t)
    spectrum = fit_pca(z_t, min(model.latent_dim, len(x_t) - 1))
    cfg = DimSelectConfig(delta=args.delta, epsilon=args.epsilon, d_max=args.d_max)
    try:
        d, curve = select_dim(
            w_s.eigenvalues, spectrum.eigenvalues, len(x_t), cfg
        )
    except NoStableDimension as exc:
        print(json.dumps({"error": str(exc), "curve": exc.curve}))
        raise
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "dim_bound_curve.json"
    curve_path.write_text(json.dumps({"d": d, "curve": curve}, indent=2) + "\n")
    _write_manifest(
        out_dir, "estimate-dim",
        {"delta": args.delta, "epsilon": args.epsilon, "d_max": args.d_max, "d": d},
        [args.source_subspace, args.model, args.target_features],
        [curve_path], None, started,
    )
    print(json.dumps({"d": d, "curve": curve}))


def _adapt_config(args) -> AdaptConfig:
    cfg_dict = _load_json(args.config) if args.config else {}
    overrides = {
        "method": args.method.replace("-", "_"),
        "seed": args.seed,
    }
    for key in ("lambda_lr", "lambda_cb", "lr", "batch_size", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    cfg_dict.update(overrides)
    return AdaptConfig.from_dict(cfg_dict)


def cmd_adapt(args):
    started = time.monotonic()
    model = load_checkpoint(args.model)
    w_s = read_subspace(args.source_subspace)
    x_t = read_embeddings(args.target_features)
    cfg = _adapt_config(args)
    rng = make_rng(cfg.seed)
    if cfg.method == "cattan":
        result = run_adaptation(model, w_s, x_t, cfg, rng)
    else:
        result = run_baseline(model, x_t, cfg, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "adapted.ckpt"]
    save_checkpoint(result.model, out / "adapted.ckpt")
    if result.phi is not None:
        write_embeddings(out / "phi.emb", result.phi)
        write_subspace(out / "target_subspace.sub", result.w_t)
        outputs += [out / "phi.emb", out / "target_subspace.sub"]
    metrics = None
    if args.target_labels:
        y_t = read_labels(args.target_labels)
        report = evaluate(
            result.model, x_t, y_t,
            w_t=result.w_t, phi=result.phi, w_s=w_s if result.phi is not None else None,
        )
        metrics = report.as_dict()
    report_path = out / "report.json"
    report_path.write_text(
        json.dumps(
            {
                "config": cfg.as_dict(),
                "trace": [r.as_dict() for r in result.trace],
                "metrics": metrics,
            },
            indent=2,
        )
        + "\n"
    )
    outputs.append(report_path)
    inputs = [args.model, args.source_subspace, args.target_features]
    if args.target_labels:
        inputs.append(args.target_labels)
    if args.config:
        inputs.append(args.config)
    _write_manifest(out, "adapt", cfg.as_dict(), inputs, outputs, cfg.seed, started)
    print(json.dumps({"out_dir": str(out), "metrics": metrics}))


def cmd_eval(args):
    started = time.monotonic()
    model = load_checkpoint(args.model)
    x = read_embeddings(args.features)
    y = read_labels(args.labels)
    w_t = phi = w_s = None
    if args.alignment:
        if not (args.source_subspace and args.target_subspace):
            raise SystemExitError(
                EXIT_USAGE,
                "--alignment requires --source-subspace and --target-subspace",
            )
        phi = read_embeddings(args.alignment)
        w_s = read_subspace(args.source_subspace)
        w_t = read_subspace(args.target_subspace)
    report = evaluate(model, x, y, w_t=w_t, phi=phi, w_s=w_s)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [args.model, args.features, args.labels]
    if args.alignment:
        inputs += [args.alignment, args.source_subspace, args.target_subspace]
    _write_manifest(out_dir, "eval", {"alignment": bool(args.alignment)},
                    inputs, [], None, started)
    print(json.dumps(report.as_dict()))


def cmd_build_ensemble(args):
    started = time.monotonic()
    model = load_checkpoint(args.model)
    w_s = read_subspace(args.source_subspace)
    x_t = read_embeddings(args.target_features)
    cfg = _adapt_config(args)
    ensemble = build_hypotheses(
        model, w_s, x_t, cfg, make_rng(cfg.seed), tau=args.tau
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, hyp in enumerate(ensemble.hypotheses):
        save_checkpoint(hyp.model, out / f"hyp{i}.ckpt")
        write_subspace(out / f"hyp{i}.sub", hyp.w_t)
        write_embeddings(out / f"hyp{i}_phi.emb", hyp.phi)
        outputs += [out / f"hyp{i}.ckpt", out / f"hyp{i}.sub", out / f"hyp{i}_phi.emb"]
    meta_path = out / "ensemble.json"
    meta_path.write_text(
        json.dumps({"k": ensemble.k, "tau": ensemble.tau,
                    "source_subspace": str(args.source_subspace)}, indent=2) + "\n"
    )
    outputs.append(meta_path)
    _write_manifest(
        out, "build-ensemble", {**cfg.as_dict(), "tau": args.tau},
        [args.model, args.source_subspace, args.target_features],
        outputs, cfg.seed, started,
    )
    print(json.dumps({"out_dir": str(out), "k": ensemble.k, "tau": ensemble.tau}))


def load_ensemble(ensemble_dir, tau=None) -> HypothesisEnsemble:
    root = Path(ensemble_dir)
    meta_path = root / "ensemble.json"
    if not meta_path.exists():
        raise FormatError(f"missing ensemble metadata: {meta_path}")
    meta = json.loads(meta_path.read_text())
    w_s = read_subspace(meta["source_subspace"])
    hypotheses = []
    for i in range(meta["k"]):
        for suffix in (".ckpt", ".sub", "_phi.emb"):
            if not (root / f"hyp{i}{suffix}").exists():
                raise FormatError(f"missing ensemble file: hyp{i}{suffix}")
        hypotheses.append(
            Hypothesis(
                model=load_checkpoint(root / f"hyp{i}.ckpt"),
                w_t=read_subspace(root / f"hyp{i}.sub"),
                phi=read_embeddings(root / f"hyp{i}_phi.emb"),
            )
        )
    return HypothesisEnsemble(
        hypotheses=hypotheses, w_s=w_s,
        tau=meta["tau"] if tau is None else tau,
    )


def cmd_detect(args):
    started = time.monotonic()
    ensemble = load_ensemble(args.ensemble_dir, tau=args.tau)
    x = read_embeddings(args.features)
    y = read_labels(args.labels) if args.labels else None
    decisions = gated_predict(ensemble, x)
    for d in decisions:
        print(json.dumps({"q_bar": d.q_bar, "gated": d.used_alignment,
                          "prediction": d.prediction}))
    summary = {
        "type": "summary",
        "samples": len(decisions),
        "gated_fraction": float(np.mean([d.used_alignment for d in decisions])),
        "mean_q_bar": float(np.mean([d.q_bar for d in decisions])),
        "tau": ensemble.tau,
    }
    if y is not None:
        preds = np.array([d.prediction for d in decisions])
        summary["accuracy"] = float(np.mean(preds == y))
    print(json.dumps(summary))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [args.features] + ([args.labels] if args.labels else [])
    _write_manifest(out_dir, "detect", {"tau": ensemble.tau}, inputs, [],
                    None, started)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subalign",
        description="Test-time adaptation by deep subspace alignment.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic shifted-domain dataset")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-source", help="train the source model and basis")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-subspace", required=True)
    p.add_argument("--sub-dim", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=1e6)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("estimate-dim", help="gap-stability dimension estimate")
    p.add_argument("--model", required=True)
    p.add_argument("--source-subspace", required=True)
    p.add_argument("--target-features", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=1e6)
    p.add_argument("--d-max", type=int, default=512)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_estimate_dim)

    p = sub.add_parser("adapt", help="adapt a model to unlabeled target features")
    p.add_argument("--model", required=True)
    p.add_argument("--source-subspace", required=True)
    p.add_argument("--target-features", required=True)
    p.add_argument("--target-labels", help="optional, enables report metrics")
    p.add_argument("--method", required=True,
                   choices=["cattan", "tent", "tent-plus", "tent_plus", "lr-cb", "lr_cb"])
    p.add_argument("--config", help="JSON adaptation config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-lr", type=float, dest="lambda_lr")
    p.add_argument("--lambda-cb", type=float, dest="lambda_cb")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="accuracy and calibration on labeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--alignment", help="EMB1 file holding the d x d alignment matrix")
    p.add_argument("--source-subspace")
    p.add_argument("--target-subspace")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-ensemble", help="adapt the K-hypothesis shift gate")
    p.add_argument("--model", required=True)
    p.add_argument("--source-subspace", required=True)
    p.add_argument("--target-features", required=True)
    p.add_argument("--method", default="cattan", choices=["cattan"])
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-lr", type=float, dest="lambda_lr")
    p.add_argument("--lambda-cb", type=float, dest="lambda_cb")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.set_defaults(func=cmd_build_ensemble)

    p = sub.add_parser("detect", help="gated prediction with the shift gate")
    p.add_argument("--ensemble-dir", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels")
    p.add_argument("--tau", type=float)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None) -> int:
    # SUBALIGN_THREADS caps any internal worker fan-out; the current
    # implementation is sequential, so the cap is honored trivially.
    os.environ.setdefault("SUBALIGN_THREADS", "1")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SystemExitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NoStableDimension, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
