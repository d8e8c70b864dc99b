"""Command-line interface.

One binary, subcommand style. Configuration comes from a JSON file
(``--config``) with individual flags overriding file values. Exit codes:
0 success, 1 runtime failure (message on stderr), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .connectivity import normalize_features
from .dataset import read_dataset, write_dataset
from .model import ModelConfig, build_fusion_model, evaluate, load_model, save_model, train
from .mvar import FitDiagnostics
from .plotting import write_svg
from .relevance import load_report_json, relevance_report, write_report_csv, write_report_json
from .runner import (
    ConfigError,
    RunConfig,
    derive_seed,
    extract_tensors,
    pipeline_run,
    run_config_from_json,
    study_windows,
)
from .signal_io import (
    SynthSpec,
    extract_labeled_windows,
    generate_synthetic,
    has_nonseizure_span,
    load_annotations,
    load_recording,
    save_annotations,
    save_recording,
)
from .util import atomic_write_text

__all__ = ["main"]


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"invalid JSON: {exc}") from exc
    return run_config_from_json(doc)


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flags win over config-file values; re-validation errors name the flag."""
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    try:
        if getattr(args, "mode", None) is not None:
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, mode=args.mode))
        if getattr(args, "order", None) is not None:
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, order=args.order))
        if getattr(args, "aic", False):
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, aic=True))
    except ValueError as exc:
        raise ConfigError("pipeline", str(exc)) from exc
    try:
        if getattr(args, "scheme", None) is not None:
            cfg = replace(cfg, model=replace(cfg.model, scheme=args.scheme))
    except ValueError as exc:
        raise ConfigError("model.scheme", str(exc)) from exc
    return cfg


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    s = cfg.synth
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for class_idx, kind in ((0, "uncoupled"), (1, "coupled")):
        for i in range(s.n_per_class):
            spec = SynthSpec(
                kind=kind,
                n_channels=s.n_channels,
                fs=s.fs,
                duration_s=s.duration_s,
                coupling_strength=s.coupling_strength if kind == "coupled" else 0.0,
                seed=derive_seed(cfg.seed, class_idx, i),
                ar_pole_radius=s.ar_pole_radius,
                ar_freq_hz=s.ar_freq_hz,
                noise_std=s.noise_std,
                match_power=s.match_power,
                rec_id=f"{kind}-{i:02d}",
            )
            rec, ann = generate_synthetic(spec)
            save_recording(rec, out / f"{rec.id}.csv")
            save_annotations(ann, out / f"{rec.id}.json")
            index.append(
                {"id": rec.id, "csv": f"{rec.id}.csv", "annotations": f"{rec.id}.json",
                 "fs": rec.fs, "kind": kind}
            )
    atomic_write_text(out / "recordings.json", json.dumps({"recordings": index}, indent=2) + "\n")
    print(f"wrote {len(index)} recordings to {out}")
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    index_path = Path(args.recordings)
    doc = json.loads(index_path.read_text())
    windows = []
    for entry in doc["recordings"]:
        rec = load_recording(index_path.parent / entry["csv"], fs=entry["fs"])
        ann = load_annotations(index_path.parent / entry["annotations"])
        n_free = args.nonseizure if has_nonseizure_span(rec, ann) else 0
        windows.extend(
            extract_labeled_windows(
                rec, ann, n_nonseizure=n_free, seed=derive_seed(cfg.seed, len(windows))
            )
        )
    if not windows:
        raise RuntimeError(f"{index_path}: no extractable windows")
    diag = FitDiagnostics()
    tensors = extract_tensors(windows, cfg.pipeline, diag)
    manifest = write_dataset(tensors, args.out, cfg.pipeline, extra={"source": str(index_path)})
    print(f"wrote {len(tensors)} window tensors to {manifest}")
    if diag.unstable_fits or diag.sigma_jitter_events:
        print(
            f"warnings: {diag.unstable_fits} unstable fits, "
            f"{diag.sigma_jitter_events} covariance jitter events",
            file=sys.stderr,
        )
    return 0


def _model_config_for(cfg: RunConfig, shape: tuple[int, ...]) -> ModelConfig:
    f, t, c, _, b = shape
    return replace(cfg.model, n_features=f, subwindows=t, n_channels=c, n_bands=b)


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    tensors, _ = read_dataset(args.dataset)
    stats, normed = normalize_features(tensors)
    model = build_fusion_model(_model_config_for(cfg, tensors[0].shape))
    model, history = train(model, normed, cfg.train)
    save_model(model, args.model_out, stats)
    history_path = args.history or str(args.model_out) + ".history.json"
    atomic_write_text(history_path, json.dumps(history, indent=2) + "\n")
    print(
        json.dumps(
            {"model": str(args.model_out), "epochs": len(history),
             "final_loss": history[-1]["loss"]}
        )
    )
    return 0


def _prepared_dataset(model_path, dataset_path):
    model, stats = load_model(model_path)
    tensors, _ = read_dataset(dataset_path)
    if stats is not None:
        tensors = stats.apply_many(tensors)
    return model, tensors


def _cmd_eval(args: argparse.Namespace) -> int:
    model, tensors = _prepared_dataset(args.model, args.dataset)
    doc = evaluate(model, tensors).to_dict()
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def _cmd_explain(args: argparse.Namespace) -> int:
    model, tensors = _prepared_dataset(args.model, args.dataset)
    report = relevance_report(
        model, tensors, per_sample=args.per_sample, predicted_labels=args.predicted_labels
    )
    if args.out:
        write_report_json(report, args.out)
    else:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.csv:
        write_report_csv(report, args.csv)
    if args.svg:
        write_svg(report, args.svg)
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    report = load_report_json(args.report)
    write_svg(report, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    manifest = pipeline_run(cfg)
    summary = {
        "out_dir": cfg.out_dir,
        "config_hash": manifest.config_hash,
        "test_accuracy": manifest.metrics["test"]["accuracy"] if manifest.metrics else None,
    }
    print(json.dumps(summary, indent=2))
    return 0


def _add_config_flags(p: argparse.ArgumentParser, out_help: str | None = None) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="base seed override")
    if out_help:
        p.add_argument("--out", help=out_help)


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("broadband", "per_band"), help="spectral fitting mode")
    p.add_argument("--order", type=int, help="fixed MVAR order")
    p.add_argument("--aic", action="store_true", help="select the MVAR order by AIC")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eegfusion",
        description="Connectivity-fusion seizure detection on multichannel EEG",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-class recording set")
    _add_config_flags(p, out_help="directory for recordings (default from config)")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("extract", help="recordings -> window feature tensor dataset")
    p.add_argument("--recordings", required=True, help="recordings.json index file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--nonseizure", type=int, default=4,
        help="non-seizure windows per recording with free spans (default 4)",
    )
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="base seed override")
    _add_pipeline_flags(p)
    p.set_defaults(handler=_cmd_extract)

    p = sub.add_parser("train", help="tensor dataset -> model file + training history")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--model-out", required=True, help="output model file")
    p.add_argument("--history", help="history JSON path (default <model>.history.json)")
    p.add_argument("--scheme", type=int, choices=(1, 2, 3, 4), help="fusion scheme")
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="base seed override")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="model + dataset -> metrics JSON on stdout")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("explain", help="model + dataset -> per-feature relevance report")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="report JSON path (default: print to stdout)")
    p.add_argument("--csv", help="also write the report as CSV")
    p.add_argument("--svg", help="also write bar charts as SVG")
    p.add_argument("--per-sample", action="store_true",
                   help="normalize per sample before averaging")
    p.add_argument("--predicted-labels", action="store_true",
                   help="condition classes on predictions instead of true labels")
    p.set_defaults(handler=_cmd_explain)

    p = sub.add_parser("plot", help="relevance report JSON -> SVG bar chart")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_plot)

    p = sub.add_parser("run", help="full synthetic study: synth/extract/train/eval/explain")
    _add_config_flags(p, out_help="run output directory")
    _add_pipeline_flags(p)
    p.add_argument("--scheme", type=int, choices=(1, 2, 3, 4), help="fusion scheme")
    p.set_defaults(handler=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
