"""Config-driven end-to-end runs: synth -> extract -> train -> eval -> explain.

A run is described by a :class:`RunConfig` (usually parsed from a JSON file),
validated up front against every stage's preconditions, executed with fixed
seeds and fixed evaluation order, and summarized by a :class:`RunManifest`
written atomically as the last artifact. Rerunning the same config and seed
reproduces every output bit for bit.
"""

from __future__ import annotations

import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .connectivity import (
    FEATURE_ORDER,
    PipelineConfig,
    WindowTensor,
    build_feature_tensor,
    normalize_features,
    pipeline_config_from_json,
    pipeline_config_to_json,
)
from .dataset import write_dataset
from .dsp import design_bandpass
from .model import (
    ModelConfig,
    TrainConfig,
    build_fusion_model,
    evaluate,
    save_model,
    train,
)
from .mvar import FitDiagnostics
from .plotting import write_svg
from .relevance import relevance_report, write_report_csv, write_report_json
from .signal_io import (
    WINDOW_S,
    SynthSpec,
    extract_labeled_windows,
    generate_synthetic,
    synth_spectral_radius,
    train_test_split,
)
from .util import atomic_write_text, config_hash

__all__ = [
    "ConfigError",
    "SynthStudyConfig",
    "RunConfig",
    "RunManifest",
    "run_config_from_json",
    "run_config_to_json",
    "validate_run_config",
    "derive_seed",
    "study_windows",
    "extract_tensors",
    "pipeline_run",
]


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is the dotted path of the bad entry."""

    def __init__(self, field_path: str, message: str) -> None:
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass(frozen=True)
class SynthStudyConfig:
    """Shape of the synthetic two-class study: how many recordings of each
    class to simulate and how many 20 s windows to keep per recording."""

    n_per_class: int = 10
    windows_per_recording: int = 10
    n_channels: int = 4
    fs: float = 128.0
    duration_s: float = 220.0
    coupling_strength: float = 0.15
    match_power: bool = True
    ar_pole_radius: float = 0.8
    ar_freq_hz: float = 12.0
    noise_std: float = 1.0
    guard_s: float = 60.0


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs; validated before any work starts."""

    out_dir: str = "run"
    seed: int = 0
    synth: SynthStudyConfig = field(default_factory=SynthStudyConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    test_fraction: float = 0.15
    explain_per_sample: bool = False
    explain_predicted_labels: bool = False
    explain_svg: bool = True


def _build_section(path: str, builder, doc: dict, names: tuple[str, ...]):
    for key in doc:
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown field")
    try:
        return builder(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def run_config_from_json(doc: dict) -> RunConfig:
    """Parse the nested JSON layout; unknown or invalid fields name their path."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {"out_dir", "seed", "synth", "pipeline", "model", "train", "split", "explain"}
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown field")
    for key in ("synth", "pipeline", "model", "train", "split", "explain"):
        if key in doc and not isinstance(doc[key], dict):
            raise ConfigError(key, "must be a JSON object")

    kwargs: dict = {}
    if "out_dir" in doc:
        if not isinstance(doc["out_dir"], str):
            raise ConfigError("out_dir", "must be a string")
        kwargs["out_dir"] = doc["out_dir"]
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed", "must be an integer")
        kwargs["seed"] = doc["seed"]
    if "synth" in doc:
        names = tuple(SynthStudyConfig.__dataclass_fields__)
        kwargs["synth"] = _build_section("synth", SynthStudyConfig, doc["synth"], names)
    if "pipeline" in doc:
        names = tuple(PipelineConfig.__dataclass_fields__)
        for key in doc["pipeline"]:
            if key not in names:
                raise ConfigError(f"pipeline.{key}", "unknown field")
        try:
            kwargs["pipeline"] = pipeline_config_from_json(doc["pipeline"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError("pipeline", str(exc)) from exc
    if "model" in doc:
        sub = dict(doc["model"])
        if "dense_sizes" in sub:
            if not isinstance(sub["dense_sizes"], list):
                raise ConfigError("model.dense_sizes", "must be a list of integers")
            sub["dense_sizes"] = tuple(sub["dense_sizes"])
        names = tuple(ModelConfig.__dataclass_fields__)
        kwargs["model"] = _build_section("model", ModelConfig, sub, names)
    if "train" in doc:
        names = tuple(TrainConfig.__dataclass_fields__)
        kwargs["train"] = _build_section("train", TrainConfig, doc["train"], names)
    if "split" in doc:
        for key in doc["split"]:
            if key != "test_fraction":
                raise ConfigError(f"split.{key}", "unknown field")
        if "test_fraction" in doc["split"]:
            kwargs["test_fraction"] = doc["split"]["test_fraction"]
    if "explain" in doc:
        names = {"per_sample": "explain_per_sample",
                 "predicted_labels": "explain_predicted_labels",
                 "svg": "explain_svg"}
        for key, value in doc["explain"].items():
            if key not in names:
                raise ConfigError(f"explain.{key}", "unknown field")
            if not isinstance(value, bool):
                raise ConfigError(f"explain.{key}", "must be a boolean")
            kwargs[names[key]] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("<root>", str(exc)) from exc


def run_config_to_json(cfg: RunConfig) -> dict:
    model = {k: getattr(cfg.model, k) for k in ModelConfig.__dataclass_fields__}
    model["dense_sizes"] = list(cfg.model.dense_sizes)
    return {
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "synth": {k: getattr(cfg.synth, k) for k in SynthStudyConfig.__dataclass_fields__},
        "pipeline": pipeline_config_to_json(cfg.pipeline),
        "model": model,
        "train": {k: getattr(cfg.train, k) for k in TrainConfig.__dataclass_fields__},
        "split": {"test_fraction": cfg.test_fraction},
        "explain": {
            "per_sample": cfg.explain_per_sample,
            "predicted_labels": cfg.explain_predicted_labels,
            "svg": cfg.explain_svg,
        },
    }


def validate_run_config(cfg: RunConfig) -> None:
    """Check every stage's preconditions before any work starts.

    Raises :class:`ConfigError` naming the offending field; a passing config
    is guaranteed to reach the training stage without input-shape errors.
    """
    s = cfg.synth
    if s.n_per_class < 1:
        raise ConfigError("synth.n_per_class", f"must be >= 1, got {s.n_per_class}")
    if s.windows_per_recording < 1:
        raise ConfigError(
            "synth.windows_per_recording", f"must be >= 1, got {s.windows_per_recording}"
        )
    if s.n_channels < 2:
        raise ConfigError("synth.n_channels", f"need >= 2 channels, got {s.n_channels}")
    if s.fs <= 0:
        raise ConfigError("synth.fs", f"sampling rate must be positive, got {s.fs}")
    if not 0.0 <= s.ar_pole_radius < 1.0:
        raise ConfigError(
            "synth.ar_pole_radius", f"must lie in [0, 1), got {s.ar_pole_radius}"
        )
    if not 0.0 < s.ar_freq_hz < s.fs / 2:
        raise ConfigError(
            "synth.ar_freq_hz",
            f"must lie in (0, {s.fs / 2}) Hz at fs={s.fs}, got {s.ar_freq_hz}",
        )
    if s.noise_std <= 0:
        raise ConfigError("synth.noise_std", f"must be positive, got {s.noise_std}")
    if s.coupling_strength < 0:
        raise ConfigError(
            "synth.coupling_strength", f"must be >= 0, got {s.coupling_strength}"
        )
    if s.guard_s < 0:
        raise ConfigError("synth.guard_s", f"must be >= 0, got {s.guard_s}")
    max_windows = int(s.duration_s // WINDOW_S)
    if max_windows < s.windows_per_recording:
        raise ConfigError(
            "synth.windows_per_recording",
            f"a {s.duration_s} s recording holds at most {max_windows} windows "
            f"of {WINDOW_S:.0f} s, requested {s.windows_per_recording}",
        )
    probe = SynthSpec(
        kind="coupled",
        n_channels=s.n_channels,
        fs=s.fs,
        coupling_strength=s.coupling_strength,
        ar_pole_radius=s.ar_pole_radius,
        ar_freq_hz=s.ar_freq_hz,
        noise_std=s.noise_std,
    )
    radius = synth_spectral_radius(probe)
    if radius >= 1.0:
        raise ConfigError(
            "synth.coupling_strength",
            f"coupled process unstable (spectral radius {radius:.3f}); reduce "
            f"coupling_strength or ar_pole_radius",
        )

    p = cfg.pipeline
    for i, band in enumerate(p.bands):
        if band.high_hz >= s.fs / 2:
            raise ConfigError(
                f"pipeline.bands[{i}].high_hz",
                f"band {band.name!r} high edge {band.high_hz} Hz must be below "
                f"the Nyquist frequency {s.fs / 2} Hz",
            )
        try:
            design_bandpass(band, s.fs, p.filter_order)
        except ValueError as exc:
            raise ConfigError(f"pipeline.bands[{i}]", str(exc)) from exc
    try:
        design_bandpass(p.broadband, s.fs, p.filter_order)
    except ValueError as exc:
        raise ConfigError("pipeline.broadband", str(exc)) from exc

    n_window = int(round(WINDOW_S * s.fs))
    if n_window % p.subwindows != 0:
        raise ConfigError(
            "pipeline.subwindows",
            f"window of {n_window} samples not divisible into {p.subwindows} parts",
        )
    sub_len = n_window // p.subwindows
    order_cap = p.aic_max if p.aic else p.order
    if sub_len - order_cap < order_cap * s.n_channels:
        raise ConfigError(
            "pipeline.order",
            f"{sub_len}-sample sub-windows cannot support order {order_cap} "
            f"with {s.n_channels} channels",
        )
    if sub_len <= 3 * p.filter_order:
        raise ConfigError(
            "pipeline.subwindows",
            f"{sub_len}-sample sub-windows too short for zero-phase filtering",
        )

    m = cfg.model
    if m.n_channels != s.n_channels:
        raise ConfigError(
            "model.n_channels", f"must equal synth.n_channels ({s.n_channels}), got {m.n_channels}"
        )
    if m.subwindows != p.subwindows:
        raise ConfigError(
            "model.subwindows", f"must equal pipeline.subwindows ({p.subwindows}), got {m.subwindows}"
        )
    if m.n_bands != len(p.bands):
        raise ConfigError(
            "model.n_bands", f"must equal the number of bands ({len(p.bands)}), got {m.n_bands}"
        )
    if m.n_features != len(FEATURE_ORDER):
        raise ConfigError(
            "model.n_features", f"must be {len(FEATURE_ORDER)}, got {m.n_features}"
        )

    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError(
            "split.test_fraction", f"must lie in (0, 1), got {cfg.test_fraction}"
        )
    n_class = s.n_per_class * s.windows_per_recording
    n_test = int(round(n_class * cfg.test_fraction))
    if n_test < 1 or n_class - n_test < 1:
        raise ConfigError(
            "split.test_fraction",
            f"splitting {n_class} windows per class at {cfg.test_fraction} leaves "
            f"an empty train or test side",
        )
    n_train = 2 * (n_class - n_test)
    if cfg.train.batch_size > n_train:
        raise ConfigError(
            "train.batch_size",
            f"batch_size {cfg.train.batch_size} exceeds the {n_train}-window training set",
        )


def derive_seed(base: int, *branch: int) -> int:
    """Stable per-task seed from a base seed and integer branch indices."""
    return int(np.random.SeedSequence([base, *branch]).generate_state(1)[0])


def study_windows(cfg: RunConfig) -> list:
    """Simulate the study's recordings and cut the labeled windows.

    Coupled recordings are annotated end to end, so their windows are the
    first ``windows_per_recording`` seizure slices; uncoupled recordings have
    no annotations and contribute guarded non-seizure samples instead.
    """
    s = cfg.synth
    windows = []
    for class_idx, kind in ((0, "uncoupled"), (1, "coupled")):
        for i in range(s.n_per_class):
            seed = derive_seed(cfg.seed, class_idx, i)
            spec = SynthSpec(
                kind=kind,
                n_channels=s.n_channels,
                fs=s.fs,
                duration_s=s.duration_s,
                coupling_strength=s.coupling_strength if kind == "coupled" else 0.0,
                seed=seed,
                ar_pole_radius=s.ar_pole_radius,
                ar_freq_hz=s.ar_freq_hz,
                noise_std=s.noise_std,
                match_power=s.match_power,
                rec_id=f"{kind}-{i:02d}",
            )
            rec, ann = generate_synthetic(spec)
            if kind == "coupled":
                ws = extract_labeled_windows(rec, ann, n_nonseizure=0)
                ws = ws[: s.windows_per_recording]
            else:
                ws = extract_labeled_windows(
                    rec,
                    ann,
                    n_nonseizure=s.windows_per_recording,
                    seed=derive_seed(cfg.seed, class_idx, i, 1),
                    guard_s=s.guard_s,
                )
            windows.extend(ws)
    return windows


def _extract_one(args):
    window, pcfg = args
    diag = FitDiagnostics()
    return build_feature_tensor(window, pcfg, diag), diag


def extract_tensors(
    windows, pcfg: PipelineConfig, diagnostics: FitDiagnostics | None = None
) -> list[WindowTensor]:
    """Feature tensors for every window, in input order.

    Extraction is pure per window, so the EEGFUSION_WORKERS env var may fan it
    out over processes; results keep the input order either way.
    """
    workers = int(os.environ.get("EEGFUSION_WORKERS", "1") or "1")
    if workers <= 1 or len(windows) < 2:
        out = []
        for w in windows:
            out.append(build_feature_tensor(w, pcfg, diagnostics))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_extract_one, [(w, pcfg) for w in windows], chunksize=1))
    tensors = []
    for tensor, diag in results:
        tensors.append(tensor)
        if diagnostics is not None:
            diagnostics.merge(diag)
    return tensors


@dataclass
class RunManifest:
    """Inventory and provenance of one run; written atomically at run end."""

    config_hash: str
    seed: int
    versions: dict
    warnings: dict
    timing_s: dict
    files: list[str]
    config: dict
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "versions": self.versions,
            "warnings": self.warnings,
            "timing_s": self.timing_s,
            "files": self.files,
            "config": self.config,
            "metrics": self.metrics,
        }

    def write(self, path) -> None:
        path = Path(path)
        for name in self.files:
            if not (path.parent / name).exists():
                raise RuntimeError(f"manifest lists missing file: {name}")
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "eegfusion": __version__,
    }


def pipeline_run(cfg: RunConfig) -> RunManifest:
    """Run the full study under ``cfg.out_dir`` and return its manifest.

    Stage failures abort with the stage name prefixed to the error message.
    The manifest (run_manifest.json) is written last, so its presence marks a
    completed run.
    """
    validate_run_config(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_doc = run_config_to_json(cfg)
    # out_dir does not influence any output bytes, so it stays out of the hash
    cfg_hash = config_hash({k: v for k, v in cfg_doc.items() if k != "out_dir"})
    timing: dict[str, float] = {}
    files: list[str] = []
    diag = FitDiagnostics()

    def stage(name: str, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except ConfigError:
            raise
        except Exception as exc:
            raise RuntimeError(f"stage {name!r} failed: {exc}") from exc
        timing[name] = round(time.perf_counter() - t0, 6)
        return result

    windows = stage("synthesize", lambda: study_windows(cfg))
    tensors = stage("extract", lambda: extract_tensors(windows, cfg.pipeline, diag))

    def _write_ds():
        manifest_path = write_dataset(
            tensors, out / "dataset", cfg.pipeline,
            extra={"study": "synthetic-coupling", "seed": cfg.seed},
        )
        doc = json.loads(Path(manifest_path).read_text())
        files.append("dataset/" + Path(manifest_path).name)
        files.extend("dataset/" + w["file"] for w in doc["windows"])

    stage("write_dataset", _write_ds)

    def _train():
        train_ds, test_ds = train_test_split(tensors, cfg.test_fraction, seed=cfg.seed)
        stats, train_norm = normalize_features(train_ds)
        test_norm = stats.apply_many(test_ds)
        model = build_fusion_model(cfg.model)
        model, history = train(model, train_norm, cfg.train)
        save_model(model, out / "model.bin", stats)
        files.append("model.bin")
        atomic_write_text(out / "history.json", json.dumps(history, indent=2) + "\n")
        files.append("history.json")
        return model, stats, train_norm, test_norm

    model, stats, train_norm, test_norm = stage("train", _train)

    def _eval():
        doc = {
            "train": evaluate(model, train_norm).to_dict(),
            "test": evaluate(model, test_norm).to_dict(),
            "threshold": 0.5,
        }
        atomic_write_text(out / "metrics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        files.append("metrics.json")
        return doc

    metrics = stage("evaluate", _eval)

    if cfg.model.scheme in (1, 2):
        def _explain():
            report = relevance_report(
                model,
                train_norm + test_norm,
                per_sample=cfg.explain_per_sample,
                predicted_labels=cfg.explain_predicted_labels,
                config_hash=cfg_hash,
            )
            write_report_json(report, out / "relevance.json")
            files.append("relevance.json")
            write_report_csv(report, out / "relevance.csv")
            files.append("relevance.csv")
            if cfg.explain_svg:
                write_svg(report, out / "relevance.svg")
                files.append("relevance.svg")

        stage("explain", _explain)
    warnings = {
        "unstable_fits": diag.unstable_fits,
        "sigma_jitter_events": diag.sigma_jitter_events,
    }
    if cfg.model.scheme not in (1, 2):
        warnings["explain_skipped"] = (
            f"scheme {cfg.model.scheme} concatenates no per-feature branches"
        )

    manifest = RunManifest(
        config_hash=cfg_hash,
        seed=cfg.seed,
        versions=_versions(),
        warnings=warnings,
        timing_s=timing,
        files=files,
        config=cfg_doc,
        metrics=metrics,
    )
    manifest.write(out / "run_manifest.json")
    return manifest
