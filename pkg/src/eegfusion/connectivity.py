"""Connectivity measures and the per-window feature tensor.

Seven measures per window, in this fixed order along the first tensor axis:

    SM    cross-spectral density S(f)
    ISM   inverse spectral matrix P(f)
    DC    directed coherence (rows of unit power)
    COH   spectral coherence
    PDC   partial directed coherence (rows of unit power)
    PCOH  partial coherence
    PLV   phase locking value

The first six come from a per-sub-window MVAR fit and are averaged over the
frequency bins inside each rhythm band as mean |M(f)|^2, with ln(1 + x)
compression applied to SM and ISM after averaging. PLV is computed in the
time domain from band-filtered analytic phases. The result for one 20 s
window is a (7, T, C, C, B) tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dsp import BROADBAND, DEFAULT_BANDS, BandSpec, design_bandpass, filtfilt, analytic_signal, instantaneous_phase
from .mvar import (
    FitDiagnostics,
    MvarModel,
    SpectralDecomposition,
    fit_mvar,
    is_stable,
    select_order,
    spectral_decomposition,
)
from .signal_io import LabeledWindow, split_subwindows

__all__ = [
    "FEATURE_ORDER",
    "BandMatrixSet",
    "PipelineConfig",
    "WindowTensor",
    "NormStats",
    "pipeline_config_to_json",
    "pipeline_config_from_json",
    "coherence",
    "partial_coherence",
    "directed_coherence",
    "partial_directed_coherence",
    "plv_from_phases",
    "plv_matrix",
    "band_aggregate",
    "build_feature_tensor",
    "normalize_features",
]

#: Feature axis order of every window tensor.
FEATURE_ORDER = ("SM", "ISM", "DC", "COH", "PDC", "PCOH", "PLV")

#: Measures compressed with ln(1 + x) after band averaging.
_LOG_COMPRESSED = ("SM", "ISM")


def _hermitian_diag(mat: np.ndarray, what: str) -> np.ndarray:
    d = np.real(np.diagonal(mat, axis1=-2, axis2=-1))
    if np.any(d <= 0):
        raise ValueError(f"nonpositive diagonal in {what}; cannot normalize")
    return d


def _divide_by_real(mat: np.ndarray, denom: np.ndarray) -> np.ndarray:
    # complex/complex division would round d_i/d_i on the diagonal; dividing
    # the parts by the (positive real) denominator keeps the diagonal exact
    return mat.real / denom + 1j * (mat.imag / denom)


def coherence(sd: SpectralDecomposition) -> np.ndarray:
    """Coh_ij(f) = S_ij / sqrt(S_ii S_jj); the diagonal is exactly 1."""
    d = _hermitian_diag(sd.S, "spectral matrix")
    return _divide_by_real(sd.S, np.sqrt(d[:, :, None] * d[:, None, :]))


def partial_coherence(sd: SpectralDecomposition) -> np.ndarray:
    """PCoh_ij(f) = P_ij / sqrt(P_ii P_jj) on the inverse spectral matrix."""
    d = _hermitian_diag(sd.P, "inverse spectral matrix")
    return _divide_by_real(sd.P, np.sqrt(d[:, :, None] * d[:, None, :]))


def _innovation_std(sigma: np.ndarray) -> np.ndarray:
    d = np.diag(np.asarray(sigma, dtype=float))
    if np.any(d <= 0):
        raise ValueError("nonpositive innovation variance; cannot normalize")
    return np.sqrt(d)


def directed_coherence(sd: SpectralDecomposition, sigma: np.ndarray) -> np.ndarray:
    """DC_ij = s_j H_ij / sqrt(sum_m s_m^2 |H_im|^2); rows have unit power."""
    s = _innovation_std(sigma)
    num = sd.H * s[None, None, :]
    denom = np.sqrt(np.sum(np.abs(num) ** 2, axis=-1, keepdims=True))
    return num / denom


def partial_directed_coherence(sd: SpectralDecomposition, sigma: np.ndarray) -> np.ndarray:
    """PDC_ij = (1/s_j) Abar_ij / sqrt(sum_m (1/s_m^2) |Abar_im|^2), unit-power rows."""
    s = _innovation_std(sigma)
    num = sd.Abar / s[None, None, :]
    denom = np.sqrt(np.sum(np.abs(num) ** 2, axis=-1, keepdims=True))
    return num / denom


def plv_from_phases(phases: np.ndarray) -> np.ndarray:
    """PLV_ij = |mean_n exp(j (phi_i(n) - phi_j(n)))| from phases (N, C).

    The phase difference of a channel with itself is exactly zero, so the
    diagonal (and any duplicated channel pair) is exactly 1.
    """
    phases = np.asarray(phases, dtype=float)
    if phases.ndim != 2 or phases.shape[0] < 1:
        raise ValueError(f"expected (n_samples, n_channels) phases, got {phases.shape}")
    dphi = phases[:, :, None] - phases[:, None, :]
    return np.abs(np.exp(1j * dphi).mean(axis=0))


def plv_matrix(
    window: LabeledWindow,
    band: BandSpec,
    n_sub: int = 10,
    filter_order: int = 4,
) -> np.ndarray:
    """Per-sub-window phase locking values, shape (n_sub, C, C).

    Phases come from the analytic signal of the band-filtered full window,
    so sub-windows at the edges are not distorted by per-slice transforms.
    """
    filt = design_bandpass(band, window.fs, filter_order)
    xb = filtfilt(filt, window.samples)
    phases = np.column_stack(
        [instantaneous_phase(analytic_signal(xb[:, c], band=band.name)) for c in range(xb.shape[1])]
    )
    n = phases.shape[0]
    if n % n_sub:
        raise ValueError(
            f"window of {n} samples does not divide into {n_sub} sub-windows"
        )
    step = n // n_sub
    out = np.empty((n_sub, xb.shape[1], xb.shape[1]))
    for t in range(n_sub):
        out[t] = plv_from_phases(phases[t * step : (t + 1) * step])
    return out


@dataclass(frozen=True)
class BandMatrixSet:
    """Band-averaged C x C matrices for one measure: values is (B, C, C)."""

    values: np.ndarray
    band_names: tuple[str, ...]
    measure: str


def band_aggregate(
    values: np.ndarray,
    bands: tuple[BandSpec, ...],
    freqs: np.ndarray,
    measure: str,
) -> BandMatrixSet:
    """Average |M(f)|^2 over the grid frequencies inside each band.

    Band membership is half-open, [low_hz, high_hz). SM and ISM are
    compressed with ln(1 + x) after averaging. A band holding no grid
    frequency is an error: widen the grid (n_freqs) or the band.
    """
    if measure not in FEATURE_ORDER:
        raise ValueError(f"unknown measure {measure!r}; expected one of {FEATURE_ORDER}")
    power = np.abs(np.asarray(values)) ** 2
    out = np.empty((len(bands),) + power.shape[1:])
    for b, band in enumerate(bands):
        mask = (freqs >= band.low_hz) & (freqs < band.high_hz)
        if not mask.any():
            raise ValueError(
                f"band {band.name!r} [{band.low_hz}, {band.high_hz}] Hz contains "
                f"no grid frequencies; increase n_freqs or widen the band"
            )
        avg = power[mask].mean(axis=0)
        out[b] = np.log1p(avg) if measure in _LOG_COMPRESSED else avg
    return BandMatrixSet(
        values=out, band_names=tuple(b.name for b in bands), measure=measure
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Feature-extraction settings shared by every window of a run.

    mode "broadband" fits one MVAR per sub-window on the broadband-filtered
    signal and band-averages its spectra; "per_band" refits on each
    band-filtered signal and averages only inside that band.
    """

    mode: str = "broadband"
    order: int = 5
    aic: bool = False
    aic_max: int = 12
    n_freqs: int = 64
    ridge: float = 1e-4
    filter_order: int = 4
    subwindows: int = 10
    bands: tuple[BandSpec, ...] = DEFAULT_BANDS
    broadband: BandSpec = BROADBAND

    def __post_init__(self) -> None:
        if self.mode not in ("broadband", "per_band"):
            raise ValueError(f"mode must be 'broadband' or 'per_band', got {self.mode!r}")
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.aic_max < 1:
            raise ValueError(f"aic_max must be >= 1, got {self.aic_max}")
        if self.n_freqs < 1:
            raise ValueError(f"n_freqs must be >= 1, got {self.n_freqs}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.subwindows < 1:
            raise ValueError(f"subwindows must be >= 1, got {self.subwindows}")
        if not self.bands:
            raise ValueError("need at least one rhythm band")


def pipeline_config_to_json(cfg: PipelineConfig) -> dict:
    return {
        "mode": cfg.mode,
        "order": cfg.order,
        "aic": cfg.aic,
        "aic_max": cfg.aic_max,
        "n_freqs": cfg.n_freqs,
        "ridge": cfg.ridge,
        "filter_order": cfg.filter_order,
        "subwindows": cfg.subwindows,
        "bands": [
            {"name": b.name, "low_hz": b.low_hz, "high_hz": b.high_hz} for b in cfg.bands
        ],
        "broadband": {
            "name": cfg.broadband.name,
            "low_hz": cfg.broadband.low_hz,
            "high_hz": cfg.broadband.high_hz,
        },
    }


def pipeline_config_from_json(doc: dict) -> PipelineConfig:
    def band(d):
        return BandSpec(name=d["name"], low_hz=d["low_hz"], high_hz=d["high_hz"])

    kwargs = {
        k: doc[k]
        for k in ("mode", "order", "aic", "aic_max", "n_freqs", "ridge", "filter_order", "subwindows")
        if k in doc
    }
    if "bands" in doc:
        kwargs["bands"] = tuple(band(d) for d in doc["bands"])
    if "broadband" in doc:
        kwargs["broadband"] = band(doc["broadband"])
    return PipelineConfig(**kwargs)


@dataclass
class WindowTensor:
    """Feature tensor of one window: values has shape (7, T, C, C, B)."""

    values: np.ndarray
    label: int
    source_id: str

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _spectral_measures(sd: SpectralDecomposition, sigma: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "SM": sd.S,
        "ISM": sd.P,
        "DC": directed_coherence(sd, sigma),
        "COH": coherence(sd),
        "PDC": partial_directed_coherence(sd, sigma),
        "PCOH": partial_coherence(sd),
    }


def _fit_subwindow(
    sub: np.ndarray,
    fs: float,
    cfg: PipelineConfig,
    diagnostics: FitDiagnostics | None,
) -> tuple[MvarModel, SpectralDecomposition]:
    p = select_order(sub, cfg.aic_max, cfg.ridge) if cfg.aic else cfg.order
    model = fit_mvar(sub, p, fs, cfg.ridge)
    if diagnostics is not None and not is_stable(model):
        diagnostics.unstable_fits += 1
    return model, spectral_decomposition(model, cfg.n_freqs, diagnostics)


def build_feature_tensor(
    window: LabeledWindow,
    cfg: PipelineConfig = PipelineConfig(),
    diagnostics: FitDiagnostics | None = None,
) -> WindowTensor:
    """Compute the full (7, T, C, C, B) tensor for one labeled window."""
    t_sub = cfg.subwindows
    n_bands = len(cfg.bands)
    c = window.samples.shape[1]
    tensor = np.empty((len(FEATURE_ORDER), t_sub, c, c, n_bands))
    f_idx = {name: i for i, name in enumerate(FEATURE_ORDER)}

    def fail(context: str, exc: Exception) -> ValueError:
        return ValueError(f"window {window.source_id!r}, {context}: {exc}")

    if cfg.mode == "broadband":
        filt = design_bandpass(cfg.broadband, window.fs, cfg.filter_order)
        clean = replace(window, samples=filtfilt(filt, window.samples))
        subs = split_subwindows(clean, t_sub).sub_windows
        for t, sub in enumerate(subs):
            try:
                model, sd = _fit_subwindow(sub, window.fs, cfg, diagnostics)
                for name, vals in _spectral_measures(sd, model.Sigma).items():
                    bm = band_aggregate(vals, cfg.bands, sd.freqs, name)
                    tensor[f_idx[name], t] = np.moveaxis(bm.values, 0, -1)
            except ValueError as exc:
                raise fail(f"sub-window {t}", exc) from exc
    else:
        for b, band in enumerate(cfg.bands):
            filt = design_bandpass(band, window.fs, cfg.filter_order)
            banded = replace(window, samples=filtfilt(filt, window.samples))
            subs = split_subwindows(banded, t_sub).sub_windows
            for t, sub in enumerate(subs):
                try:
                    model, sd = _fit_subwindow(sub, window.fs, cfg, diagnostics)
                    for name, vals in _spectral_measures(sd, model.Sigma).items():
                        bm = band_aggregate(vals, (band,), sd.freqs, name)
                        tensor[f_idx[name], t, :, :, b] = bm.values[0]
                except ValueError as exc:
                    raise fail(f"band {band.name!r}, sub-window {t}", exc) from exc

    for b, band in enumerate(cfg.bands):
        try:
            tensor[f_idx["PLV"], :, :, :, b] = plv_matrix(
                window, band, t_sub, cfg.filter_order
            )
        except ValueError as exc:
            raise fail(f"band {band.name!r} PLV", exc) from exc

    if not np.isfinite(tensor).all():
        raise ValueError(f"window {window.source_id!r}: non-finite feature values")
    return WindowTensor(values=tensor, label=window.label, source_id=window.source_id)


@dataclass(frozen=True)
class NormStats:
    """Per-(feature, band) z-scoring statistics learned on training data."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, t: WindowTensor) -> WindowTensor:
        """Z-score; (feature, band) cells with zero spread pass through unchanged."""
        mean = self.mean[:, None, None, None, :]
        std = self.std[:, None, None, None, :]
        scaled = np.where(std > 0, (t.values - mean) / np.where(std > 0, std, 1.0), t.values)
        return WindowTensor(values=scaled, label=t.label, source_id=t.source_id)

    def apply_many(self, tensors) -> list[WindowTensor]:
        return [self.apply(t) for t in tensors]


def normalize_features(train: list[WindowTensor]) -> tuple[NormStats, list[WindowTensor]]:
    """Fit per-(feature, band) mean/std on training tensors and z-score them."""
    if not train:
        raise ValueError("cannot fit normalization on an empty training set")
    arr = np.stack([t.values for t in train])
    mean = arr.mean(axis=(0, 2, 3, 4))
    std = arr.std(axis=(0, 2, 3, 4))
    stats = NormStats(mean=mean, std=std)
    return stats, stats.apply_many(train)
