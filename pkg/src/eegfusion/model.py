"""Fusion classifiers over window tensors: four schemes, training, metrics.

All schemes end in a sigmoid over binary cross-entropy. Schemes 1 and 2
concatenate per-branch embeddings before the dense head; that concat vector
is the substrate of the relevance computation and carries a group map from
embedding index to feature id. Schemes 3 and 4 fuse features before the
recurrent trunk and therefore expose no per-feature embedding.

    scheme 1: one branch per (feature, band): channel-collapse -> LSTM ->
              attention -> dense(d1); concat(F*B*d1) -> head
    scheme 2: one branch per feature: band_mix -> channel-collapse -> LSTM ->
              attention -> dense(d1); concat(F*d1) -> head
    scheme 3: per feature band_mix + channel-collapse to a length-C vector,
              stack to (C, F), contract the feature axis -> trunk
    scheme 4: per feature band_mix to C x C, stack to (C, C, F), feature_mix
              -> shared channel-collapse -> trunk
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit as _sigmoid

from .connectivity import FEATURE_ORDER, NormStats
from .layers import (
    AttentionPool,
    ContractLast,
    ContractRow,
    Dense,
    Dropout,
    LastStep,
    LSTM,
    ParamRegistry,
    Slot,
)

__all__ = [
    "ModelConfig",
    "FusionModel",
    "TrainConfig",
    "Metrics",
    "build_fusion_model",
    "train",
    "evaluate",
    "metrics_from_counts",
    "bce_loss",
    "save_model",
    "load_model",
]

_MODEL_FORMAT = "eegfusion-model"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings; dims must match the dataset tensors."""

    scheme: int = 2
    n_channels: int = 4
    subwindows: int = 10
    n_bands: int = 5
    n_features: int = len(FEATURE_ORDER)
    embed_dim: int = 16
    lstm_hidden: int = 16
    lstm_layers: int = 1
    dense_sizes: tuple[int, ...] = (16,)
    attention: bool = True
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scheme not in (1, 2, 3, 4):
            raise ValueError(f"scheme must be 1..4, got {self.scheme}")
        for name in ("n_channels", "subwindows", "n_bands", "n_features", "embed_dim", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lstm_layers not in (1, 2):
            raise ValueError(f"lstm_layers must be 1 or 2, got {self.lstm_layers}")
        if any(w < 1 for w in self.dense_sizes):
            raise ValueError(f"dense_sizes must all be >= 1, got {self.dense_sizes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def tensor_shape(self) -> tuple[int, int, int, int, int]:
        return (self.n_features, self.subwindows, self.n_channels, self.n_channels, self.n_bands)


class FusionModel:
    """One flat parameter vector plus the layer graph of the chosen scheme."""

    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        reg = ParamRegistry()
        self.registry = reg
        self.nodes: list[dict] = []
        c, b, f = cfg.n_channels, cfg.n_bands, cfg.n_features
        d1, h = cfg.embed_dim, cfg.lstm_hidden

        def pool(name: str):
            return AttentionPool(reg, name, h) if cfg.attention else LastStep()

        self.branches: list[dict] = []
        self.trunk: dict | None = None
        if cfg.scheme == 1:
            for fi in range(f):
                for bi in range(b):
                    name = f"branch.f{fi}.b{bi}"
                    self.branches.append(
                        {
                            "feature": fi,
                            "band": bi,
                            "layers": {
                                "collapse": ContractRow(reg, f"{name}.collapse", c),
                                "lstm": LSTM(reg, f"{name}.lstm", c, h, cfg.lstm_layers),
                                "pool": pool(f"{name}.pool"),
                                "embed": Dense(reg, f"{name}.embed", h, d1),
                            },
                        }
                    )
            n_embed = f * b * d1
            self.group_map = np.repeat(np.arange(f), b * d1)
        elif cfg.scheme == 2:
            for fi in range(f):
                name = f"branch.f{fi}"
                self.branches.append(
                    {
                        "feature": fi,
                        "band": None,
                        "layers": {
                            "band_mix": ContractLast(reg, f"{name}.band_mix", b),
                            "collapse": ContractRow(reg, f"{name}.collapse", c),
                            "lstm": LSTM(reg, f"{name}.lstm", c, h, cfg.lstm_layers),
                            "pool": pool(f"{name}.pool"),
                            "embed": Dense(reg, f"{name}.embed", h, d1),
                        },
                    }
                )
            n_embed = f * d1
            self.group_map = np.repeat(np.arange(f), d1)
        elif cfg.scheme == 3:
            for fi in range(f):
                name = f"pre.f{fi}"
                self.branches.append(
                    {
                        "feature": fi,
                        "band": None,
                        "layers": {
                            "band_mix": ContractLast(reg, f"{name}.band_mix", b),
                            "collapse": ContractRow(reg, f"{name}.collapse", c),
                        },
                    }
                )
            self.trunk = {
                "feature_mix": ContractLast(reg, "trunk.feature_mix", f),
                "lstm": LSTM(reg, "trunk.lstm", c, h, cfg.lstm_layers),
                "pool": pool("trunk.pool"),
            }
            n_embed = h
            self.group_map = None
        else:
            for fi in range(f):
                self.branches.append(
                    {
                        "feature": fi,
                        "band": None,
                        "layers": {"band_mix": ContractLast(reg, f"pre.f{fi}.band_mix", b)},
                    }
                )
            self.trunk = {
                "feature_mix": ContractLast(reg, "trunk.feature_mix", f),
                "collapse": ContractRow(reg, "trunk.collapse", c),
                "lstm": LSTM(reg, "trunk.lstm", c, h, cfg.lstm_layers),
                "pool": pool("trunk.pool"),
            }
            n_embed = h
            self.group_map = None

        self.n_embed = n_embed
        self.head: list[Dense] = []
        n_in = n_embed
        for li, width in enumerate(cfg.dense_sizes):
            self.head.append(Dense(reg, f"head.d{li}", n_in, width))
            n_in = width
        self.head.append(Dense(reg, "head.out", n_in, 1, relu=False))
        self.dropout = Dropout(cfg.dropout_rate)

        for br in self.branches:
            for lname, layer in br["layers"].items():
                self._describe(layer, f"branch{self.branches.index(br)}.{lname}")
        if self.trunk is not None:
            for lname, layer in self.trunk.items():
                self._describe(layer, f"trunk.{lname}")
        for li, layer in enumerate(self.head):
            self._describe(layer, f"head.{li}")

        self.params = reg.init_params(cfg.seed)
        self._cache: dict | None = None

    def _describe(self, layer, name: str) -> None:
        self.nodes.append(
            {
                "name": name,
                "kind": type(layer).__name__,
                "n_params": int(sum(s.size for s in layer.slots)),
            }
        )

    # -- structure helpers ------------------------------------------------

    @property
    def param_count(self) -> int:
        return int(self.params.size)

    @property
    def head_slots(self) -> list[Slot]:
        return [s for layer in self.head for s in layer.slots]

    def branch_slots(self, i: int) -> list[Slot]:
        return [s for layer in self.branches[i]["layers"].values() for s in layer.slots]

    def embed_slice(self, branch_index: int) -> slice:
        """Columns of the concat embedding produced by one branch (schemes 1-2)."""
        if self.cfg.scheme not in (1, 2):
            raise ValueError(f"scheme {self.cfg.scheme} has no concat embedding")
        d1 = self.cfg.embed_dim
        return slice(branch_index * d1, (branch_index + 1) * d1)

    def reinit_head(self, rng: np.random.Generator) -> None:
        """Fresh head weights (uniform +-1/sqrt(fan_in)) and zero biases."""
        ParamRegistry.init_slots(self.params, self.head_slots, rng)

    def kink_margin(self) -> float:
        """Smallest |ReLU preactivation| seen in the last cached forward.

        Finite-difference gradient oracles are only valid when no ReLU
        preactivation lies within the perturbation radius of zero; this lets
        tests verify that precondition.
        """
        if self._cache is None:
            raise RuntimeError("kink_margin() requires a training-mode forward pass")
        margins = []

        def scan(caches):
            for lc in caches:
                if "margin" in lc:
                    margins.append(lc["margin"])

        for lcs in self._cache["branches"]:
            scan(lcs)
        scan(self._cache.get("trunk", []) or [])
        scan(self._cache["head"])
        return min(margins) if margins else np.inf

    # -- forward / backward ------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 6 or x.shape[1:] != self.cfg.tensor_shape:
            raise ValueError(
                f"input shape {x.shape} does not match (M,) + {self.cfg.tensor_shape}"
            )
        return x

    def forward_batch(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Probabilities for a batch (M, F, T, C, C, B); train mode caches
        activations for a following backward() and enables dropout."""
        x = self._check_input(x)
        if train and self.cfg.dropout_rate > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        theta = self.params
        cache: dict | None = (
            {"branches": [], "trunk": {}, "head": [], "drop": []} if train else None
        )

        def run(layer, xi, store):
            lc = {} if cache is not None else None
            y = layer.forward(theta, xi, lc)
            if cache is not None:
                store.append(lc)
            return y

        branch_out = []
        for br in self.branches:
            fi, bi = br["feature"], br["band"]
            layers = br["layers"]
            lcs: list[dict] = []
            if self.cfg.scheme == 1:
                y = x[:, fi, :, :, :, bi]
            else:
                y = x[:, fi]
            for layer in layers.values():
                y = run(layer, y, lcs)
            branch_out.append(y)
            if cache is not None:
                cache["branches"].append(lcs)

        if self.cfg.scheme in (1, 2):
            v = np.concatenate(branch_out, axis=1)
        else:
            stacked = np.stack(branch_out, axis=-1)
            y = stacked
            tcs: list[dict] = []
            for layer in self.trunk.values():
                y = run(layer, y, tcs)
            v = y
            if cache is not None:
                cache["trunk"] = tcs

        y = v
        head_store: list[dict] = cache["head"] if cache is not None else []
        for layer in self.head[:-1]:
            y = run(layer, y, head_store)
            dc: dict = {}
            y = self.dropout.forward(y, dc if cache is not None else None, rng, train)
            if cache is not None:
                cache["drop"].append(dc)
        logits = run(self.head[-1], y, head_store)
        z = logits[:, 0]
        probs = _sigmoid(z)
        if cache is not None:
            cache["v"] = v
            cache["z"] = z
            cache["probs"] = probs
            cache["m"] = x.shape[0]
            self._cache = cache
        return probs

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None):
        """Single-sample (F, T, C, C, B) or batched probability."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(getattr(x, "values", x), dtype=float)
        if x.ndim == 5:
            return float(self.forward_batch(x[None], train=(mode == "train"), rng=rng)[0])
        return self.forward_batch(x, train=(mode == "train"), rng=rng)

    def embed_batch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode probabilities plus the concat embedding (schemes 1-2)."""
        if self.cfg.scheme not in (1, 2):
            raise ValueError(
                f"scheme {self.cfg.scheme} fuses features before the trunk and has "
                f"no concat embedding; feature relevance needs scheme 1 or 2"
            )
        x = self._check_input(x)
        theta = self.params
        branch_out = []
        for br in self.branches:
            fi, bi = br["feature"], br["band"]
            y = x[:, fi, :, :, :, bi] if self.cfg.scheme == 1 else x[:, fi]
            for layer in br["layers"].values():
                y = layer.forward(theta, y, None)
            branch_out.append(y)
        v = np.concatenate(branch_out, axis=1)
        y = v
        for layer in self.head[:-1]:
            y = layer.forward(theta, y, None)
        z = self.head[-1].forward(theta, y, None)[:, 0]
        return _sigmoid(z), v

    def backward(self, labels: np.ndarray) -> np.ndarray:
        """Gradient of mean binary cross-entropy w.r.t. the flat parameters.

        Requires a preceding training-mode forward over the same batch.
        """
        cache = self._cache
        if cache is None:
            raise RuntimeError("backward() called without a training-mode forward pass")
        labels = np.asarray(labels, dtype=float)
        m = cache["m"]
        if labels.shape != (m,):
            raise ValueError(f"labels shape {labels.shape} != ({m},)")
        theta = self.params
        grad = np.zeros_like(theta)

        gy = ((cache["probs"] - labels) / m)[:, None]
        head_caches = cache["head"]
        gy = self.head[-1].backward(theta, grad, head_caches[-1], gy)
        for i in reversed(range(len(self.head) - 1)):
            gy = self.dropout.backward(cache["drop"][i], gy)
            gy = self.head[i].backward(theta, grad, head_caches[i], gy)
        gv = gy

        if self.cfg.scheme in (1, 2):
            d1 = self.cfg.embed_dim
            for i, br in enumerate(self.branches):
                gyi = gv[:, i * d1 : (i + 1) * d1]
                lcs = cache["branches"][i]
                for layer, lc in zip(reversed(list(br["layers"].values())), reversed(lcs)):
                    gyi = layer.backward(theta, grad, lc, gyi)
        else:
            g = gv
            tcs = cache["trunk"]
            for layer, lc in zip(reversed(list(self.trunk.values())), reversed(tcs)):
                g = layer.backward(theta, grad, lc, g)
            for i, br in enumerate(self.branches):
                gyi = g[..., i]
                lcs = cache["branches"][i]
                for layer, lc in zip(reversed(list(br["layers"].values())), reversed(lcs)):
                    gyi = layer.backward(theta, grad, lc, gyi)
        return grad


def build_fusion_model(cfg: ModelConfig) -> FusionModel:
    """Construct and initialize a model for the given configuration."""
    return FusionModel(cfg)


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy computed stably from logits."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for (optionally two-phase) training."""

    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    label_flip_second_phase: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


class _Sgd:
    def __init__(self, n: int, lr: float) -> None:
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


class _Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _stack_dataset(ds) -> tuple[np.ndarray, np.ndarray]:
    if not ds:
        raise ValueError("dataset is empty")
    x = np.stack([np.asarray(t.values, dtype=float) for t in ds])
    y = np.array([t.label for t in ds], dtype=float)
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("labels must be 0 or 1")
    return x, y


def train(m: FusionModel, train_ds, cfg: TrainConfig) -> tuple[FusionModel, list[dict]]:
    """Seeded mini-batch training; returns the model and per-epoch history.

    With label_flip_second_phase, a second phase continues from the phase-one
    weights with inverted labels and a re-initialized head.
    """
    x, y = _stack_dataset(train_ds)
    n = x.shape[0]
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(cfg.seed)
    make_opt = _Adam if cfg.optimizer == "adam" else _Sgd
    history: list[dict] = []
    phases = [(1, y)] + ([(2, 1.0 - y)] if cfg.label_flip_second_phase else [])
    for phase, labels in phases:
        if phase == 2:
            m.reinit_head(rng)
        opt = make_opt(m.param_count, cfg.learning_rate)
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                probs = m.forward_batch(x[idx], train=True, rng=rng)
                loss = bce_loss(m._cache["z"], labels[idx])
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at phase {phase}, epoch {epoch}"
                    )
                grad = m.backward(labels[idx])
                opt.step(m.params, grad)
                loss_sum += loss * idx.size
                correct += int(((probs >= 0.5) == labels[idx].astype(bool)).sum())
            history.append(
                {
                    "phase": phase,
                    "epoch": epoch,
                    "loss": loss_sum / n,
                    "accuracy": correct / n,
                }
            )
    return m, history


@dataclass(frozen=True)
class Metrics:
    """Confusion counts and the derived ratios; seizure is the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int
    sensitivity: float
    specificity: float
    precision: float
    accuracy: float
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "accuracy": self.accuracy,
            "undefined": list(self.undefined),
        }


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    """Sensitivity TP/(TP+FN), specificity TN/(TN+FP), precision TP/(TP+FP),
    accuracy (TP+TN)/total; a zero denominator yields 0 plus an undefined flag."""
    counts = {"tp": tp, "fp": fp, "fn": fn, "tn": tn}
    for name, v in counts.items():
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a nonnegative integer, got {v}")
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("empty confusion matrix")
    undefined: list[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    return Metrics(
        tp=int(tp),
        fp=int(fp),
        fn=int(fn),
        tn=int(tn),
        sensitivity=ratio(tp, tp + fn, "sensitivity"),
        specificity=ratio(tn, tn + fp, "specificity"),
        precision=ratio(tp, tp + fp, "precision"),
        accuracy=(tp + tn) / total,
        undefined=tuple(undefined),
    )


def evaluate(m: FusionModel, ds, threshold: float = 0.5) -> Metrics:
    """Confusion metrics of eval-mode predictions at the given threshold."""
    x, y = _stack_dataset(ds)
    probs = m.forward_batch(x)
    preds = probs >= threshold
    actual = y.astype(bool)
    tp = int(np.sum(preds & actual))
    fp = int(np.sum(preds & ~actual))
    fn = int(np.sum(~preds & actual))
    tn = int(np.sum(~preds & ~actual))
    return metrics_from_counts(tp, fp, fn, tn)


def _config_to_json(cfg: ModelConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["dense_sizes"] = list(cfg.dense_sizes)
    return d


def save_model(m: FusionModel, path, norm_stats: NormStats | None = None) -> None:
    """One JSON header line, then the flat parameters as little-endian f32."""
    header = {
        "format": _MODEL_FORMAT,
        "format_version": _MODEL_VERSION,
        "model_config": _config_to_json(m.cfg),
        "feature_order": list(FEATURE_ORDER),
        "param_count": m.param_count,
        "norm_stats": None
        if norm_stats is None
        else {"mean": norm_stats.mean.tolist(), "std": norm_stats.std.tolist()},
    }
    path = Path(path)
    blob = json.dumps(header, sort_keys=True).encode() + b"\n" + m.params.astype("<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_model(path) -> tuple[FusionModel, NormStats | None]:
    """Rebuild a model (and its normalization stats) from a model file."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid header JSON: {exc}") from exc
    if header.get("format") != _MODEL_FORMAT:
        raise ValueError(f"{path}: not a model file (format {header.get('format')!r})")
    if header.get("format_version") != _MODEL_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')!r}")
    raw_cfg = dict(header["model_config"])
    raw_cfg["dense_sizes"] = tuple(raw_cfg.get("dense_sizes", ()))
    m = build_fusion_model(ModelConfig(**raw_cfg))
    params = np.frombuffer(data[nl + 1 :], dtype="<f4")
    if params.size != header["param_count"] or params.size != m.param_count:
        raise ValueError(
            f"{path}: parameter payload has {params.size} floats, "
            f"expected {m.param_count}"
        )
    m.params = params.astype(float)
    stats = None
    if header.get("norm_stats") is not None:
        stats = NormStats(
            mean=np.array(header["norm_stats"]["mean"], dtype=float),
            std=np.array(header["norm_stats"]["std"], dtype=float),
        )
    return m, stats
