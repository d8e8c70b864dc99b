"""Differentiable layers over one flat float64 parameter vector.

Every layer registers named slices in a shared ParamRegistry and reads its
weights as views into the flat vector, so an optimizer updates a single
array and finite-difference checks can perturb any coordinate. Forward
passes take a batch with a leading sample axis; backward passes accumulate
into a flat gradient of the same length and return the gradient w.r.t. the
layer input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

__all__ = [
    "Slot",
    "ParamRegistry",
    "ContractRow",
    "ContractLast",
    "Dense",
    "LSTM",
    "AttentionPool",
    "LastStep",
    "Dropout",
]


@dataclass(frozen=True)
class Slot:
    """One named parameter block inside the flat vector."""

    name: str
    sl: slice
    shape: tuple[int, ...]
    fan_in: int | None  # None: initialized to zero (biases)

    @property
    def size(self) -> int:
        return self.sl.stop - self.sl.start


class ParamRegistry:
    """Allocates slices of the flat parameter vector to layers."""

    def __init__(self) -> None:
        self.slots: list[Slot] = []
        self.size = 0

    def add(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> Slot:
        n = int(np.prod(shape))
        slot = Slot(name=name, sl=slice(self.size, self.size + n), shape=tuple(shape), fan_in=fan_in)
        self.slots.append(slot)
        self.size += n
        return slot

    def init_params(self, seed: int) -> np.ndarray:
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.size)
        self.init_slots(theta, self.slots, rng)
        return theta

    @staticmethod
    def init_slots(theta: np.ndarray, slots: list[Slot], rng: np.random.Generator) -> None:
        for slot in slots:
            if slot.fan_in:
                bound = 1.0 / np.sqrt(slot.fan_in)
                theta[slot.sl] = rng.uniform(-bound, bound, slot.size)
            else:
                theta[slot.sl] = 0.0

    @staticmethod
    def view(theta: np.ndarray, slot: Slot) -> np.ndarray:
        return theta[slot.sl].reshape(slot.shape)


class ContractRow:
    """Learned contraction of the second-to-last axis, with ReLU.

    Input (..., R, K) -> output (..., K): y = relu(sum_r w_r x[..., r, :] + b).
    Collapses the row-channel axis of stacked C x C connectivity matrices.
    """

    def __init__(self, reg: ParamRegistry, name: str, n_rows: int) -> None:
        self.w = reg.add(f"{name}.w", (n_rows,), fan_in=n_rows)
        self.b = reg.add(f"{name}.b", (1,))
        self.slots = [self.w, self.b]

    def forward(self, theta, x, cache=None):
        s = np.einsum("...rk,r->...k", x, theta[self.w.sl]) + theta[self.b.sl][0]
        if cache is not None:
            cache["x"], cache["mask"] = x, s > 0
            cache["margin"] = float(np.abs(s).min())
        return np.maximum(s, 0.0)

    def backward(self, theta, grad, cache, gy):
        gs = gy * cache["mask"]
        k = gs.shape[-1]
        x = cache["x"]
        grad[self.w.sl] += np.einsum(
            "nk,nrk->r", gs.reshape(-1, k), x.reshape(-1, x.shape[-2], k)
        )
        grad[self.b.sl] += gs.sum()
        return np.einsum("...k,r->...rk", gs, theta[self.w.sl])


class ContractLast:
    """Learned contraction of the last axis, with ReLU.

    Input (..., K) -> output (...): y = relu(x . w + b). Mixes the band axis
    (K = B) or the feature axis (K = F) down to a scalar per position.
    """

    def __init__(self, reg: ParamRegistry, name: str, n_in: int) -> None:
        self.w = reg.add(f"{name}.w", (n_in,), fan_in=n_in)
        self.b = reg.add(f"{name}.b", (1,))
        self.slots = [self.w, self.b]

    def forward(self, theta, x, cache=None):
        s = np.einsum("...k,k->...", x, theta[self.w.sl]) + theta[self.b.sl][0]
        if cache is not None:
            cache["x"], cache["mask"] = x, s > 0
            cache["margin"] = float(np.abs(s).min())
        return np.maximum(s, 0.0)

    def backward(self, theta, grad, cache, gy):
        gs = gy * cache["mask"]
        x = cache["x"]
        grad[self.w.sl] += gs.reshape(-1) @ x.reshape(-1, x.shape[-1])
        grad[self.b.sl] += gs.sum()
        return gs[..., None] * theta[self.w.sl]


class Dense:
    """Affine map on the last axis: (M, n_in) -> (M, n_out), optional ReLU."""

    def __init__(self, reg: ParamRegistry, name: str, n_in: int, n_out: int, relu: bool = True) -> None:
        self.W = reg.add(f"{name}.W", (n_in, n_out), fan_in=n_in)
        self.b = reg.add(f"{name}.b", (n_out,))
        self.relu = relu
        self.slots = [self.W, self.b]

    def forward(self, theta, x, cache=None):
        s = x @ ParamRegistry.view(theta, self.W) + theta[self.b.sl]
        y = np.maximum(s, 0.0) if self.relu else s
        if cache is not None:
            cache["x"] = x
            if self.relu:
                cache["mask"] = s > 0
                cache["margin"] = float(np.abs(s).min())
        return y

    def backward(self, theta, grad, cache, gy):
        gs = gy * cache["mask"] if self.relu else gy
        grad[self.W.sl] += (cache["x"].T @ gs).ravel()
        grad[self.b.sl] += gs.sum(axis=0)
        return gs @ ParamRegistry.view(theta, self.W).T


class LSTM:
    """Stack of standard LSTM layers: (M, T, D) -> (M, T, H), full sequence.

    Gate preactivations are ordered [input, forget, cell, output] inside the
    fused 4H weight matrices.
    """

    def __init__(self, reg: ParamRegistry, name: str, d_in: int, hidden: int, n_layers: int = 1) -> None:
        self.hidden = hidden
        self.layer_slots: list[tuple[Slot, Slot, Slot]] = []
        self.slots: list[Slot] = []
        d = d_in
        for layer in range(n_layers):
            wx = reg.add(f"{name}.l{layer}.Wx", (d, 4 * hidden), fan_in=d)
            wh = reg.add(f"{name}.l{layer}.Wh", (hidden, 4 * hidden), fan_in=hidden)
            b = reg.add(f"{name}.l{layer}.b", (4 * hidden,))
            self.layer_slots.append((wx, wh, b))
            self.slots.extend((wx, wh, b))
            d = hidden

    def forward(self, theta, x, cache=None):
        h_dim = self.hidden
        seq = x
        layer_caches = []
        for wx_s, wh_s, b_s in self.layer_slots:
            wx = ParamRegistry.view(theta, wx_s)
            wh = ParamRegistry.view(theta, wh_s)
            b = theta[b_s.sl]
            m, t_len, _ = seq.shape
            out = np.empty((m, t_len, h_dim))
            h = np.zeros((m, h_dim))
            c = np.zeros((m, h_dim))
            steps = []
            for t in range(t_len):
                z = seq[:, t] @ wx + h @ wh + b
                gi = _sigmoid(z[:, :h_dim])
                gf = _sigmoid(z[:, h_dim : 2 * h_dim])
                gc = np.tanh(z[:, 2 * h_dim : 3 * h_dim])
                go = _sigmoid(z[:, 3 * h_dim :])
                c_new = gf * c + gi * gc
                tc = np.tanh(c_new)
                h = go * tc
                out[:, t] = h
                if cache is not None:
                    steps.append((gi, gf, gc, go, c, tc))  # c is c_{t-1}
                c = c_new
            if cache is not None:
                layer_caches.append({"x": seq, "out": out, "steps": steps})
            seq = out
        if cache is not None:
            cache["layers"] = layer_caches
        return seq

    def backward(self, theta, grad, cache, gy):
        h_dim = self.hidden
        for (wx_s, wh_s, b_s), lc in zip(reversed(self.layer_slots), reversed(cache["layers"])):
            wx = ParamRegistry.view(theta, wx_s)
            wh = ParamRegistry.view(theta, wh_s)
            x, out, steps = lc["x"], lc["out"], lc["steps"]
            m, t_len, d = x.shape
            gx = np.zeros((m, t_len, d))
            g_wx = np.zeros_like(wx)
            g_wh = np.zeros_like(wh)
            g_b = np.zeros(4 * h_dim)
            dh_next = np.zeros((m, h_dim))
            dc_next = np.zeros((m, h_dim))
            for t in reversed(range(t_len)):
                gi, gf, gc, go, c_prev, tc = steps[t]
                dh = gy[:, t] + dh_next
                d_go = dh * tc
                dc = dh * go * (1.0 - tc * tc) + dc_next
                d_gi = dc * gc
                d_gf = dc * c_prev
                d_gc = dc * gi
                dc_next = dc * gf
                dz = np.concatenate(
                    [
                        d_gi * gi * (1.0 - gi),
                        d_gf * gf * (1.0 - gf),
                        d_gc * (1.0 - gc * gc),
                        d_go * go * (1.0 - go),
                    ],
                    axis=1,
                )
                g_wx += x[:, t].T @ dz
                h_prev = out[:, t - 1] if t > 0 else np.zeros((m, h_dim))
                g_wh += h_prev.T @ dz
                g_b += dz.sum(axis=0)
                gx[:, t] = dz @ wx.T
                dh_next = dz @ wh.T
            grad[wx_s.sl] += g_wx.ravel()
            grad[wh_s.sl] += g_wh.ravel()
            grad[b_s.sl] += g_b
            gy = gx
        return gy


class AttentionPool:
    """Additive attention over time: (M, T, H) -> (M, H).

    Scores e_t = v . tanh(W h_t + b); softmax over t; output is the
    weight-averaged sequence. Weights are nonnegative and sum to 1.
    """

    def __init__(self, reg: ParamRegistry, name: str, hidden: int) -> None:
        self.W = reg.add(f"{name}.W", (hidden, hidden), fan_in=hidden)
        self.b = reg.add(f"{name}.b", (hidden,))
        self.v = reg.add(f"{name}.v", (hidden,), fan_in=hidden)
        self.slots = [self.W, self.b, self.v]

    def forward(self, theta, x, cache=None):
        w = ParamRegistry.view(theta, self.W)
        u = np.tanh(x @ w + theta[self.b.sl])
        e = u @ theta[self.v.sl]
        e = e - e.max(axis=1, keepdims=True)
        ew = np.exp(e)
        alpha = ew / ew.sum(axis=1, keepdims=True)
        if cache is not None:
            cache["x"], cache["u"], cache["alpha"] = x, u, alpha
        return np.einsum("mt,mth->mh", alpha, x)

    def backward(self, theta, grad, cache, gy):
        x, u, alpha = cache["x"], cache["u"], cache["alpha"]
        w = ParamRegistry.view(theta, self.W)
        g_alpha = np.einsum("mh,mth->mt", gy, x)
        gx = alpha[:, :, None] * gy[:, None, :]
        ge = alpha * (g_alpha - np.sum(g_alpha * alpha, axis=1, keepdims=True))
        gu = ge[:, :, None] * theta[self.v.sl]
        ga = gu * (1.0 - u * u)
        grad[self.W.sl] += np.einsum("mth,mtk->hk", x, ga).ravel()
        grad[self.b.sl] += ga.sum(axis=(0, 1))
        grad[self.v.sl] += np.einsum("mth,mt->h", u, ge)
        return gx + ga @ w.T


class LastStep:
    """Parameter-free pooling that keeps the final time step."""

    slots: list[Slot] = []

    def forward(self, theta, x, cache=None):
        if cache is not None:
            cache["shape"] = x.shape
        return x[:, -1]

    def backward(self, theta, grad, cache, gy):
        gx = np.zeros(cache["shape"])
        gx[:, -1] = gy
        return gx


class Dropout:
    """Inverted dropout; identity when rate is 0 or outside training."""

    slots: list[Slot] = []

    def __init__(self, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, cache=None, rng=None, train=False):
        if not train or self.rate == 0.0:
            if cache is not None:
                cache["mask"] = None
            return x
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        if cache is not None:
            cache["mask"] = mask
        return x * mask

    def backward(self, cache, gy):
        mask = cache["mask"]
        return gy if mask is None else gy * mask
