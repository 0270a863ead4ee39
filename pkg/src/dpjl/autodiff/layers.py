"""Layers with paired reverse-mode and tangent (forward-mode) rules.

Every layer maps a batch ``x`` of shape ``(B, *in_shape)`` to ``(B, *out_shape)``
and implements:

* ``forward(params, x) -> (y, cache)``
* ``backward(params, cache, dy) -> (dx, dparams)``: vector-Jacobian product.
* ``tangent(params, dparams, x, dx) -> (y, dy)``: primal output together with
  its directional derivative along the parameter tangent ``dparams`` and
  input tangent ``dx``.

Tangent rules (primal on the left, tangent on the right):

* Dense:      y = x W + b                 dy = dx W + x dW + db
* Embedding:  y = E[ids]                  dy = dE[ids]
* SimpleRNN:  h_t = tanh(a_t),  a_t = x_t Wx + h_{t-1} Wh + b,  output h_L
              dh_t = (1 - h_t^2) * (dx_t Wx + x_t dWx + dh_{t-1} Wh + h_{t-1} dWh + db)
* relu:       dy = dx * [x > 0]
* tanh:       dy = dx * (1 - y^2)
* sigmoid:    dy = dx * y (1 - y)
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

__all__ = ["Layer", "Dense", "Embedding", "SimpleRNN", "Activation", "layer_from_config"]


class Layer:
    kind = "layer"

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def init_params(self, rng) -> list[np.ndarray]:
        return []

    def config(self) -> dict:
        return {"type": self.kind, **dataclasses.asdict(self)}


def _glorot(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    return (2.0 * rng.uniform(n) - 1.0).reshape(shape) * limit


@dataclasses.dataclass
class Dense(Layer):
    in_features: int
    out_features: int
    bias: bool = True
    kind = "dense"

    def param_shapes(self):
        shapes = [("W", (self.in_features, self.out_features))]
        if self.bias:
            shapes.append(("b", (self.out_features,)))
        return shapes

    def output_shape(self, in_shape):
        if in_shape[-1:] != (self.in_features,):
            raise ValueError(f"dense layer expects trailing dimension {self.in_features}, got {in_shape}")
        return in_shape[:-1] + (self.out_features,)

    def init_params(self, rng):
        W = _glorot(rng, self.in_features, self.out_features, (self.in_features, self.out_features))
        return [W, np.zeros(self.out_features)] if self.bias else [W]

    def forward(self, params, x):
        y = x @ params[0]
        if self.bias:
            y = y + params[1]
        return y, x

    def backward(self, params, cache, dy):
        x = cache
        xf = x.reshape(-1, self.in_features)
        dyf = dy.reshape(-1, self.out_features)
        grads = [xf.T @ dyf]
        if self.bias:
            grads.append(dyf.sum(axis=0))
        return dy @ params[0].T, grads

    def tangent(self, params, dparams, x, dx):
        y = x @ params[0]
        dy = x @ dparams[0]
        if dx is not None:
            dy = dy + dx @ params[0]
        if self.bias:
            y = y + params[1]
            dy = dy + dparams[1]
        return y, dy


@dataclasses.dataclass
class Embedding(Layer):
    vocab_size: int
    dim: int
    kind = "embedding"

    def param_shapes(self):
        return [("E", (self.vocab_size, self.dim))]

    def output_shape(self, in_shape):
        return tuple(in_shape) + (self.dim,)

    def init_params(self, rng):
        n = self.vocab_size * self.dim
        return [(2.0 * rng.uniform(n) - 1.0).reshape(self.vocab_size, self.dim) * 0.1]

    def _ids(self, x):
        ids = np.asarray(x)
        if not np.issubdtype(ids.dtype, np.integer):
            if not np.all(ids == np.round(ids)):
                raise ValueError("embedding inputs must be integer token ids")
            ids = ids.astype(np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        return ids

    def forward(self, params, x):
        ids = self._ids(x)
        return params[0][ids], ids

    def backward(self, params, cache, dy):
        dE = np.zeros_like(params[0])
        np.add.at(dE, cache.reshape(-1), dy.reshape(-1, self.dim))
        return None, [dE]

    def tangent(self, params, dparams, x, dx):
        ids = self._ids(x)
        return params[0][ids], dparams[0][ids]


@dataclasses.dataclass
class SimpleRNN(Layer):
    in_features: int
    hidden: int
    kind = "simple_rnn"

    def param_shapes(self):
        return [("Wx", (self.in_features, self.hidden)), ("Wh", (self.hidden, self.hidden)),
                ("b", (self.hidden,))]

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_features:
            raise ValueError(f"simple_rnn expects (length, {self.in_features}) inputs, got {in_shape}")
        return (self.hidden,)

    def init_params(self, rng):
        Wx = _glorot(rng, self.in_features, self.hidden, (self.in_features, self.hidden))
        Wh = _glorot(rng, self.hidden, self.hidden, (self.hidden, self.hidden))
        return [Wx, Wh, np.zeros(self.hidden)]

    def forward(self, params, x):
        Wx, Wh, b = params
        B, L, _ = x.shape
        hs = np.zeros((L + 1, B, self.hidden))
        for t in range(L):
            hs[t + 1] = np.tanh(x[:, t, :] @ Wx + hs[t] @ Wh + b)
        return hs[L], (x, hs)

    def backward(self, params, cache, dy):
        Wx, Wh, _ = params
        x, hs = cache
        L = x.shape[1]
        dWx, dWh, db = np.zeros_like(Wx), np.zeros_like(Wh), np.zeros(self.hidden)
        dx = np.zeros_like(x)
        dh = dy
        for t in range(L - 1, -1, -1):
            da = dh * (1.0 - hs[t + 1] ** 2)
            dWx += x[:, t, :].T @ da
            dWh += hs[t].T @ da
            db += da.sum(axis=0)
            dx[:, t, :] = da @ Wx.T
            dh = da @ Wh.T
        return dx, [dWx, dWh, db]

    def tangent(self, params, dparams, x, dx):
        Wx, Wh, b = params
        dWx, dWh, db = dparams
        B, L, _ = x.shape
        h = np.zeros((B, self.hidden))
        dh = np.zeros((B, self.hidden))
        for t in range(L):
            xt = x[:, t, :]
            da = xt @ dWx + dh @ Wh + h @ dWh + db
            if dx is not None:
                da = da + dx[:, t, :] @ Wx
            h_new = np.tanh(xt @ Wx + h @ Wh + b)
            dh = (1.0 - h_new ** 2) * da
            h = h_new
        return h, dh


_ACTIVATIONS = ("relu", "tanh", "sigmoid")


def _sigmoid(x):
    # exp of a nonpositive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclasses.dataclass
class Activation(Layer):
    fn: str
    kind = "activation"

    def __post_init__(self):
        if self.fn not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.fn!r}; choose from {_ACTIVATIONS}")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def _apply(self, x):
        if self.fn == "relu":
            return np.maximum(x, 0.0)
        if self.fn == "tanh":
            return np.tanh(x)
        return _sigmoid(x)

    def _deriv(self, x, y):
        if self.fn == "relu":
            return (x > 0).astype(np.float64)
        if self.fn == "tanh":
            return 1.0 - y * y
        return y * (1.0 - y)

    def forward(self, params, x):
        y = self._apply(x)
        return y, (x, y)

    def backward(self, params, cache, dy):
        x, y = cache
        return dy * self._deriv(x, y), []

    def tangent(self, params, dparams, x, dx):
        y = self._apply(x)
        return y, (None if dx is None else dx * self._deriv(x, y))


_LAYERS = {cls.kind: cls for cls in (Dense, Embedding, SimpleRNN, Activation)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("type", None)
    if kind not in _LAYERS:
        raise ValueError(f"unknown layer type {kind!r}; choose from {sorted(_LAYERS)}")
    return _LAYERS[kind](**cfg)
