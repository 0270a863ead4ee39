"""Models, flat parameter vectors and the batch-level differentiation entry points.

Loss heads map per-sample outputs ``z`` to per-sample losses:

* ``softmax_ce``:  logsumexp(z) - z_y;        dL/dz = softmax(z) - onehot(y);
                   tangent sum_k softmax_k dz_k - dz_y
* ``sigmoid_bce``: softplus(z) - y z;         dL/dz = sigmoid(z) - y
* ``mse``:         mean_k (z_k - y_k)^2;      dL/dz = 2 (z - y) / K
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from dpjl.autodiff.layers import Embedding, Layer, _sigmoid, layer_from_config

__all__ = [
    "LOSSES",
    "Segment",
    "ParamVector",
    "PassCounters",
    "Model",
    "forward_losses",
    "grad_weighted_loss",
    "jvp_losses",
    "per_sample_grads",
    "predict",
]

LOSSES = ("softmax_ce", "sigmoid_bce", "mse")


class Segment(NamedTuple):
    layer: int
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclasses.dataclass(frozen=True, eq=False)
class ParamVector:
    """All trainable parameters as one flat float64 vector plus a segment table."""

    data: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 1 or data.size != sum(s.length for s in self.segments):
            raise ValueError("parameter vector length does not match the segment table")

    @property
    def d(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(data, dtype=np.float64), self.segments)

    def copy(self) -> "ParamVector":
        return self.with_data(self.data)

    def unflatten(self, vec: np.ndarray | None = None, n_layers: int | None = None
                  ) -> list[list[np.ndarray]]:
        """Per-layer lists of array views into ``vec`` (default: the parameters)."""
        vec = self.data if vec is None else vec
        if n_layers is None:
            n_layers = 1 + max((s.layer for s in self.segments), default=-1)
        out: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
        for s in self.segments:
            out[s.layer].append(vec[s.offset:s.offset + s.length].reshape(s.shape))
        return out

    def flatten_like(self, per_layer: list[list[np.ndarray]]) -> np.ndarray:
        """Inverse of :meth:`unflatten` for gradients laid out the same way."""
        parts = [np.ravel(a) for arrays in per_layer for a in (arrays or [])]
        out = np.concatenate(parts) if parts else np.empty(0)
        if out.size != self.d:
            raise ValueError("gradient layout does not match the segment table")
        return out


@dataclasses.dataclass
class PassCounters:
    """Batch-level pass counts and peak gradient storage (in float64 values)."""

    forward: int = 0
    reverse: int = 0
    tangent: int = 0
    peak_grad_floats: int = 0

    def reset(self):
        self.forward = self.reverse = self.tangent = self.peak_grad_floats = 0

    def note_storage(self, n_floats: int):
        self.peak_grad_floats = max(self.peak_grad_floats, int(n_floats))


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    # scipy.special.logsumexp costs more than a small model's whole pass
    zmax = z.max(axis=1, keepdims=True)
    return (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]


class Model:
    """A stack of layers followed by a loss head.

    ``input_shape`` is the per-sample input shape; integer-token models (an
    :class:`Embedding` first) take ``(length,)``.
    """

    def __init__(self, layers: list[Layer], loss: str, input_shape: tuple[int, ...],
                 loss_scale: float = 1.0):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")
        self.layers = list(layers)
        self.loss = loss
        self.loss_scale = float(loss_scale)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        segments, offset = [], 0
        for i, layer in enumerate(self.layers):
            shape = layer.output_shape(shape)
            for name, pshape in layer.param_shapes():
                n = int(np.prod(pshape))
                segments.append(Segment(i, name, offset, n, tuple(pshape)))
                offset += n
        if offset == 0:
            raise ValueError("model has no trainable parameters")
        self.output_shape = shape
        self.segments = tuple(segments)
        self._d = offset
        self.counters = PassCounters()

    @property
    def d(self) -> int:
        return self._d

    def init_params(self, rng) -> ParamVector:
        arrays = []
        for layer in self.layers:
            arrays.extend(np.ravel(a) for a in layer.init_params(rng))
        data = np.concatenate(arrays) if arrays else np.empty(0)
        return ParamVector(data, self.segments)

    def zeros(self) -> ParamVector:
        return ParamVector(np.zeros(self.d), self.segments)

    def config(self) -> dict:
        return {"layers": [layer.config() for layer in self.layers], "loss": self.loss,
                "input_shape": list(self.input_shape), "loss_scale": self.loss_scale}

    @classmethod
    def from_config(cls, cfg: dict) -> "Model":
        return cls([layer_from_config(c) for c in cfg["layers"]], cfg["loss"],
                   tuple(cfg["input_shape"]), cfg.get("loss_scale", 1.0))

    # -- internals ---------------------------------------------------------

    def _check(self, params: ParamVector, x, y):
        if params.segments != self.segments:
            raise ValueError("parameter vector does not belong to this model")
        x = np.asarray(x)
        if x.ndim == 0 or x.shape[0] == 0:
            raise ValueError("batch must be nonempty")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected per-sample input shape {self.input_shape}, got {x.shape[1:]}")
        y = np.asarray(y)
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"batch has {x.shape[0]} inputs but {y.shape[0]} labels")
        if self.loss == "softmax_ce":
            k = self.output_shape[-1]
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(y == np.round(y)):
                    raise ValueError("class labels must be integers")
                y = y.astype(np.int64)
            if y.ndim != 1 or y.min() < 0 or y.max() >= k:
                raise ValueError(f"label index out of range [0, {k})")
        elif self.loss == "sigmoid_bce":
            y = y.astype(np.float64).reshape(x.shape[0])
            if np.any((y != 0) & (y != 1)):
                raise ValueError("binary labels must be 0 or 1")
        else:
            y = y.astype(np.float64).reshape((x.shape[0],) + self.output_shape)
        if np.issubdtype(x.dtype, np.integer) and not isinstance(self.layers[0], Embedding):
            x = x.astype(np.float64)
        return x, y

    def _head(self, z, y):
        """Per-sample losses and dL/dz, both multiplied by ``loss_scale``."""
        loss, g = self._raw_head(z, y)
        if self.loss_scale != 1.0:
            loss, g = self.loss_scale * loss, self.loss_scale * g
        return loss, g

    def _raw_head(self, z, y):
        B = z.shape[0]
        if self.loss == "softmax_ce":
            lse = _logsumexp_rows(z)
            loss = lse - z[np.arange(B), y]
            g = np.exp(z - lse[:, None])
            g[np.arange(B), y] -= 1.0
            return loss, g
        if self.loss == "sigmoid_bce":
            zz = z.reshape(B)
            loss = np.logaddexp(0.0, zz) - y * zz
            return loss, (_sigmoid(zz) - y).reshape(z.shape)
        diff = (z - y).reshape(B, -1)
        k = diff.shape[1]
        return (diff ** 2).mean(axis=1), (2.0 * diff / k).reshape(z.shape)

    def _head_tangent(self, z, dz, y):
        _, g = self._head(z, y)
        return (g * dz).reshape(z.shape[0], -1).sum(axis=1)

    def _forward(self, params: ParamVector, x):
        per_layer = params.unflatten(n_layers=len(self.layers))
        caches = []
        h = x
        for layer, p in zip(self.layers, per_layer):
            h, cache = layer.forward(p, h)
            caches.append(cache)
        return h, caches, per_layer

    def _backward(self, per_layer, caches, dz, params: ParamVector) -> np.ndarray:
        grads = [None] * len(self.layers)
        dh = dz
        for i in range(len(self.layers) - 1, -1, -1):
            dh, grads[i] = self.layers[i].backward(per_layer[i], caches[i], dh)
        return params.flatten_like(grads)


def forward_losses(model: Model, params: ParamVector, x, y) -> np.ndarray:
    """Per-sample losses F(theta) = (L(theta; x_1), ..., L(theta; x_B))."""
    x, y = model._check(params, x, y)
    z, _, _ = model._forward(params, x)
    model.counters.forward += 1
    return model._head(z, y)[0]


def grad_weighted_loss(model: Model, params: ParamVector, x, y, weights,
                       return_losses: bool = False):
    """Reverse-mode gradient of sum_i w_i L(theta; x_i); weights are constants.

    With ``return_losses`` the per-sample losses of the same pass are returned too.
    """
    x, y = model._check(params, x, y)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[0],) or not np.isfinite(w).all():
        raise ValueError("weights must be a finite vector with one entry per sample")
    z, caches, per_layer = model._forward(params, x)
    losses, g = model._head(z, y)
    dz = g * w.reshape((-1,) + (1,) * (g.ndim - 1))
    model.counters.reverse += 1
    model.counters.note_storage(model.d)
    grad = model._backward(per_layer, caches, dz, params)
    return (grad, losses) if return_losses else grad


def jvp_losses(model: Model, params: ParamVector, x, y, tangent) -> np.ndarray:
    """P_i = <grad L(theta; x_i), v> for all i, in one tangent-propagating forward pass."""
    x, y = model._check(params, x, y)
    v = np.asarray(tangent, dtype=np.float64)
    if v.shape != (model.d,):
        raise ValueError(f"tangent must have length d={model.d}, got shape {v.shape}")
    per_layer = params.unflatten(n_layers=len(model.layers))
    per_layer_dot = params.unflatten(v, n_layers=len(model.layers))
    h, dh = x, None
    for layer, p, dp in zip(model.layers, per_layer, per_layer_dot):
        h, dh = layer.tangent(p, dp, h, dh)
    model.counters.tangent += 1
    return model._head_tangent(h, dh, y)


def per_sample_grads(model: Model, params: ParamVector, x, y, return_losses: bool = False):
    """B x d matrix of per-sample gradients, one reverse pass per sample."""
    x, y = model._check(params, x, y)
    B = x.shape[0]
    out = np.empty((B, model.d))
    losses = np.empty(B)
    model.counters.note_storage(B * model.d)
    for i in range(B):
        z, caches, per_layer = model._forward(params, x[i:i + 1])
        loss, g = model._head(z, y[i:i + 1])
        losses[i] = loss[0]
        out[i] = model._backward(per_layer, caches, g, params)
        model.counters.reverse += 1
    return (out, losses) if return_losses else out


def predict(model: Model, params: ParamVector, x, chunk: int = 1024) -> np.ndarray:
    """Model outputs for evaluation, in chunks; not counted as training passes."""
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer) and not isinstance(model.layers[0], Embedding):
        x = x.astype(np.float64)
    outs = [model._forward(params, x[i:i + chunk])[0] for i in range(0, x.shape[0], chunk)]
    return np.concatenate(outs) if outs else np.empty((0,) + model.output_shape)
