"""Per-sample gradient norms: JL sketches via forward mode, exact norms via
per-sample reverse passes, and the clip weights built from either."""

from __future__ import annotations

import dataclasses

import numpy as np

from dpjl.autodiff import Model, ParamVector, jvp_losses, per_sample_grads
from dpjl.rng import RngStream, sample_std_gaussian

__all__ = ["NormEstimates", "ZERO_NORM", "estimate_norms", "exact_norms", "clip_weights",
           "clip_rows", "row_norms"]

ZERO_NORM = 1e-12  # estimates at or below this get the unclipped weight 1/B


@dataclasses.dataclass(frozen=True, eq=False)
class NormEstimates:
    values: np.ndarray
    jl_dim: int
    projection_seed: tuple[int, str]


def estimate_norms(model: Model, params: ParamVector, x, y, r: int, rng: RngStream) -> NormEstimates:
    """M_i = sqrt(mean_j P_ij^2) with P_ij = <grad L(theta; x_i), v_j>, v_j ~ N(0, I_d).

    Runs exactly r tangent passes and no reverse pass.  Each v_j is drawn
    from ``rng`` in order, so only one projection vector is held at a time.
    """
    if int(r) != r or r < 1:
        raise ValueError("jl dimension r must be a positive integer")
    B = np.asarray(x).shape[0]
    sq = np.zeros(B)
    for _ in range(int(r)):
        v = sample_std_gaussian(rng, model.d)
        model.counters.note_storage(model.d)
        sq += jvp_losses(model, params, x, y, v) ** 2
    return NormEstimates(np.sqrt(sq / r), int(r), (rng.seed, rng.stream_label))


def exact_norms(model: Model, params: ParamVector, x, y, grads: np.ndarray | None = None) -> np.ndarray:
    """l2 norm of every per-sample gradient (computed unless ``grads`` is given)."""
    if grads is None:
        grads = per_sample_grads(model, params, x, y)
    return row_norms(grads)


def row_norms(grads: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", grads, grads))


def clip_weights(norms, clip: float, batch_size: float) -> np.ndarray:
    """w_i = min(1, C / M_i) / B, with w_i = 1 / B when M_i <= 1e-12."""
    if not clip > 0:
        raise ValueError("clipping norm must be > 0")
    if not batch_size > 0:
        raise ValueError("batch size must be > 0")
    m = np.asarray(norms, dtype=np.float64)
    if np.any(m < 0) or np.isnan(m).any():
        raise ValueError("norms must be nonnegative")
    with np.errstate(divide="ignore"):
        factor = np.where(m <= ZERO_NORM, 1.0, np.minimum(1.0, clip / m))
    return factor / batch_size


def clip_rows(grads: np.ndarray, clip: float) -> np.ndarray:
    """Each row scaled to l2 norm at most ``clip`` (hard per-sample clipping)."""
    return grads * clip_weights(row_norms(grads), clip, 1.0)[:, None]
