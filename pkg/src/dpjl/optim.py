"""Training loops: DP-SGD with JL norm estimates, DP-Adam on the same noisy
gradient, vanilla DP-SGD with per-sample clipping, and non-private baselines.

Every step ``t`` (1-based) draws from three labeled streams of the run seed:
``batch/step-t`` (batch indices), ``jl-proj/step-t`` (projection vectors) and
``noise/step-t`` (Gaussian noise).  Runs that differ only in how norms are
obtained therefore see the same batches and the same noise.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dpjl.autodiff import Model, ParamVector, grad_weighted_loss, per_sample_grads, predict
from dpjl.data import Dataset
from dpjl.jl import clip_weights, estimate_norms, row_norms
from dpjl.rng import RngStream, derive_stream, sample_std_gaussian

__all__ = [
    "OPTIMIZERS",
    "SAMPLING_MODES",
    "ADAM_RULES",
    "TrainConfig",
    "OptimizerState",
    "StepReport",
    "MetricsRow",
    "TrainResult",
    "METRICS_HEADER",
    "sample_batch",
    "step",
    "step_sgd",
    "step_dp_sgd_jl",
    "step_dp_adam_jl",
    "step_dp_sgd_vanilla",
    "apply_adam",
    "train",
    "accuracy",
    "write_metrics_row",
]

OPTIMIZERS = ("sgd", "adam", "dp-sgd", "dp-adam", "dp-sgd-jl", "dp-adam-jl", "dp-adam-jl-paper")
SAMPLING_MODES = ("fixed-size-without-replacement", "poisson")
ADAM_RULES = ("standard", "printed")
METRICS_HEADER = ("epoch", "step", "train_loss", "train_acc", "test_acc", "clip_fraction",
                  "epoch_seconds")
_SAMPLING_ALIASES = {"fixed": "fixed-size-without-replacement"}


def _per_step(value, name: str) -> float | tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        if not value:
            raise ValueError(f"{name} schedule is empty")
        return tuple(float(v) for v in value)
    return float(value)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Exactly one of ``steps`` and ``epochs`` is set; an epoch is
    ``ceil(N / batch_size)`` steps.  ``learning_rate`` and ``clip_norm`` are a
    constant or a per-step list (entry t-1 is used at step t).

    ``noise_scale`` is the noise multiplier sigma; noise has standard
    deviation ``sigma * C_t / batch_size`` per coordinate.  DP optimizers accept
    sigma = 0 for debugging (no noise is drawn), but such runs carry no
    privacy guarantee and the accountant refuses them.

    ``adam_rule`` selects the Adam update: ``standard`` (bias-corrected, scaled
    by the learning rate) or ``printed``, where the moment ratio
    m / (sqrt(u) + eps) multiplies the noisy gradient elementwise and no
    learning rate or bias correction is applied.  ``dp-adam-jl-paper`` is
    ``dp-adam-jl`` with the printed rule.
    """

    optimizer: str
    batch_size: int
    learning_rate: float | tuple[float, ...] = 0.1
    steps: int | None = None
    epochs: int | None = None
    noise_scale: float = 0.0
    clip_norm: float | tuple[float, ...] = 1.0
    jl_dim: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    adam_rule: str = "standard"
    sampling_mode: str = "fixed-size-without-replacement"
    seed: int = 0
    norm_oracle: bool = False
    record_wall_time: bool = True

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        mode = _SAMPLING_ALIASES.get(self.sampling_mode, self.sampling_mode)
        if mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling_mode {self.sampling_mode!r}; choose from {SAMPLING_MODES}")
        object.__setattr__(self, "sampling_mode", mode)
        if self.adam_rule not in ADAM_RULES:
            raise ValueError(f"unknown adam_rule {self.adam_rule!r}; choose from {ADAM_RULES}")
        if self.optimizer == "dp-adam-jl-paper":
            object.__setattr__(self, "adam_rule", "printed")
        if (self.steps is None) == (self.epochs is None):
            raise ValueError("set exactly one of steps and epochs")
        for name in ("steps", "epochs"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 0):
                raise ValueError(f"{name} must be a nonnegative integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        lr = _per_step(self.learning_rate, "learning_rate")
        clip = _per_step(self.clip_norm, "clip_norm")
        object.__setattr__(self, "learning_rate", lr)
        object.__setattr__(self, "clip_norm", clip)
        if not all(c > 0 for c in np.atleast_1d(clip)):
            raise ValueError("clip_norm must be > 0 (inf disables clipping)")
        if not (self.noise_scale >= 0 and math.isfinite(self.noise_scale)):
            raise ValueError("noise_scale must be finite and >= 0")
        if self.is_jl:
            if self.jl_dim is None or int(self.jl_dim) != self.jl_dim or self.jl_dim < 1:
                raise ValueError("JL optimizers need an integer jl_dim >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_epsilon >= 0):
            raise ValueError("adam needs 0 <= beta1, beta2 < 1 and adam_epsilon >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def is_private(self) -> bool:
        return self.optimizer.startswith("dp-")

    @property
    def is_jl(self) -> bool:
        return self.optimizer in ("dp-sgd-jl", "dp-adam-jl", "dp-adam-jl-paper")

    @property
    def is_adam(self) -> bool:
        return "adam" in self.optimizer

    def steps_per_epoch(self, n: int) -> int:
        return max(1, math.ceil(n / self.batch_size))

    def total_steps(self, n: int) -> int:
        return int(self.steps) if self.steps is not None else int(self.epochs) * self.steps_per_epoch(n)

    def _at(self, value, t: int) -> float:
        if isinstance(value, tuple):
            if t > len(value):
                raise ValueError(f"schedule has {len(value)} entries but step {t} was requested")
            return value[t - 1]
        return value

    def lr_at(self, t: int) -> float:
        return self._at(self.learning_rate, t)

    def clip_at(self, t: int) -> float:
        return self._at(self.clip_norm, t)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k in ("learning_rate", "clip_norm"):
            if isinstance(out[k], tuple):
                out[k] = list(out[k])
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class OptimizerState:
    params: ParamVector
    m: np.ndarray
    u: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, params: ParamVector) -> "OptimizerState":
        return cls(params, np.zeros(params.d), np.zeros(params.d), 0)


@dataclasses.dataclass(frozen=True)
class StepReport:
    step: int
    batch_size: int
    mean_loss: float
    clip_fraction: float
    grad_norm: float  # before noise
    noise_norm: float
    seconds: float


@dataclasses.dataclass(frozen=True)
class MetricsRow:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    test_acc: float
    clip_fraction: float
    epoch_seconds: float


@dataclasses.dataclass(frozen=True, eq=False)
class TrainResult:
    initial_params: ParamVector
    params: ParamVector
    state: OptimizerState
    metrics: list[MetricsRow]
    reports: list[StepReport]


def step_streams(seed: int, t: int) -> dict[str, RngStream]:
    return {k: derive_stream(seed, f"{k}/step-{t}") for k in ("batch", "jl-proj", "noise")}


def sample_batch(rng: RngStream, n: int, batch_size: int,
                 mode: str = "fixed-size-without-replacement") -> np.ndarray:
    """Indices of one batch.

    Fixed-size mode is a partial Fisher--Yates shuffle: position i is swapped
    with ``i + randbelow(n - i)`` for i < B, and the first B positions are the
    batch.  Poisson mode keeps index k when ``uniform_k < B / n``.
    """
    mode = _SAMPLING_ALIASES.get(mode, mode)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} must lie in [1, N={n}]")
    if mode == "poisson":
        return np.flatnonzero(rng.uniform(n) < batch_size / n)
    if mode != "fixed-size-without-replacement":
        raise ValueError(f"unknown sampling mode {mode!r}")
    perm = np.arange(n)
    js = np.arange(batch_size) + rng.randbelow_many(n - np.arange(batch_size))
    for i, j in enumerate(js.tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:batch_size].copy()


def _noise(config: TrainConfig, clip: float, d: int, rng: RngStream) -> np.ndarray:
    if config.noise_scale == 0.0:
        return np.zeros(d)
    scale = config.noise_scale * clip / config.batch_size
    if not math.isfinite(scale):
        raise ValueError("noise standard deviation sigma * C / B is not finite; use a finite clip_norm")
    return scale * sample_std_gaussian(rng, d)


def apply_adam(state: OptimizerState, g: np.ndarray, config: TrainConfig, lr: float) -> OptimizerState:
    """Moment updates m, u and the parameter update for one (noisy) gradient g."""
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    u = config.beta2 * state.u + (1.0 - config.beta2) * g * g
    if config.adam_rule == "printed":
        update = m / (np.sqrt(u) + config.adam_epsilon) * g
    else:
        m_hat = m / (1.0 - config.beta1 ** t)
        u_hat = u / (1.0 - config.beta2 ** t)
        update = lr * m_hat / (np.sqrt(u_hat) + config.adam_epsilon)
    return OptimizerState(state.params.with_data(state.params.data - update), m, u, t)


def _apply(state: OptimizerState, g: np.ndarray, config: TrainConfig, lr: float) -> OptimizerState:
    if config.is_adam:
        return apply_adam(state, g, config, lr)
    return OptimizerState(state.params.with_data(state.params.data - lr * g), state.m, state.u,
                          state.t + 1)


def _finish(state, g, noise, config, t, n, losses, clipped, start):
    lr = config.lr_at(t)
    new = _apply(state, g + noise, config, lr)
    report = StepReport(t, n, float(np.mean(losses)) if n else math.nan,
                        float(clipped) / n if n else 0.0, float(np.linalg.norm(g)),
                        float(np.linalg.norm(noise)), time.perf_counter() - start)
    return new, report


def _empty_batch_step(state, config, model, t, streams, start):
    g = np.zeros(model.d)
    noise = _noise(config, config.clip_at(t), model.d, streams["noise"]) if config.is_private else g
    return _finish(state, g, noise, config, t, 0, [], 0, start)


def step_sgd(state: OptimizerState, config: TrainConfig, model: Model, batch,
             streams: dict | None = None):
    """Non-private step on the batch loss sum_i L_i / B (one reverse pass)."""
    t = state.t + 1
    start = time.perf_counter()
    x, y = batch
    if len(x) == 0:
        return _empty_batch_step(state, config, model, t, streams, start)
    w = np.full(len(x), 1.0 / config.batch_size)
    g, losses = grad_weighted_loss(model, state.params, x, y, w, return_losses=True)
    return _finish(state, g, np.zeros(model.d), config, t, len(x), losses, 0, start)


def step_dp_sgd_vanilla(state: OptimizerState, config: TrainConfig, model: Model, batch,
                        streams: dict | None = None):
    """Per-sample gradients (B reverse passes), hard clip to C_t, average, add noise."""
    t = state.t + 1
    streams = streams or step_streams(config.seed, t)
    start = time.perf_counter()
    x, y = batch
    if len(x) == 0:
        return _empty_batch_step(state, config, model, t, streams, start)
    clip = config.clip_at(t)
    G, losses = per_sample_grads(model, state.params, x, y, return_losses=True)
    norms = row_norms(G)
    w = clip_weights(norms, clip, config.batch_size)
    g = w @ G
    noise = _noise(config, clip, model.d, streams["noise"])
    return _finish(state, g, noise, config, t, len(x), losses, np.count_nonzero(norms > clip), start)


def step_dp_sgd_jl(state: OptimizerState, config: TrainConfig, model: Model, batch,
                   streams: dict | None = None):
    """r tangent passes estimate the norms, one reverse pass takes the clipped
    weighted gradient, then noise (sigma C_t / B) N(0, I_d) is added.

    With ``config.norm_oracle`` the estimates are replaced by exact norms and
    the weighted sum is formed from the per-sample gradient matrix, exactly as
    in the vanilla step.
    """
    t = state.t + 1
    streams = streams or step_streams(config.seed, t)
    if config.norm_oracle:
        return step_dp_sgd_vanilla(state, config, model, batch, streams)
    start = time.perf_counter()
    x, y = batch
    if len(x) == 0:
        return _empty_batch_step(state, config, model, t, streams, start)
    clip = config.clip_at(t)
    est = estimate_norms(model, state.params, x, y, int(config.jl_dim), streams["jl-proj"])
    w = clip_weights(est.values, clip, config.batch_size)
    g, losses = grad_weighted_loss(model, state.params, x, y, w, return_losses=True)
    noise = _noise(config, clip, model.d, streams["noise"])
    return _finish(state, g, noise, config, t, len(x), losses,
                   np.count_nonzero(est.values > clip), start)


def step_dp_adam_jl(state: OptimizerState, config: TrainConfig, model: Model, batch,
                    streams: dict | None = None):
    """The DP-SGD-JL noisy gradient followed by an Adam update (see ``adam_rule``)."""
    if not config.is_adam:
        raise ValueError("step_dp_adam_jl needs an adam optimizer config")
    return step_dp_sgd_jl(state, config, model, batch, streams)


def step(state: OptimizerState, config: TrainConfig, model: Model, batch, streams=None):
    """Dispatch one step of ``config.optimizer``."""
    if not config.is_private:
        return step_sgd(state, config, model, batch, streams)
    if config.is_jl:
        return step_dp_sgd_jl(state, config, model, batch, streams)
    return step_dp_sgd_vanilla(state, config, model, batch, streams)


def accuracy(model: Model, params: ParamVector, x, y) -> float:
    """Classification accuracy (NaN for regression heads or empty splits)."""
    if len(x) == 0 or model.loss == "mse":
        return math.nan
    z = predict(model, params, x)
    if model.loss == "softmax_ce":
        pred = np.argmax(z, axis=1)
    else:
        pred = (z.reshape(-1) > 0).astype(np.int64)
    return float(np.mean(pred == np.asarray(y)))


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g")


def write_metrics_row(writer, row: MetricsRow):
    writer.writerow([_fmt(getattr(row, k)) for k in METRICS_HEADER])


def train(config: TrainConfig, model: Model, dataset: Dataset, params: ParamVector | None = None,
          metrics_path=None, callbacks: Sequence[Callable] = ()) -> TrainResult:
    """Run ``config`` on the training split, evaluating after every epoch.

    The initial parameters come from the ``init`` stream of the seed unless
    given.  With ``metrics_path`` each MetricsRow is written as soon as its
    epoch ends, so a failing step leaves the completed epochs on disk.
    Callbacks receive ``(report, state)`` after every step.
    """
    x_train, y_train = dataset.train
    n = dataset.n_train
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds the training set size {n}")
    if params is None:
        params = model.init_params(derive_stream(config.seed, "init"))
    state = OptimizerState.initial(params)
    total = config.total_steps(n)
    spe = config.steps_per_epoch(n)
    metrics: list[MetricsRow] = []
    reports: list[StepReport] = []

    fh = writer = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        fh.flush()
    try:
        epoch_reports: list[StepReport] = []
        epoch_start = time.perf_counter()
        for t in range(1, total + 1):
            streams = step_streams(config.seed, t)
            idx = sample_batch(streams["batch"], n, config.batch_size, config.sampling_mode)
            state, report = step(state, config, model, (x_train[idx], y_train[idx]), streams)
            reports.append(report)
            epoch_reports.append(report)
            for cb in callbacks:
                cb(report, state)
            if t % spe == 0 or t == total:
                seconds = time.perf_counter() - epoch_start if config.record_wall_time else 0.0
                sizes = np.array([r.batch_size for r in epoch_reports])
                losses = np.array([r.mean_loss for r in epoch_reports])
                clipped = np.array([r.clip_fraction for r in epoch_reports])
                seen = sizes.sum()
                row = MetricsRow(
                    epoch=math.ceil(t / spe), step=t,
                    train_loss=float(np.dot(np.nan_to_num(losses), sizes) / seen) if seen else math.nan,
                    train_acc=accuracy(model, state.params, x_train, y_train),
                    test_acc=accuracy(model, state.params, *dataset.test),
                    clip_fraction=float(np.dot(clipped, sizes) / seen) if seen else 0.0,
                    epoch_seconds=seconds)
                metrics.append(row)
                if writer is not None:
                    write_metrics_row(writer, row)
                    fh.flush()
                epoch_reports = []
                epoch_start = time.perf_counter()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, state.params, state, metrics, reports)
