"""The training loop: match the model's jump law to reweighted base targets.

Each step draws endpoint pairs from a frozen copy of the model, re-masks them
to a random level, picks a successor ``y`` per input, estimates the adjoint
with the importance-weighted estimator, and takes one optimizer step on the
weighted generalized-KL matching loss

    (1 / Q_frozen(y|x)) * D_gKL( Q_model(y|x), Q_base(y|x) * adjoint(y, x) ).

Jump rates never appear: base and model share the unmasking schedule, so the
common rate factor divides out of the argmin and the objective can be written
at the jump-probability level.  Targets come entirely from the frozen copy
(the gradient side never sees them as functions of the parameters), which is
the stop-gradient contract.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .ctmc import TargetDist, marginal_kl, push_forward_marginals
from .errors import (
    InvalidTargetError,
    NoMaskedPositionError,
    NonFiniteGradientError,
)
from .model import (
    LogitsModel,
    _categorical_rows,
    reciprocal_project_batch,
    rollout_indices,
)
from .oracle import TiltedDistribution, _validate_terminal_loss
from .spaces import MASK, ProductSpace

__all__ = [
    "AdamState",
    "MetricRecord",
    "ReplayBuffer",
    "StepTargets",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "dam_loss_and_grad",
    "gkl_divergence",
    "gkl_divergence_grad_u",
    "metrics_csv_header",
    "metrics_to_csv",
    "sample_step_targets",
    "train",
]


# ----------------------------------------------------------------------
# generalized KL
# ----------------------------------------------------------------------
def _positive_pair(u, w):
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    if u.shape != w.shape:
        raise InvalidTargetError(f"shape mismatch: {u.shape} vs {w.shape}")
    if np.any(u < 0) or np.any(w < 0):
        raise InvalidTargetError("divergence arguments must be nonnegative")
    return u, w


def gkl_divergence(u, w) -> float:
    """Generalized KL ``sum(u - w + w log(w/u))``; infinite if u=0 where w>0."""
    u, w = _positive_pair(u, w)
    support = w > 0
    if np.any(u[support] == 0):
        return math.inf
    terms = u - w
    terms[support] += w[support] * np.log(w[support] / u[support])
    return float(terms.sum())


def gkl_divergence_grad_u(u, w) -> np.ndarray:
    """Elementwise ``d/du`` of the divergence: ``1 - w/u``."""
    u, w = _positive_pair(u, w)
    if np.any(u == 0):
        raise InvalidTargetError("gradient undefined at u = 0")
    return 1.0 - w / u


# ----------------------------------------------------------------------
# loss and analytic gradient
# ----------------------------------------------------------------------
def _successor_move(space: ProductSpace, x_tokens: np.ndarray, y_tokens: np.ndarray):
    """The (position, token) by which y extends x; errors if y isn't one step."""
    changed = np.flatnonzero(x_tokens != y_tokens)
    if (
        len(changed) != 1
        or x_tokens[changed[0]] != MASK
        or y_tokens[changed[0]] == MASK
    ):
        raise InvalidTargetError(
            f"{y_tokens.tolist()} is not an unmask successor of {x_tokens.tolist()}"
        )
    p = int(changed[0])
    return p, int(y_tokens[p])


def dam_loss_and_grad(
    model: LogitsModel,
    x: np.ndarray,
    y: np.ndarray | None = None,
    target_w=None,
    weight: float = 1.0,
    mode: str = "sampled",
) -> tuple[float, np.ndarray]:
    """Matching loss at state ``x`` and its gradient w.r.t. ``logits[x]``.

    ``mode="sampled"``: ``y`` is the drawn successor, ``target_w`` the scalar
    target for it, ``weight`` the debiasing factor ``1/Q_frozen(y|x)``.  The
    loss is ``weight * D_gKL(Q_model(y|x), target_w)`` and the gradient flows
    through the softmax at ``y``'s position only.

    ``mode="full"``: ``target_w`` is a full (length, vocab) target table; the
    loss sums the divergence over every successor with unit weight.

    Targets are constants: the returned gradient is exact for the model side
    with the target side held fixed.
    """
    space = model.space
    x_tokens = space.validate_state(x)
    if np.count_nonzero(x_tokens) == space.length:
        raise NoMaskedPositionError(f"state {x_tokens.tolist()} has no successors")
    x_index = space.encode(x_tokens)
    masked = x_tokens == MASK
    m_x = int(masked.sum())
    sm = model.token_softmax(np.array([x_index]))[0]  # (N, M), rows sum to 1
    grad = np.zeros_like(sm)

    if mode == "sampled":
        if y is None:
            raise InvalidTargetError("sampled mode requires y")
        target_w = float(target_w)
        if not (target_w > 0 and np.isfinite(target_w)):
            raise InvalidTargetError(f"target must be positive finite, got {target_w}")
        p, v = _successor_move(space, x_tokens, space.validate_state(y))
        s_row = sm[p]
        u_y = s_row[v - 1] / m_x
        loss = weight * (u_y - target_w + target_w * np.log(target_w / u_y))
        coeff = weight * (u_y - target_w)
        grad[p] = -coeff * s_row
        grad[p, v - 1] += coeff
        return float(loss), grad

    if mode == "full":
        table = np.asarray(target_w, dtype=np.float64)
        if table.shape != (space.length, space.vocab_size):
            raise InvalidTargetError(
                f"full-sum target shape {table.shape} != "
                f"({space.length}, {space.vocab_size})"
            )
        if np.any(table[masked] <= 0) or not np.all(np.isfinite(table[masked])):
            raise InvalidTargetError("full-sum targets must be positive finite")
        u = sm / m_x  # model jump probabilities
        loss = 0.0
        for p in np.flatnonzero(masked):
            loss += gkl_divergence(u[p], table[p])
            diff = u[p] - table[p]
            grad[p] = diff - sm[p] * diff.sum()
        return float(loss), grad

    raise InvalidTargetError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------
@dataclass
class TrainConfig:
    """Knobs of the training loop; defaults follow the synthetic benchmarks."""

    k: int = 16
    batch_size: int = 128
    inner_steps: int = 1
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    seed: int = 0
    on_policy: bool = True
    gkl_mode: str = "sampled"  # or "full"
    y_mode: str = "shared"  # successor taken from the first continuation; or "fresh"
    buffer_capacity: int = 4096
    metric_interval: int = 50
    grad_clip: float = 0.0  # 0 disables clipping
    wall_clock_in_csv: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise InvalidTargetError(f"k must be >= 1, got {self.k}")
        if not self.lr > 0:
            raise InvalidTargetError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.steps < 1 or self.inner_steps < 1:
            raise InvalidTargetError("batch_size, steps, inner_steps must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidTargetError("beta1, beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise InvalidTargetError(f"eps must be > 0, got {self.eps}")
        if self.gkl_mode not in ("sampled", "full"):
            raise InvalidTargetError(f"unknown gkl_mode {self.gkl_mode!r}")
        if self.y_mode not in ("shared", "fresh"):
            raise InvalidTargetError(f"unknown y_mode {self.y_mode!r}")
        if self.buffer_capacity < 1:
            raise InvalidTargetError("buffer_capacity must be >= 1")
        if self.metric_interval < 1:
            raise InvalidTargetError("metric_interval must be >= 1")
        if self.grad_clip < 0:
            raise InvalidTargetError("grad_clip must be >= 0")


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    config: TrainConfig,
) -> np.ndarray:
    """One Adam update; returns new params and advances ``state`` in place.

    Coordinates whose gradient is exactly zero are left untouched (their
    moments still decay).  With sampled losses most coordinates receive no
    signal on a given step; freezing them avoids drift from stale momentum.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise InvalidTargetError(
            f"gradient shape {grads.shape} != parameter shape {params.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("gradient contains non-finite entries")
    state.t += 1
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads**2
    m_hat = state.m / (1.0 - config.beta1**state.t)
    v_hat = state.v / (1.0 - config.beta2**state.t)
    delta = config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return np.where(grads == 0.0, params, params - delta)


# ----------------------------------------------------------------------
# replay buffer
# ----------------------------------------------------------------------
class ReplayBuffer:
    """Ring of (start, endpoint) index pairs with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidTargetError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._x0 = np.zeros(capacity, dtype=np.int64)
        self._x1 = np.zeros(capacity, dtype=np.int64)
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def push_batch(self, x0: np.ndarray, x1: np.ndarray) -> None:
        for a, b in zip(np.asarray(x0), np.asarray(x1)):
            self._x0[self._next] = a
            self._x1[self._next] = b
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self._size == 0:
            raise InvalidTargetError("cannot sample from an empty buffer")
        rows = rng.integers(0, self._size, size=n)
        return self._x0[rows].copy(), self._x1[rows].copy()


# ----------------------------------------------------------------------
# step targets
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class StepTargets:
    """Adjoint targets for one batch of inputs, all drawn from a frozen model.

    ``ok`` marks rows whose estimate is usable; degenerate rows (numerator or
    denominator underflow) are skipped and counted by the caller.
    ``target`` is the full regression target ``Q_base(y|x) * adjoint``.
    """

    x_index: np.ndarray  # (B,)
    y_index: np.ndarray  # (B,)
    position: np.ndarray  # (B,)
    token: np.ndarray  # (B,)
    weight: np.ndarray  # (B,) debiasing factor 1/Q_frozen(y|x)
    adjoint: np.ndarray  # (B,) importance-weighted adjoint estimate
    target: np.ndarray  # (B,)
    ess: np.ndarray  # (B,)
    ok: np.ndarray  # (B,) bool


def _log_ratio_tables(rec: dict[str, np.ndarray], b: int, k: int):
    t = rec["positions"].shape[1]
    lq_m = rec["log_q_model"].reshape(b, k, t)
    lq_b = rec["log_q_base"].reshape(b, k, t)
    finals = rec["finals"].reshape(b, k)
    return lq_m, lq_b, finals


def sample_step_targets(
    frozen: LogitsModel,
    base: TargetDist,
    g: np.ndarray,
    x_indices: np.ndarray,
    k: int,
    rng: np.random.Generator,
    y_mode: str = "shared",
) -> StepTargets:
    """Draw successors and adjoint targets for a batch of non-terminal inputs.

    ``shared`` mode follows the single-rollout-set reading: the successor is
    the first jump of the first of the K continuations from ``x``, and the
    numerator path is that continuation's tail.  ``fresh`` mode draws the
    successor separately and rolls its own numerator continuation, leaving
    the K denominator continuations independent of it.
    """
    space = frozen.space
    x_idx = np.asarray(x_indices, dtype=np.int64)
    if np.any(space.levels_of_indices(x_idx) >= space.length):
        raise NoMaskedPositionError("step targets need non-terminal inputs")
    b = len(x_idx)
    powers = space._powers
    g = np.asarray(g, dtype=np.float64)

    if y_mode == "shared":
        rec = rollout_indices(frozen, base, np.repeat(x_idx, k), rng)
        lq_m, lq_b, finals = _log_ratio_tables(rec, b, k)
        pos = rec["positions"].reshape(b, k, -1)[:, 0, 0]
        tok = rec["tokens"].reshape(b, k, -1)[:, 0, 0]
        y_idx = x_idx + tok * powers[pos]
        log_q_y = lq_m[:, 0, 0]
        log_num = (lq_b[:, 0, 1:] - lq_m[:, 0, 1:]).sum(axis=1) - g[finals[:, 0]]
    elif y_mode == "fresh":
        probs = frozen.probs_batch(x_idx)
        flat = _categorical_rows(rng, probs.reshape(b, -1))
        pos, tok0 = np.divmod(flat, space.vocab_size)
        tok = tok0 + 1
        y_idx = x_idx + tok * powers[pos]
        rows = np.arange(b)
        with np.errstate(divide="ignore"):
            log_q_y = np.log(probs[rows, pos, tok - 1])
        z_rec = rollout_indices(frozen, base, y_idx, rng)
        z_lq_m, z_lq_b, z_finals = _log_ratio_tables(z_rec, b, 1)
        log_num = (z_lq_b[:, 0, :] - z_lq_m[:, 0, :]).sum(axis=1) - g[
            z_finals[:, 0]
        ]
        rec = rollout_indices(frozen, base, np.repeat(x_idx, k), rng)
        lq_m, lq_b, finals = _log_ratio_tables(rec, b, k)
    else:
        raise InvalidTargetError(f"unknown y_mode {y_mode!r}")

    den_terms = (lq_b - lq_m).sum(axis=2) - g[finals]  # (B, K)
    log_den = logsumexp(den_terms, axis=1) - np.log(k)
    with np.errstate(invalid="ignore"):
        shifted = np.exp(den_terms - den_terms.max(axis=1, keepdims=True))
        ess = shifted.sum(axis=1) ** 2 / (shifted**2).sum(axis=1)

    rows = np.arange(b)
    base_probs = base.probs_batch(x_idx)[rows, pos, tok - 1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_adj = log_num - log_den
        adjoint = np.exp(log_adj)
        target = base_probs * adjoint
        weight = np.exp(-log_q_y)
    ok = (
        np.isfinite(log_den)
        & np.isfinite(adjoint)
        & np.isfinite(weight)
        & (target > 0)
    )
    return StepTargets(
        x_index=x_idx,
        y_index=y_idx,
        position=pos,
        token=tok,
        weight=weight,
        adjoint=adjoint,
        target=target,
        ess=ess,
        ok=ok,
    )


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class MetricRecord:
    """One row of the training metric stream."""

    step: int
    loss: float
    kl_levels: tuple[float, ...]  # KL(p_star_n || p_model_n) for n = 1..N
    grad_norm: float
    adjoint_mean: float
    ess: float
    seconds: float

    def csv_row(self, wall_clock: bool = False) -> str:
        seconds = self.seconds if wall_clock else 0.0
        cells = (
            [str(self.step), repr(self.loss)]
            + [repr(kl) for kl in self.kl_levels]
            + [
                repr(self.grad_norm),
                repr(self.adjoint_mean),
                repr(self.ess),
                repr(seconds),
            ]
        )
        return ", ".join(cells)


def metrics_csv_header(length: int) -> str:
    kl_cols = [f"kl_level_{n}" for n in range(1, length + 1)]
    return ", ".join(
        ["step", "loss"] + kl_cols + ["grad_norm", "adjoint_mean", "ess", "seconds"]
    )


def metrics_to_csv(
    records: list[MetricRecord], length: int, wall_clock: bool = False
) -> str:
    for r in records:
        if len(r.kl_levels) != length:
            raise InvalidTargetError(
                f"record at step {r.step} has {len(r.kl_levels)} KL columns, "
                f"header expects {length}"
            )
    lines = [metrics_csv_header(length)]
    lines += [r.csv_row(wall_clock) for r in records]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# the loop
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    records: list[MetricRecord]
    model: LogitsModel
    skipped: int  # degenerate adjoint samples dropped across the run


def _trainable_rows(space: ProductSpace) -> np.ndarray:
    return np.concatenate(
        [space.level_states(n) for n in range(space.length)]
    )


def train(
    config: TrainConfig,
    base: TargetDist,
    g: np.ndarray,
    oracle: TiltedDistribution | None = None,
    model: LogitsModel | None = None,
    on_metric=None,
) -> TrainResult:
    """Run the matching loop; returns the metric stream and the final model.

    ``oracle`` enables exact per-level KL metrics.  ``model`` overrides the
    all-zeros (uniform) initialization.  ``on_metric`` is called with each
    MetricRecord as it is emitted.  A non-finite loss aborts with diagnostics.
    """
    space = base.space
    g = _validate_terminal_loss(space, g)
    if model is None:
        model = LogitsModel.zeros(space)
    elif model.space != space:
        raise InvalidTargetError("model space does not match base space")
    rng = np.random.default_rng(np.random.Philox(config.seed))
    buffer = ReplayBuffer(config.buffer_capacity)
    rows = _trainable_rows(space)
    row_of = np.full(space.num_states, -1, dtype=np.int64)
    row_of[rows] = np.arange(len(rows))
    params = model.logits[rows].copy()
    state = AdamState.zeros(params.shape)
    full_mask_index = space.encode(space.full_mask())

    records: list[MetricRecord] = []
    skipped = 0
    t0 = time.perf_counter()
    step = 0
    total = config.steps

    while step < total:
        frozen = model.copy()
        starts = np.full(config.batch_size, full_mask_index, dtype=np.int64)
        endpoint_rec = rollout_indices(frozen, base, starts, rng)
        x1 = endpoint_rec["finals"]
        if not config.on_policy:
            buffer.push_batch(starts, x1)

        for _ in range(config.inner_steps):
            if step >= total:
                break
            step += 1
            if config.on_policy:
                batch_x1 = x1
            else:
                _, batch_x1 = buffer.sample(config.batch_size, rng)
            levels = rng.integers(0, space.length, size=config.batch_size)
            x_idx = reciprocal_project_batch(space, batch_x1, levels, rng)
            targets = sample_step_targets(
                frozen, base, g, x_idx, config.k, rng, y_mode=config.y_mode
            )
            ok = targets.ok
            skipped += int((~ok).sum())
            n_eff = int(ok.sum())

            grads = np.zeros_like(params)
            loss = 0.0
            if n_eff:
                for i in np.flatnonzero(ok):
                    if config.gkl_mode == "sampled":
                        sample_loss, grad_slice = dam_loss_and_grad(
                            model,
                            space.decode(int(targets.x_index[i])),
                            space.decode(int(targets.y_index[i])),
                            target_w=targets.target[i],
                            weight=float(targets.weight[i]),
                            mode="sampled",
                        )
                    else:
                        table = _full_target_table(
                            frozen, base, g, int(targets.x_index[i]), config.k, rng
                        )
                        sample_loss, grad_slice = dam_loss_and_grad(
                            model,
                            space.decode(int(targets.x_index[i])),
                            target_w=table,
                            mode="full",
                        )
                    loss += sample_loss
                    grads[row_of[targets.x_index[i]]] += grad_slice / n_eff
                loss /= n_eff
            if not np.isfinite(loss):
                raise NonFiniteGradientError(
                    f"non-finite loss {loss} at step {step}: "
                    f"usable samples {n_eff}/{config.batch_size}, "
                    f"adjoint range [{targets.adjoint[ok].min() if n_eff else 'n/a'}, "
                    f"{targets.adjoint[ok].max() if n_eff else 'n/a'}]"
                )
            if config.grad_clip > 0:
                norm = float(np.sqrt((grads**2).sum()))
                if norm > config.grad_clip:
                    grads *= config.grad_clip / norm
            params = adam_step(params, grads, state, config)
            model.logits[rows] = params

            if step % config.metric_interval == 0 or step == 1 or step == total:
                grad_norm = float(np.sqrt((grads**2).sum()))
                kl_levels = _kl_to_oracle(model, oracle)
                record = MetricRecord(
                    step=step,
                    loss=float(loss),
                    kl_levels=kl_levels,
                    grad_norm=grad_norm,
                    adjoint_mean=float(targets.adjoint[ok].mean()) if n_eff else 0.0,
                    ess=float(targets.ess[ok].mean()) if n_eff else 0.0,
                    seconds=time.perf_counter() - t0,
                )
                records.append(record)
                if on_metric is not None:
                    on_metric(record)

    return TrainResult(records=records, model=model, skipped=skipped)


def _kl_to_oracle(
    model: LogitsModel, oracle: TiltedDistribution | None
) -> tuple[float, ...]:
    if oracle is None:
        return ()
    space = model.space
    marginals = push_forward_marginals(model)
    return tuple(
        marginal_kl(oracle.p_star_levels.table(n), marginals.table(n))
        for n in range(1, space.length + 1)
    )


def _full_target_table(
    frozen: LogitsModel,
    base: TargetDist,
    g: np.ndarray,
    x_index: int,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Estimated target table over every successor of ``x`` (full-sum mode).

    One shared K-sample denominator from ``x``; one numerator continuation
    per successor.  Intended for small spaces.
    """
    space = frozen.space
    x_tokens = space.decode(x_index)
    masked = x_tokens == MASK
    succ = space.successor_index_grid(np.array([x_index], dtype=np.int64))[0]
    valid = np.broadcast_to(masked[:, None], succ.shape)
    y_flat = succ[valid]

    den_rec = rollout_indices(
        frozen, base, np.full(k, x_index, dtype=np.int64), rng
    )
    lq_m, lq_b, finals = _log_ratio_tables(den_rec, 1, k)
    den_terms = (lq_b - lq_m).sum(axis=2) - g[finals]
    log_den = float(logsumexp(den_terms[0]) - np.log(k))

    z_rec = rollout_indices(frozen, base, y_flat, rng)
    log_num = (
        z_rec["log_q_base"] - z_rec["log_q_model"]
    ).sum(axis=1) - g[z_rec["finals"]]

    base_row = base.probs_batch(np.array([x_index], dtype=np.int64))[0]
    table = np.zeros_like(base_row)
    table[valid] = base_row[valid] * np.exp(log_num - log_den)
    return table
