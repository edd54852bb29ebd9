"""Adjoint estimators: the quantities a trained jump law is matched against.

For a trajectory ending at ``X1``, the discrete adjoint at state ``y`` is
``a(y; X1) = E[e^{-g(Z) + g(X1)} | Z ~ base conditional from y]``.  Its mean
over tilted trajectories through ``x`` equals the exact tilt
``e^{-V(y)+V(x)}``, which is what makes it a usable regression target.

Three routes are implemented, deliberately on separate code paths:

* :func:`integrate_discrete_adjoint` -- the backward level recursion from the
  terminal condition ``e^{-g(y)+g(X1)}``.
* :func:`analytic_adjoint` -- direct summation over the base conditional
  (or a single-rollout Monte-Carlo mode).
* :func:`iw_adjoint` -- the self-normalized importance-weighted estimator
  built from model rollouts, the one actually available during training.

The module also carries the single-token two-answer toy problem used to
measure estimator bias and variance: closed forms (``toy_*``) and a sharded
Monte-Carlo study (:func:`estimator_bias_variance_study`).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom

from .ctmc import (
    DEFAULT_STATE_CAP,
    TargetDist,
    Trajectory,
    dynkin_estimate,
    dynkin_functional,
    push_forward_marginals,
)
from .errors import (
    DegenerateDenominatorError,
    InvalidTargetError,
    SpaceTooLargeError,
)
from .model import ConditionalSampleBatch, rollout_indices
from .oracle import _validate_terminal_loss
from .spaces import MASK, ProductSpace

__all__ = [
    "AdjointEstimate",
    "StudyRecord",
    "DAM2",
    "DAM3",
    "THREAD_ENV_VAR",
    "analytic_adjoint",
    "dynkin_estimate",
    "dynkin_functional",
    "estimator_bias_variance_study",
    "integrate_discrete_adjoint",
    "iw_adjoint",
    "toy_exact_bias_dam3",
    "toy_delta_bias_dam3",
    "toy_delta_var_dam3",
    "toy_mean_dam2",
    "toy_var_dam2",
    "toy_mean_s",
    "toy_var_s1",
    "toy_true_value",
]

THREAD_ENV_VAR = "DAM_LAB_THREADS"
_STUDY_SHARDS = 16  # fixed shard layout keeps results thread-count independent

# estimator names used in study records and CSV output
DAM2 = "dam2"  # plug-in reward average under the model, no importance weights
DAM3 = "dam3"  # reciprocal of the self-normalized importance-weighted average


# ----------------------------------------------------------------------
# backward recursion and analytic form
# ----------------------------------------------------------------------
def _as_index(space: ProductSpace, state) -> int:
    if np.isscalar(state) or getattr(state, "ndim", None) == 0:
        index = int(state)
        if not 0 <= index < space.num_states:
            raise InvalidTargetError(f"state index {index} out of range")
        return index
    return space.encode(space.validate_state(np.asarray(state)))


def integrate_discrete_adjoint(
    base: TargetDist,
    g: np.ndarray,
    traj: Trajectory,
    query_states,
    cap: int = DEFAULT_STATE_CAP,
) -> dict[int, float]:
    """Backward recursion for the per-state adjoint of one trajectory.

    Starting from the terminal condition ``a_N(y) = e^{-g(y)+g(X1)}`` with
    ``X1`` the trajectory endpoint, each level applies
    ``a_n(y) = sum_z Q_base(z|y) a_{n+1}(z)``.  Returns the values at the
    queried states (encoded index -> value), computed in log space.
    """
    space = base.space
    g = _validate_terminal_loss(space, g)
    queries = [_as_index(space, s) for s in query_states]
    if not queries:
        return {}
    levels = space.levels_of_indices(np.array(queries, dtype=np.int64))
    min_level = int(levels.min())
    total = sum(space.level_size(n) for n in range(min_level, space.length + 1))
    if total > cap:
        raise SpaceTooLargeError(
            f"backward recursion would touch {total} states (cap {cap})"
        )
    final = traj.final_index
    g_final = g[final]
    log_a = np.full(space.num_states, np.nan)
    terminal = space.level_states(space.length)
    log_a[terminal] = -g[terminal] + g_final
    for n in range(space.length - 1, min_level - 1, -1):
        states = space.level_states(n)
        probs = base.probs_batch(states)
        succ = space.successor_index_grid(states)
        digits = space.decode_batch(states)
        valid = (digits[:, :, None] == MASK) & (probs > 0)
        succ_safe = np.where(valid, succ, 0)
        with np.errstate(divide="ignore"):
            terms = np.where(
                valid, np.log(probs, where=valid) + log_a[succ_safe], -np.inf
            )
        log_a[states] = logsumexp(terms.reshape(len(states), -1), axis=1)
    return {q: float(np.exp(log_a[q])) for q in queries}


def analytic_adjoint(
    base: TargetDist,
    g: np.ndarray,
    y: np.ndarray,
    x1: np.ndarray,
    mode: str = "exact",
    rng: np.random.Generator | None = None,
    samples: int = 1,
) -> float:
    """``E[e^{-g(Z)+g(X1)}]`` over the base conditional ``Z`` from ``y``.

    ``mode="exact"`` sums the forward base conditional (independent of the
    backward recursion); ``mode="mc"`` averages ``samples`` base rollouts from
    ``y`` -- the unbiased sampled form.
    """
    space = base.space
    g = _validate_terminal_loss(space, g)
    y_tokens = space.validate_state(y)
    x1_index = _as_index(space, x1)
    g_final = g[x1_index]
    if mode == "exact":
        p = push_forward_marginals(base, start=y_tokens).table(space.length)
        terminal = space.level_states(space.length)
        with np.errstate(divide="ignore"):
            terms = np.where(
                p > 0, np.log(p, where=p > 0) - g[terminal] + g_final, -np.inf
            )
        return float(np.exp(logsumexp(terms)))
    if mode == "mc":
        if rng is None:
            raise InvalidTargetError("mode='mc' requires an rng")
        if samples < 1:
            raise InvalidTargetError(f"samples must be >= 1, got {samples}")
        start = np.full(samples, space.encode(y_tokens), dtype=np.int64)
        rec = rollout_indices(base, base, start, rng)
        return float(np.mean(np.exp(-g[rec["finals"]] + g_final)))
    raise InvalidTargetError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------
# importance-weighted adjoint
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class AdjointEstimate:
    """One importance-weighted adjoint estimate with its diagnostics."""

    value: float
    log_value: float
    log_numerator: float
    log_denominator: float
    ess: float  # effective sample size of the K denominator weights

    def __post_init__(self):
        if not (self.value > 0 and np.isfinite(self.value)):
            raise DegenerateDenominatorError(
                f"adjoint estimate {self.value} is not positive finite"
            )


def _log_weighted_terms(batch: ConditionalSampleBatch, g: np.ndarray) -> np.ndarray:
    """Per-sample ``log(w_k e^{-g(final_k)})`` with ``w = p_base/p_model``."""
    return batch.log_q_base - batch.log_q_model - g[batch.finals]


def iw_adjoint(
    model: TargetDist,
    base: TargetDist,
    g: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    z_batch: ConditionalSampleBatch,
    x1_batch: ConditionalSampleBatch,
    allow_multi_z: bool = False,
) -> AdjointEstimate:
    """Self-normalized importance-weighted adjoint estimate at (y, x).

    ``z_batch`` holds the continuation(s) from ``y`` (one by default),
    ``x1_batch`` the K continuations from ``x``; both must come from
    :func:`~damlab.model.rollout_from` against the same model/base pair so the
    stored log path probabilities are the importance weights.  Everything is
    combined in log space and exponentiated once.
    """
    space = model.space
    g = _validate_terminal_loss(space, g)
    x_tokens = space.validate_state(x)
    y_tokens = space.validate_state(y)
    if not np.array_equal(z_batch.origin, y_tokens):
        raise InvalidTargetError("z_batch does not originate at y")
    if not np.array_equal(x1_batch.origin, x_tokens):
        raise InvalidTargetError("x1_batch does not originate at x")
    if z_batch.k != 1 and not allow_multi_z:
        raise InvalidTargetError(
            f"z_batch has {z_batch.k} samples; single-sample form expected "
            "(pass allow_multi_z=True to average)"
        )
    log_num_terms = _log_weighted_terms(z_batch, g)
    log_numerator = float(logsumexp(log_num_terms) - np.log(z_batch.k))
    log_den_terms = _log_weighted_terms(x1_batch, g)
    log_denominator = float(logsumexp(log_den_terms) - np.log(x1_batch.k))
    if not np.isfinite(log_denominator):
        raise DegenerateDenominatorError(
            "denominator underflowed to zero in log space"
        )
    shifted = np.exp(log_den_terms - log_den_terms.max())
    ess = float(shifted.sum() ** 2 / (shifted**2).sum())
    log_value = log_numerator - log_denominator
    return AdjointEstimate(
        value=float(np.exp(log_value)),
        log_value=log_value,
        log_numerator=log_numerator,
        log_denominator=log_denominator,
        ess=ess,
    )


# ----------------------------------------------------------------------
# two-answer toy problem: closed forms
# ----------------------------------------------------------------------
# One masked position, two content tokens: "correct" (base prob theta, model
# prob phi) and "wrong".  Terminal loss g = -c on correct, 0 on wrong, so the
# exact value e^{V} = 1 / (theta e^c + 1 - theta).  Two estimators of it:
#   dam2: average of e^{g(X1)} over K model samples (no importance weights);
#   dam3: reciprocal of the self-normalized average S_K of w(X1) e^{-g(X1)}.


def _check_toy_params(theta: float, phi: float, c: float) -> None:
    if not 0.0 < theta < 1.0:
        raise InvalidTargetError(f"theta must be in (0, 1), got {theta}")
    if not 0.0 < phi <= 1.0:
        raise InvalidTargetError(f"phi must be in (0, 1], got {phi}")
    if not c >= 0:
        raise InvalidTargetError(f"c must be >= 0, got {c}")


def toy_mean_s(theta: float, c: float) -> float:
    """``E[S_1] = theta e^c + 1 - theta`` (importance weighting is unbiased)."""
    return theta * np.exp(c) + 1.0 - theta


def toy_true_value(theta: float, c: float) -> float:
    """The target quantity ``e^{V} = 1 / E[S_1]``, computed in log space."""
    return float(np.exp(-np.logaddexp(np.log(theta) + c, np.log1p(-theta))))


def toy_var_s1(theta: float, phi: float, c: float) -> float:
    """Variance of one importance-weighted summand ``w(X1) e^{-g(X1)}``."""
    if phi == 1.0:
        # only the correct answer is ever sampled; S_1 is constant theta e^c
        return 0.0
    second = theta**2 / phi * np.exp(2.0 * c) + (1.0 - theta) ** 2 / (1.0 - phi)
    return float(second - toy_mean_s(theta, c) ** 2)


def toy_mean_dam2(phi: float, c: float) -> float:
    """Exact mean of the plug-in estimator: ``phi e^{-c} + 1 - phi``."""
    return float(phi * np.exp(-c) + 1.0 - phi)


def toy_var_dam2(phi: float, c: float, k: int) -> float:
    """Exact variance of the plug-in estimator over K samples."""
    return float(phi * (1.0 - phi) * (np.exp(-c) - 1.0) ** 2 / k)


def toy_delta_bias_dam3(theta: float, phi: float, c: float, k: int) -> float:
    """Second-order (delta-method) bias of ``1/S_K``: ``Var[S_1]/(K E[S]^3)``."""
    mean_s = toy_mean_s(theta, c)
    return float(toy_var_s1(theta, phi, c) / (k * mean_s**3))


def toy_delta_var_dam3(theta: float, phi: float, c: float, k: int) -> float:
    """Delta-method variance of ``1/S_K``: ``Var[S_1]/(K E[S]^4)``."""
    mean_s = toy_mean_s(theta, c)
    return float(toy_var_s1(theta, phi, c) / (k * mean_s**4))


def toy_exact_bias_dam3(theta: float, phi: float, c: float, k: int) -> float:
    """Exact bias of ``1/S_K`` by enumerating the binomial correct-count."""
    _check_toy_params(theta, phi, c)
    counts = np.arange(k + 1)
    pmf = binom.pmf(counts, k, phi)
    w_correct = theta / phi * np.exp(c)
    w_wrong = (1.0 - theta) / (1.0 - phi) if phi < 1.0 else 0.0
    s = (counts * w_correct + (k - counts) * w_wrong) / k
    return float((pmf / s).sum() - toy_true_value(theta, c))


# ----------------------------------------------------------------------
# Monte-Carlo bias/variance study
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class StudyRecord:
    """One (estimator, K) cell of the bias/variance study."""

    k: int
    theta: float
    phi: float
    c: float
    estimator: str
    empirical_bias: float
    empirical_var: float
    formula_bias: float
    formula_var: float
    trials: int
    seed: int

    def csv_row(self) -> str:
        return ", ".join(
            [
                str(self.k),
                repr(self.theta),
                repr(self.phi),
                repr(self.c),
                self.estimator,
                repr(self.empirical_bias),
                repr(self.empirical_var),
                repr(self.formula_bias),
                repr(self.formula_var),
                str(self.trials),
                str(self.seed),
            ]
        )


STUDY_CSV_HEADER = (
    "K, theta, phi, c, estimator, empirical_bias, empirical_var, "
    "formula_bias, formula_var, trials, seed"
)


def _study_shard(
    theta: float, phi: float, c: float, k: int, trials: int, seed_seq
) -> tuple[int, float, float, float, float]:
    """Moment accumulators (n, sum, sumsq) for both estimators on one shard."""
    rng = np.random.default_rng(np.random.Philox(seed_seq))
    correct = rng.binomial(k, phi, size=trials).astype(np.float64)
    dam2_vals = (correct * np.exp(-c) + (k - correct)) / k
    w_correct = theta / phi * np.exp(c)
    w_wrong = (1.0 - theta) / (1.0 - phi) if phi < 1.0 else 0.0
    s = (correct * w_correct + (k - correct) * w_wrong) / k
    dam3_vals = 1.0 / s
    return (
        trials,
        float(dam2_vals.sum()),
        float((dam2_vals**2).sum()),
        float(dam3_vals.sum()),
        float((dam3_vals**2).sum()),
    )


def _max_workers() -> int:
    raw = os.environ.get(THREAD_ENV_VAR, "")
    try:
        n = int(raw)
    except ValueError:
        n = 4
    return max(1, min(n if n > 0 else 4, _STUDY_SHARDS))


def estimator_bias_variance_study(
    theta: float,
    phi: float,
    c: float,
    k: int,
    trials: int,
    seed: int,
) -> list[StudyRecord]:
    """Empirical bias/variance of both estimators, next to their closed forms.

    Trials are split over a fixed number of shards with independent
    counter-based random streams; shards run on a thread pool capped by the
    ``DAM_LAB_THREADS`` environment variable.  Results depend only on
    ``seed`` (and the fixed shard layout), not on the thread count.
    """
    _check_toy_params(theta, phi, c)
    if k < 1:
        raise InvalidTargetError(f"K must be >= 1, got {k}")
    if trials < 2:
        raise InvalidTargetError(f"trials must be >= 2, got {trials}")
    shards = min(_STUDY_SHARDS, trials)
    per = [trials // shards + (1 if i < trials % shards else 0) for i in range(shards)]
    seeds = np.random.SeedSequence(seed).spawn(_STUDY_SHARDS)[:shards]
    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        results = list(
            pool.map(
                lambda args: _study_shard(theta, phi, c, k, *args),
                zip(per, seeds),
            )
        )
    n = sum(r[0] for r in results)
    sums = [sum(r[i] for r in results) for i in (1, 2, 3, 4)]
    records = []
    truth = toy_true_value(theta, c)
    for estimator, total, total_sq in (
        (DAM2, sums[0], sums[1]),
        (DAM3, sums[2], sums[3]),
    ):
        mean = total / n
        # sum-of-squares shortcut can land epsilon-negative for constant data
        var = max(0.0, (total_sq - n * mean**2) / (n - 1))
        if estimator == DAM2:
            f_bias = toy_mean_dam2(phi, c) - truth
            f_var = toy_var_dam2(phi, c, k)
        else:
            f_bias = toy_delta_bias_dam3(theta, phi, c, k)
            f_var = toy_delta_var_dam3(theta, phi, c, k)
        records.append(
            StudyRecord(
                k=k,
                theta=theta,
                phi=phi,
                c=c,
                estimator=estimator,
                empirical_bias=mean - truth,
                empirical_var=var,
                formula_bias=f_bias,
                formula_var=f_var,
                trials=n,
                seed=seed,
            )
        )
    return records
