"""Exact ground truth on enumerable spaces.

Given a base jump law and a terminal loss ``g``, the optimally tilted process
has value function ``V`` with ``e^{-V(x)} = E[e^{-g(X_final)} | x]`` and jump
law ``Q*(y|x) = Q_base(y|x) e^{-V(y)+V(x)}``.  Under single-token unmasking
``V`` depends on the state only (not on time), and satisfies the backward
recursion ``e^{-V(x)} = sum_y Q_base(y|x) e^{-V(y)}`` with terminal condition
``e^{-V} = e^{-g}``.

Two deliberately independent evaluation routes are provided: the backward
dynamic program (:func:`compute_value_table`) and direct forward summation of
the terminal tilt (:func:`log_expected_terminal_tilt`,
:func:`brute_force_tilted_final`), so each can audit the other.

All arithmetic is in log space; ``e^{-V}`` is materialized only on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .ctmc import (
    LevelMarginals,
    TableTargetDist,
    TargetDist,
    push_forward_marginals,
)
from .errors import (
    ConfigError,
    InvalidLevelError,
    InvalidTargetError,
    NoMaskedPositionError,
    NumericalOverflowError,
)
from .model import load_array_checkpoint, save_array_checkpoint
from .spaces import MASK, ProductSpace


def expand_terminal_loss(space: ProductSpace, terminal_values: np.ndarray) -> np.ndarray:
    """Scatter losses given in canonical terminal order into a full-size array.

    The result has one slot per state index; only fully unmasked slots are
    meaningful (all others are zero and never read).
    """
    values = np.asarray(terminal_values, dtype=np.float64)
    expected = space.level_size(space.length)
    if values.shape != (expected,):
        raise InvalidTargetError(
            f"terminal loss shape {values.shape} != ({expected},)"
        )
    if not np.all(np.isfinite(values)):
        raise InvalidTargetError("terminal loss must be finite at every state")
    out = np.zeros(space.num_states)
    out[space.level_states(space.length)] = values
    return out


def _validate_terminal_loss(space: ProductSpace, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (space.num_states,):
        raise InvalidTargetError(
            f"terminal loss array shape {g.shape} != ({space.num_states},)"
        )
    if not np.all(np.isfinite(g[space.level_states(space.length)])):
        raise InvalidTargetError("terminal loss must be finite at every full state")
    return g


@dataclass(frozen=True)
class ValueTable:
    """Per-state table of ``-V(x) = log e^{-V(x)}``, terminal entries ``-g``."""

    space: ProductSpace
    log_neg_exp_v: np.ndarray  # (num_states,)

    def value(self, indices: np.ndarray | None = None) -> np.ndarray:
        """``V`` at the given state indices (all states by default)."""
        if indices is None:
            return -self.log_neg_exp_v
        return -self.log_neg_exp_v[np.asarray(indices, dtype=np.int64)]

    @property
    def neg_exp_v(self) -> np.ndarray:
        """Materialized ``e^{-V(x)}`` table."""
        with np.errstate(over="ignore"):
            w = np.exp(self.log_neg_exp_v)
        if not np.all(np.isfinite(w)):
            raise NumericalOverflowError(
                "e^{-V} overflows float64; use log_neg_exp_v directly"
            )
        return w

    def log_tilt(self, y_indices: np.ndarray, x_indices: np.ndarray) -> np.ndarray:
        """``-V(y) + V(x)`` -- the log tilt applied to base probabilities."""
        y = np.asarray(y_indices, dtype=np.int64)
        x = np.asarray(x_indices, dtype=np.int64)
        return self.log_neg_exp_v[y] - self.log_neg_exp_v[x]


def compute_value_table(base: TargetDist, g: np.ndarray) -> ValueTable:
    """Backward dynamic program for ``-V`` in log space, level N down to 0."""
    space = base.space
    g = _validate_terminal_loss(space, g)
    log_w = np.full(space.num_states, np.nan)
    terminal = space.level_states(space.length)
    log_w[terminal] = -g[terminal]
    for n in range(space.length - 1, -1, -1):
        states = space.level_states(n)
        probs = base.probs_batch(states)  # (B, N, M)
        succ = space.successor_index_grid(states)
        digits = space.decode_batch(states)
        valid = (digits[:, :, None] == MASK) & (probs > 0)
        succ_safe = np.where(valid, succ, 0)  # grid is garbage at unmasked slots
        with np.errstate(divide="ignore"):
            terms = np.where(valid, np.log(probs, where=valid) + log_w[succ_safe], -np.inf)
        log_w[states] = logsumexp(terms.reshape(len(states), -1), axis=1)
    if not np.all(np.isfinite(log_w)):
        raise NumericalOverflowError("value recursion produced non-finite entries")
    return ValueTable(space=space, log_neg_exp_v=log_w)


def log_expected_terminal_tilt(base: TargetDist, g: np.ndarray, x: np.ndarray) -> float:
    """``log E[e^{-g(X_final)} | x]`` by direct forward summation.

    Independent of the backward recursion: pushes the base law forward from
    ``x`` and sums the tilt over terminal states.  Equals ``-V(x)``.
    """
    space = base.space
    g = _validate_terminal_loss(space, g)
    marginals = push_forward_marginals(base, start=x)
    terminal = space.level_states(space.length)
    p = marginals.table(space.length)
    with np.errstate(divide="ignore"):
        terms = np.where(p > 0, np.log(p, where=p > 0) - g[terminal], -np.inf)
    return float(logsumexp(terms))


def brute_force_tilted_final(
    base: TargetDist, g: np.ndarray, start: np.ndarray | None = None
) -> np.ndarray:
    """Terminal law tilted by ``e^{-g}``, normalized directly over all states.

    Uses only the forward base marginal -- no value recursion -- in canonical
    terminal order.
    """
    space = base.space
    g = _validate_terminal_loss(space, g)
    p = push_forward_marginals(base, start=start).table(space.length)
    terminal = space.level_states(space.length)
    with np.errstate(divide="ignore"):
        log_unnorm = np.where(p > 0, np.log(p, where=p > 0) - g[terminal], -np.inf)
    return np.exp(log_unnorm - logsumexp(log_unnorm))


def optimal_target(vt: ValueTable, base: TargetDist) -> TableTargetDist:
    """The optimal jump law ``Q*(y|x) = Q_base(y|x) e^{-V(y)+V(x)}``.

    Normalization per state is a theorem, not an adjustment: the returned
    table is validated, so a broken value table fails loudly here.
    """
    space = vt.space
    indices = np.arange(space.num_states, dtype=np.int64)
    probs = base.probs_batch(indices)
    succ = space.successor_index_grid(indices)
    digits = space.decode_batch(indices)
    valid = (digits[:, :, None] == MASK) & (probs > 0)
    succ_safe = np.where(valid, succ, 0)
    log_w = vt.log_neg_exp_v
    with np.errstate(divide="ignore"):
        log_q = np.where(
            valid,
            np.log(probs, where=valid)
            + log_w[succ_safe]
            - log_w[indices][:, None, None],
            -np.inf,
        )
    return TableTargetDist(space, np.exp(log_q))


def optimal_conditional(
    vt: ValueTable, base: TargetDist, x: np.ndarray, m: int
) -> np.ndarray:
    """Conditional law of the tilted process at level ``m`` given state ``x``.

    Computed as the tilted reweighting of the base conditional,
    ``p*(y|x) = p_base(y|x) e^{-V(y)+V(x)}``, in canonical level-``m`` order.
    (Pushing ``x`` forward under ``Q*`` gives the same law; tests hold the two
    routes against each other.)  Sums to 1 by construction -- the result is
    not renormalized.
    """
    space = vt.space
    tokens = space.validate_state(x)
    n0 = int(np.count_nonzero(tokens))
    if not n0 <= m <= space.length:
        raise InvalidLevelError(
            f"conditional level {m} outside [{n0}, {space.length}]"
        )
    x_index = space.encode(tokens)
    level_idx = space.level_states(m)
    if m == n0:
        # canonical level order is not ascending in state index
        return (level_idx == x_index).astype(np.float64)
    p_base = push_forward_marginals(base, start=tokens).table(m)
    tilt = vt.log_tilt(level_idx, np.full(len(level_idx), x_index))
    with np.errstate(divide="ignore"):
        log_p = np.where(p_base > 0, np.log(p_base, where=p_base > 0) + tilt, -np.inf)
    return np.exp(log_p)


def basic_adjoint_generator_at_optimum(
    vt: ValueTable, base: TargetDist, y: np.ndarray, x: np.ndarray
) -> float:
    """The surviving generator term of the adjoint dynamics at the optimum.

    In jump-normalized form this is ``sum_z (Q_base - Q*)(z|y)``; it depends
    on ``y`` only (``x`` is accepted to mirror the two-state signature of the
    general dynamics, which are out of scope).  Computed by explicit table
    subtraction -- for any normalized ``Q*`` the sum telescopes to zero, and
    this function exists to verify that numerically rather than assume it.
    """
    space = vt.space
    y_tokens = space.validate_state(y)
    x_tokens = space.validate_state(x)
    for tokens in (y_tokens, x_tokens):
        if np.count_nonzero(tokens) == space.length:
            raise NoMaskedPositionError(
                f"state {tokens.tolist()} is terminal; the generator term "
                "applies to non-terminal states only"
            )
    y_index = np.array([space.encode(y_tokens)], dtype=np.int64)
    q_base = base.probs_batch(y_index)[0]
    succ = space.successor_index_grid(y_index)[0]
    digits = space.decode_batch(y_index)[0]
    valid = (digits[:, None] == MASK) & (q_base > 0)
    succ_safe = np.where(valid, succ, 0)
    tilt = np.where(
        valid,
        np.exp(vt.log_neg_exp_v[succ_safe] - vt.log_neg_exp_v[y_index[0]]),
        0.0,
    )
    q_star = q_base * tilt
    return float((q_base - q_star).sum())


@dataclass(frozen=True)
class TiltedDistribution:
    """Bundle of exact tilted-process objects for one (base, g) instance."""

    value_table: ValueTable
    q_star: TableTargetDist
    p_star_levels: LevelMarginals

    @property
    def space(self) -> ProductSpace:
        return self.value_table.space


def compute_tilted_distribution(
    base: TargetDist, g: np.ndarray, start: np.ndarray | None = None
) -> TiltedDistribution:
    """Value table, optimal jump law, and all exact level marginals."""
    vt = compute_value_table(base, g)
    q_star = optimal_target(vt, base)
    levels = push_forward_marginals(q_star, start=start)
    return TiltedDistribution(value_table=vt, q_star=q_star, p_star_levels=levels)


def save_value_table(vt: ValueTable, path) -> None:
    """Checkpoint a value table (log e^{-V} in state-index order)."""
    save_array_checkpoint(
        path,
        vt.log_neg_exp_v,
        {
            "kind": "value_table",
            "vocab_size": vt.space.vocab_size,
            "length": vt.space.length,
        },
    )


def load_value_table(path) -> ValueTable:
    meta, array = load_array_checkpoint(path)
    if meta.get("kind") != "value_table":
        raise ConfigError(f"{path}: checkpoint kind {meta.get('kind')!r} != 'value_table'")
    space = ProductSpace(int(meta["vocab_size"]), int(meta["length"]))
    if array.shape != (space.num_states,):
        raise ConfigError(
            f"{path}: table shape {array.shape} != ({space.num_states},)"
        )
    return ValueTable(space=space, log_neg_exp_v=array)
