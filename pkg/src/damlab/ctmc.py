"""Jump dynamics over masked product spaces.

A masked sequence model unmasks one position per jump, so a distributional
description of the dynamics is just, for every state ``x``, a probability
table over (masked position ``p``, content token ``v``): the law of the next
unmasking move.  All schedule information (when jumps happen in continuous
time) factors out of every quantity this package computes; jump *times* are
therefore carried on trajectories as bookkeeping only and never consumed.

This module provides the table representation (:class:`TableTargetDist`),
trajectory sampling, exact level-marginal push-forward, path-probability
ratios, and exact KL divergences (path-level and per-level).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    MalformedDistributionError,
    RatioUndefinedError,
    SpaceTooLargeError,
)
from .spaces import MASK, ProductSpace

#: absolute tolerance on probability sums
SUM_TOL = 1e-9

#: default cap on exact enumeration size
DEFAULT_STATE_CAP = 10**7


# ----------------------------------------------------------------------
# jump distributions
# ----------------------------------------------------------------------
class TargetDist:
    """A per-state jump law: ``probs(x)[p, v-1] = P(unmask p with v | x)``.

    Subclasses implement :meth:`probs_batch`; everything else derives from it.
    Tables must be zero at unmasked positions and sum to 1 over the masked
    ones (except at terminal states, where they are all zero).
    """

    space: ProductSpace

    def probs_batch(self, indices: np.ndarray) -> np.ndarray:
        """(B,) state indices -> (B, N, M) jump probabilities."""
        raise NotImplementedError

    def probs(self, index: int) -> np.ndarray:
        return self.probs_batch(np.asarray([index], dtype=np.int64))[0]

    def log_probs_batch(self, indices: np.ndarray) -> np.ndarray:
        p = self.probs_batch(indices)
        with np.errstate(divide="ignore"):
            return np.log(p)

    def log_probs(self, index: int) -> np.ndarray:
        return self.log_probs_batch(np.asarray([index], dtype=np.int64))[0]

    def prob_of(self, index: int, position: int, token: int) -> float:
        return float(self.probs(index)[position, token - 1])


class TableTargetDist(TargetDist):
    """Dense jump law: one explicit (N, M) table per state."""

    def __init__(self, space: ProductSpace, table: np.ndarray, validate: bool = True):
        table = np.asarray(table, dtype=np.float64)
        expected = (space.num_states, space.length, space.vocab_size)
        if table.shape != expected:
            raise MalformedDistributionError(
                f"table shape {table.shape} != {expected}"
            )
        self.space = space
        self.table = table
        if validate:
            self._validate()

    def _validate(self) -> None:
        table, space = self.table, self.space
        if not np.all(np.isfinite(table)) or table.min() < 0:
            raise MalformedDistributionError(
                "jump probabilities must be finite and nonnegative"
            )
        digits = space.decode_batch(np.arange(space.num_states, dtype=np.int64))
        masked = digits == MASK  # (S, N)
        if np.any(table[~masked] != 0):
            raise MalformedDistributionError(
                "jump probabilities must be zero at unmasked positions"
            )
        sums = table.sum(axis=(1, 2))
        terminal = ~masked.any(axis=1)
        bad = np.abs(sums - 1.0) > SUM_TOL
        bad &= ~terminal
        if np.any(bad):
            worst = int(np.argmax(np.abs(sums - 1.0) * ~terminal))
            raise MalformedDistributionError(
                f"jump probabilities at state {worst} sum to {sums[worst]!r}"
            )
        if np.any(table[terminal] != 0):
            raise MalformedDistributionError(
                "terminal states must have an all-zero jump table"
            )

    def probs_batch(self, indices: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(indices, dtype=np.int64)]

    # -- builders ------------------------------------------------------
    @classmethod
    def factorized(cls, space: ProductSpace, token_probs: np.ndarray) -> "TableTargetDist":
        """Uniform choice among masked positions x a fixed token law.

        This is the standard masked-diffusion base family: which position is
        unmasked next is uniform among the masked ones, and the written token
        follows ``token_probs`` independent of position and state.
        """
        token_probs = np.asarray(token_probs, dtype=np.float64)
        if token_probs.shape != (space.vocab_size,):
            raise MalformedDistributionError(
                f"token_probs must have shape ({space.vocab_size},)"
            )
        if abs(token_probs.sum() - 1.0) > SUM_TOL or token_probs.min() < 0:
            raise MalformedDistributionError("token_probs is not a distribution")
        digits = space.decode_batch(np.arange(space.num_states, dtype=np.int64))
        masked = (digits == MASK).astype(np.float64)  # (S, N)
        counts = masked.sum(axis=1)  # number of masked positions per state
        with np.errstate(divide="ignore", invalid="ignore"):
            pos_weight = np.where(counts[:, None] > 0, masked / counts[:, None], 0.0)
        table = pos_weight[:, :, None] * token_probs[None, None, :]
        return cls(space, table, validate=False)

    @classmethod
    def uniform(cls, space: ProductSpace) -> "TableTargetDist":
        """Uniform position and uniform token: the default base model."""
        return cls.factorized(
            space, np.full(space.vocab_size, 1.0 / space.vocab_size)
        )


def uniform_base(space: ProductSpace) -> TableTargetDist:
    """Convenience alias for the uniform masked base model."""
    return TableTargetDist.uniform(space)


# ----------------------------------------------------------------------
# trajectories
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class JumpEvent:
    """One unmasking: the ``jump_index``-th jump writes ``token`` at ``position``.

    ``time`` is the jump's clock time under the shared linear schedule.  It is
    bookkeeping only: no estimator in this package reads it.
    """

    jump_index: int
    position: int
    token: int
    time: float


@dataclass(frozen=True)
class Trajectory:
    """A realized unmasking path from ``start`` to a (possibly) terminal state."""

    space: ProductSpace
    start: np.ndarray
    events: tuple[JumpEvent, ...]

    @property
    def final(self) -> np.ndarray:
        state = self.start.copy()
        for ev in self.events:
            state[ev.position] = ev.token
        return state

    def states(self) -> list[np.ndarray]:
        """All visited states, starting state first."""
        out = [self.start.copy()]
        for ev in self.events:
            nxt = out[-1].copy()
            nxt[ev.position] = ev.token
            out.append(nxt)
        return out

    @property
    def final_index(self) -> int:
        return self.space.encode(self.final)


def _categorical_flat(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Draw an index from a flat probability vector (sum within 1e-9 of 1)."""
    total = probs.sum()
    if not np.isfinite(total) or abs(total - 1.0) > SUM_TOL or probs.min() < 0:
        raise MalformedDistributionError(
            f"jump probabilities sum to {total!r}; expected 1 within {SUM_TOL}"
        )
    cdf = np.cumsum(probs)
    r = rng.random() * cdf[-1]
    return int(np.searchsorted(cdf, r, side="right").clip(0, len(probs) - 1))


def sample_trajectory(
    target: TargetDist, start: np.ndarray, rng: np.random.Generator
) -> Trajectory:
    """Sample one unmasking path from ``start`` under ``target``.

    Jump times are the sorted order statistics of iid uniforms, matching the
    shared linear unmasking schedule; they are recorded but never used.
    """
    space = target.space
    state = space.validate_state(start).copy()
    n0 = int(np.count_nonzero(state))
    steps = space.length - n0
    times = np.sort(rng.random(steps))
    events = []
    index = space.encode(state)
    for k in range(steps):
        probs = target.probs(index)
        flat = _categorical_flat(rng, probs.ravel())
        p, v = divmod(flat, space.vocab_size)
        v += 1
        state[p] = v
        index += v * int(space._powers[p])
        events.append(
            JumpEvent(jump_index=n0 + k + 1, position=p, token=v, time=float(times[k]))
        )
    return Trajectory(space=space, start=space.validate_state(start), events=tuple(events))


# ----------------------------------------------------------------------
# exact push-forward
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LevelMarginals:
    """Exact state marginals per jump level, from ``start_level`` to N.

    ``tables[n]`` is aligned with ``space.level_states(n)`` (canonical
    enumeration order).
    """

    space: ProductSpace
    start_level: int
    tables: dict[int, np.ndarray] = field(repr=False)

    def table(self, n: int) -> np.ndarray:
        return self.tables[n]


def _level_positions(space: ProductSpace, n: int) -> dict[int, int]:
    """Map state index -> offset within the canonical level-n enumeration."""
    return {int(ix): i for i, ix in enumerate(space.level_states(n))}


def push_forward_marginals(
    target: TargetDist,
    start: np.ndarray | None = None,
    cap: int = DEFAULT_STATE_CAP,
) -> LevelMarginals:
    """Exact per-level marginals of the jump chain started at ``start``.

    Raises :class:`SpaceTooLargeError` when the enumerated levels would hold
    more than ``cap`` states in total.
    """
    space = target.space
    if start is None:
        start = space.full_mask()
    start = space.validate_state(start)
    n0 = int(np.count_nonzero(start))
    total = sum(space.level_size(n) for n in range(n0, space.length + 1))
    if total > cap:
        raise SpaceTooLargeError(
            f"push-forward would enumerate {total} states (cap {cap})"
        )

    tables: dict[int, np.ndarray] = {}
    current = np.zeros(space.level_size(n0))
    current[_level_positions(space, n0)[space.encode(start)]] = 1.0
    tables[n0] = current

    for n in range(n0, space.length):
        idxs = space.level_states(n)
        active = current > 0
        act_idx = idxs[active]
        probs = target.probs_batch(act_idx)  # (A, N, M)
        succ = space.successor_index_grid(act_idx)  # (A, N, M)
        contrib = current[active][:, None, None] * probs
        # only masked positions carry mass; unmasked slots have prob 0
        digits = space.decode_batch(act_idx)
        valid = (digits == MASK)[:, :, None] & (contrib > 0)
        flat_succ = succ[valid]
        flat_mass = contrib[valid]

        next_order = space.level_states(n + 1)
        sorter = np.argsort(next_order, kind="stable")
        pos = sorter[np.searchsorted(next_order, flat_succ, sorter=sorter)]
        nxt = np.zeros(space.level_size(n + 1))
        np.add.at(nxt, pos, flat_mass)
        s = nxt.sum()
        if abs(s - 1.0) > SUM_TOL * max(1, n + 1 - n0):
            raise MalformedDistributionError(
                f"level-{n + 1} marginal sums to {s!r}"
            )
        tables[n + 1] = nxt
        current = nxt
    return LevelMarginals(space=space, start_level=n0, tables=tables)


# ----------------------------------------------------------------------
# path ratios and divergences
# ----------------------------------------------------------------------
def log_path_ratio(numer: TargetDist, denom: TargetDist, traj: Trajectory) -> float:
    """log of (path probability under ``numer`` / under ``denom``).

    Returns ``-inf`` when the numerator assigns the path zero probability;
    raises :class:`RatioUndefinedError` when the denominator does (the ratio
    has no finite or zero value).
    """
    space = traj.space
    state = traj.start.copy()
    index = space.encode(state)
    total = 0.0
    for ev in traj.events:
        pn = numer.prob_of(index, ev.position, ev.token)
        pd = denom.prob_of(index, ev.position, ev.token)
        if pd == 0.0:
            raise RatioUndefinedError(
                f"denominator assigns zero probability to jump "
                f"(position {ev.position}, token {ev.token}) at state {index}"
            )
        if pn == 0.0:
            return float("-inf")
        total += np.log(pn) - np.log(pd)
        state[ev.position] = ev.token
        index += ev.token * int(space._powers[ev.position])
    return float(total)


def log_path_prob(target: TargetDist, traj: Trajectory) -> float:
    """log path probability of a trajectory's jump sequence under ``target``."""
    space = traj.space
    index = space.encode(traj.start)
    total = 0.0
    for ev in traj.events:
        p = target.prob_of(index, ev.position, ev.token)
        if p == 0.0:
            return float("-inf")
        total += np.log(p)
        index += ev.token * int(space._powers[ev.position])
    return float(total)


def path_kl(
    a: TargetDist,
    b: TargetDist,
    start: np.ndarray | None = None,
    cap: int = DEFAULT_STATE_CAP,
) -> float:
    """Exact KL divergence between the path laws of ``a`` and ``b``.

    Computed level by level: KL = sum over levels n and states x of
    p_a,n(x) * KL(a(.|x) || b(.|x)).  Support violations return ``inf``.
    """
    space = a.space
    if start is None:
        start = space.full_mask()
    marg = push_forward_marginals(a, start=start, cap=cap)
    total = 0.0
    for n in range(marg.start_level, space.length):
        idxs = space.level_states(n)
        mass = marg.table(n)
        active = mass > 0
        if not active.any():
            continue
        pa = a.probs_batch(idxs[active])
        pb = b.probs_batch(idxs[active])
        viol = (pa > 0) & (pb == 0)
        if viol.any():
            return float("inf")
        sel = pa > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(sel, pa * (np.log(np.where(sel, pa, 1.0)) -
                                        np.log(np.where(sel, pb, 1.0))), 0.0)
        total += float((mass[active] * terms.sum(axis=(1, 2))).sum())
    return total


def marginal_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) between two aligned probability vectors.

    Zero-mass p entries contribute nothing; p > 0 where q = 0 yields ``inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise MalformedDistributionError(f"shape mismatch {p.shape} vs {q.shape}")
    for name, arr in (("p", p), ("q", q)):
        if not np.all(np.isfinite(arr)) or arr.min() < 0:
            raise MalformedDistributionError(f"{name} has negative or non-finite mass")
        if abs(arr.sum() - 1.0) > SUM_TOL:
            raise MalformedDistributionError(f"{name} sums to {arr.sum()!r}")
    sel = p > 0
    if np.any(sel & (q == 0)):
        return float("inf")
    return float(np.sum(p[sel] * (np.log(p[sel]) - np.log(q[sel]))))


# ----------------------------------------------------------------------
# Dynkin-style function estimation
# ----------------------------------------------------------------------
def dynkin_functional(f: np.ndarray, target: TargetDist, traj: Trajectory) -> float:
    """Per-trajectory estimate of f(start): terminal value minus compensator.

    The compensator subtracts, at each visited state, the expected one-jump
    increment of ``f`` under ``target``; its expectation telescopes so the
    functional is unbiased for ``f[start]``.
    """
    space = traj.space
    f = np.asarray(f, dtype=np.float64)
    index = space.encode(traj.start)
    correction = 0.0
    for ev in traj.events:
        probs = target.probs(index)
        succ = space.successor_index_grid(np.asarray([index]))[0]
        sel = probs > 0
        correction += float(np.sum(probs[sel] * (f[succ[sel]] - f[index])))
        index += ev.token * int(space._powers[ev.position])
    return float(f[index] - correction)


def dynkin_estimate(
    f: np.ndarray,
    target: TargetDist,
    start: np.ndarray,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo mean of :func:`dynkin_functional` over sampled paths.

    Converges to ``f[encode(start)]`` as ``trials`` grows.
    """
    total = 0.0
    for _ in range(trials):
        traj = sample_trajectory(target, start, rng)
        total += dynkin_functional(f, target, traj)
    return total / trials
