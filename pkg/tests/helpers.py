"""Shared test oracles, kept independent of the library's production paths.

Everything here recomputes quantities by brute force (explicit path
enumeration, direct tilting) so library outputs can be checked against an
implementation that shares no code with them.
"""

from __future__ import annotations

import numpy as np

from damlab.ctmc import JumpEvent, TableTargetDist, TargetDist, Trajectory
from damlab.spaces import MASK, ProductSpace


def make_trajectory(space: ProductSpace, start, moves) -> Trajectory:
    """Build a Trajectory from (position, token) moves with synthetic times."""
    start = space.validate_state(np.asarray(start))
    n0 = int(np.count_nonzero(start))
    steps = len(moves)
    events = tuple(
        JumpEvent(
            jump_index=n0 + k + 1,
            position=p,
            token=v,
            time=(k + 1) / (steps + 1),
        )
        for k, (p, v) in enumerate(moves)
    )
    return Trajectory(space=space, start=start, events=events)


def enumerate_paths(target: TargetDist, start) -> list[tuple[float, Trajectory]]:
    """All complete unmasking paths from ``start`` with their probabilities.

    Exponential in the number of masked positions; intended for M, N <= 3.
    """
    space = target.space
    start = space.validate_state(np.asarray(start))
    out: list[tuple[float, Trajectory]] = []

    def recurse(state: np.ndarray, prob: float, moves: list[tuple[int, int]]) -> None:
        if np.count_nonzero(state) == space.length:
            out.append((prob, make_trajectory(space, start, list(moves))))
            return
        table = target.probs(space.encode(state))
        for p in range(space.length):
            if state[p] != MASK:
                continue
            for v in range(1, space.vocab_size + 1):
                q = float(table[p, v - 1])
                if q == 0.0:
                    continue
                nxt = state.copy()
                nxt[p] = v
                moves.append((p, v))
                recurse(nxt, prob * q, moves)
                moves.pop()

    recurse(start.copy(), 1.0, [])
    return out


def final_marginal_by_paths(target: TargetDist, start=None) -> np.ndarray:
    """Terminal-state law via explicit path enumeration.

    Returned in canonical terminal enumeration order (aligned with
    ``space.level_states(N)``).
    """
    space = target.space
    if start is None:
        start = space.full_mask()
    order = {int(ix): i for i, ix in enumerate(space.level_states(space.length))}
    out = np.zeros(space.level_size(space.length))
    for prob, traj in enumerate_paths(target, start):
        out[order[traj.final_index]] += prob
    return out


def level_marginal_by_paths(target: TargetDist, n: int, start=None) -> np.ndarray:
    """Level-n state law via explicit path enumeration (canonical order)."""
    space = target.space
    if start is None:
        start = space.full_mask()
    order = {int(ix): i for i, ix in enumerate(space.level_states(n))}
    out = np.zeros(space.level_size(n))
    for prob, traj in enumerate_paths(target, start):
        states = traj.states()
        n0 = int(np.count_nonzero(states[0]))
        state_n = states[n - n0]
        out[order[space.encode(state_n)]] += prob
    return out


def tilted_final_marginal(base: TargetDist, g: np.ndarray, start=None) -> np.ndarray:
    """Brute-force reward-tilted terminal law: proportional to p_base * exp(-g).

    ``g`` is aligned with canonical terminal enumeration order.
    """
    p_base = final_marginal_by_paths(base, start)
    unnorm = p_base * np.exp(-np.asarray(g, dtype=np.float64))
    return unnorm / unnorm.sum()


def random_table_dist(
    space: ProductSpace, rng: np.random.Generator, concentration: float = 1.0
) -> TableTargetDist:
    """A random fully supported jump law (Dirichlet rows over valid slots)."""
    S = space.num_states
    digits = space.decode_batch(np.arange(S, dtype=np.int64))
    masked = digits == MASK  # (S, N)
    table = np.zeros((S, space.length, space.vocab_size))
    for s in range(S):
        slots = np.flatnonzero(masked[s])
        if len(slots) == 0:
            continue
        w = rng.gamma(concentration, size=(len(slots), space.vocab_size))
        w /= w.sum()
        table[s, slots, :] = w
    return TableTargetDist(space, table)


def random_terminal_losses(
    space: ProductSpace, rng: np.random.Generator, scale: float = 2.0
) -> np.ndarray:
    """Random terminal loss values aligned with canonical terminal order."""
    return rng.normal(scale=scale, size=space.level_size(space.length))


def central_difference(fun, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fun(xp) - fun(xm)) / (2 * h)
        it.iternext()
    return grad
