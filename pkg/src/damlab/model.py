"""The trainable masked model: dense logits over (state, position, token).

A jump from state ``x`` picks a masked position uniformly at random and a
token from ``softmax(logits[x, p, :])``.  Only token probabilities are
learned; the uniform position choice matches the base family, which keeps the
optimal jump law inside the model class (its position marginal is uniform for
any factorized base) and makes the endpoint-conditional bridge an exact
uniform re-masking (:func:`reciprocal_project`).

Also here: conditional rollouts that record model and base log path
probabilities (the raw material of the importance-weighted adjoint), and the
bit-exact checkpoint container.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctmc import SUM_TOL, JumpEvent, TargetDist, Trajectory, uniform_base
from .errors import (
    ConfigError,
    IncompleteEndpointError,
    InvalidLevelError,
    InvalidTargetError,
    NoMaskedPositionError,
)
from .spaces import MASK, ProductSpace

POSITION_POLICY = "uniform"

_CKPT_MAGIC = b"DAMLAB-CKPT v1\n"


class LogitsModel(TargetDist):
    """Dense-tensor masked model: ``Q(p, v | x) = softmax(logits[x,p,:])[v] / m(x)``.

    ``m(x)`` is the number of masked positions.  Logit slots at unmasked
    positions and at terminal states exist for dense addressing but are never
    read or trained.
    """

    def __init__(self, space: ProductSpace, logits: np.ndarray):
        expected = (space.num_states, space.length, space.vocab_size)
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != expected:
            raise InvalidTargetError(f"logits shape {logits.shape} != {expected}")
        self.space = space
        self.logits = logits
        digits = space.decode_batch(np.arange(space.num_states, dtype=np.int64))
        self._masked = digits == MASK  # (S, N)
        self._mask_counts = self._masked.sum(axis=1)  # (S,)

    # -- constructors ----------------------------------------------------
    @classmethod
    def zeros(cls, space: ProductSpace) -> "LogitsModel":
        """Uniform initialization: identical to the uniform base model."""
        return cls(space, np.zeros((space.num_states, space.length, space.vocab_size)))

    @classmethod
    def from_target(cls, target: TargetDist) -> "LogitsModel":
        """Logits whose jump law reproduces ``target`` exactly.

        Requires ``target`` to give every masked position equal total weight
        (the uniform-position family this model parametrizes).
        """
        space = target.space
        logits = np.zeros((space.num_states, space.length, space.vocab_size))
        model = cls(space, logits)
        masked, counts = model._masked, model._mask_counts
        nonterm = np.flatnonzero(counts > 0)
        probs = target.probs_batch(nonterm)  # (A, N, M)
        pos_mass = probs.sum(axis=2)  # (A, N)
        expect = np.where(masked[nonterm], 1.0 / counts[nonterm][:, None], 0.0)
        if np.max(np.abs(pos_mass - expect)) > 1e-9:
            raise InvalidTargetError(
                "target is not position-uniform; it cannot be represented by "
                "a uniform-position logits model"
            )
        cond = probs * counts[nonterm][:, None, None]  # token law per position
        with np.errstate(divide="ignore"):
            rows = np.where(masked[nonterm][:, :, None], np.log(cond), 0.0)
        logits[nonterm] = rows
        return model

    def copy(self) -> "LogitsModel":
        return LogitsModel(self.space, self.logits.copy())

    # -- jump law ----------------------------------------------------------
    def token_softmax(self, indices: np.ndarray) -> np.ndarray:
        """(B,) indices -> (B, N, M) token law per masked position (sums to 1)."""
        idx = np.asarray(indices, dtype=np.int64)
        rows = self.logits[idx]  # (B, N, M)
        shifted = rows - rows.max(axis=2, keepdims=True)
        e = np.exp(shifted)
        e *= self._masked[idx][:, :, None]
        tot = e.sum(axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(tot > 0, e / tot, 0.0)
        return out

    def probs_batch(self, indices: np.ndarray) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        sm = self.token_softmax(idx)
        counts = self._mask_counts[idx].astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            weight = np.where(counts > 0, 1.0 / counts, 0.0)
        return sm * weight[:, None, None]

    def as_table(self) -> np.ndarray:
        """Dense (S, N, M) jump-probability tensor (zeros at terminal states)."""
        return self.probs_batch(np.arange(self.space.num_states, dtype=np.int64))


def model_q(model: LogitsModel, x: np.ndarray) -> np.ndarray:
    """The model's jump law at state ``x`` as an (N, M) probability table."""
    space = model.space
    tokens = space.validate_state(x)
    if np.count_nonzero(tokens) == space.length:
        raise NoMaskedPositionError(
            f"state {tokens.tolist()} is fully unmasked; it has no jump law"
        )
    return model.probs(space.encode(tokens))


# ----------------------------------------------------------------------
# vectorized rollouts
# ----------------------------------------------------------------------
def _categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of a (B, C) nonnegative matrix."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return (cdf < u[:, None]).sum(axis=1)


def rollout_indices(
    model: TargetDist,
    base: TargetDist,
    indices: np.ndarray,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Continue every chain in ``indices`` to full unmasking under ``model``.

    Returns per-step event records and per-step log probabilities under both
    ``model`` and ``base``.  Chains may start at different levels; finished
    chains simply stop accruing steps (their padding rows are -1 / 0).

    Keys: ``finals (B,)``, ``steps (B,)``, ``positions (B, T)``,
    ``tokens (B, T)``, ``log_q_model (B, T)``, ``log_q_base (B, T)`` where T
    is the maximum number of jumps any chain needed.
    """
    space = model.space
    idx = np.asarray(indices, dtype=np.int64).copy()
    B = len(idx)
    levels = space.levels_of_indices(idx)
    total_steps = space.length - levels
    T = int(total_steps.max()) if B else 0
    positions = np.full((B, T), -1, dtype=np.int64)
    tokens = np.zeros((B, T), dtype=np.int64)
    lq_model = np.zeros((B, T))
    lq_base = np.zeros((B, T))
    powers = space._powers

    for t in range(T):
        active = np.flatnonzero(total_steps > t)
        if len(active) == 0:
            break
        act_idx = idx[active]
        p_model = model.probs_batch(act_idx)  # (A, N, M)
        flat_choice = _categorical_rows(rng, p_model.reshape(len(active), -1))
        pos, tok = np.divmod(flat_choice, space.vocab_size)
        tok = tok + 1
        rows = np.arange(len(active))
        p_base = base.probs_batch(act_idx)
        positions[active, t] = pos
        tokens[active, t] = tok
        with np.errstate(divide="ignore"):
            lq_model[active, t] = np.log(p_model[rows, pos, tok - 1])
            lq_base[active, t] = np.log(p_base[rows, pos, tok - 1])
        idx[active] = act_idx + tok * powers[pos]

    return {
        "finals": idx,
        "steps": total_steps,
        "positions": positions,
        "tokens": tokens,
        "log_q_model": lq_model,
        "log_q_base": lq_base,
    }


@dataclass(frozen=True)
class ConditionalSampleBatch:
    """K model continuations from one origin state, with both path log-probs.

    ``log_q_model[k]`` / ``log_q_base[k]`` are total log path probabilities of
    continuation ``k`` under the model and under the base; per-step values are
    kept so tails of a continuation can be re-weighted independently.
    """

    space: ProductSpace
    origin: np.ndarray
    finals: np.ndarray  # (K,) state indices
    positions: np.ndarray  # (K, steps)
    tokens: np.ndarray  # (K, steps)
    step_log_q_model: np.ndarray  # (K, steps)
    step_log_q_base: np.ndarray  # (K, steps)

    @property
    def k(self) -> int:
        return len(self.finals)

    @property
    def log_q_model(self) -> np.ndarray:
        return self.step_log_q_model.sum(axis=1)

    @property
    def log_q_base(self) -> np.ndarray:
        return self.step_log_q_base.sum(axis=1)

    def trajectory(self, i: int) -> Trajectory:
        """Reconstruct continuation ``i`` (with evenly spaced bookkeeping times)."""
        n0 = int(np.count_nonzero(self.origin))
        steps = self.positions.shape[1]
        events = tuple(
            JumpEvent(
                jump_index=n0 + t + 1,
                position=int(self.positions[i, t]),
                token=int(self.tokens[i, t]),
                time=(t + 1) / (steps + 1),
            )
            for t in range(steps)
        )
        return Trajectory(space=self.space, start=self.origin.copy(), events=events)


def rollout_from(
    model: TargetDist,
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    base: TargetDist | None = None,
) -> ConditionalSampleBatch:
    """Draw ``k`` independent model continuations from ``x``.

    ``base`` defaults to the uniform masked base; both log path probabilities
    are stored per step.  A fully unmasked ``x`` yields zero-length
    continuations with log-probability 0.
    """
    space = model.space
    if k < 1:
        raise InvalidTargetError(f"k must be >= 1, got {k}")
    if base is None:
        base = uniform_base(space)
    tokens = space.validate_state(x)
    start = np.full(k, space.encode(tokens), dtype=np.int64)
    rec = rollout_indices(model, base, start, rng)
    return ConditionalSampleBatch(
        space=space,
        origin=tokens,
        finals=rec["finals"],
        positions=rec["positions"],
        tokens=rec["tokens"],
        step_log_q_model=rec["log_q_model"],
        step_log_q_base=rec["log_q_base"],
    )


# ----------------------------------------------------------------------
# endpoint bridge and level sampling
# ----------------------------------------------------------------------
def reciprocal_project(
    space: ProductSpace, x1: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Re-mask a complete state down to level ``n``, keeping a uniform subset.

    This is the exact endpoint-conditional bridge of the uniform-position
    family: given start (all masks) and end ``x1``, the set of positions
    unmasked at level ``n`` is uniform among all n-subsets.
    """
    tokens = space.validate_state(x1)
    if np.count_nonzero(tokens) != space.length:
        raise IncompleteEndpointError(
            f"endpoint {tokens.tolist()} still contains masks"
        )
    if not 0 <= n <= space.length:
        raise InvalidLevelError(f"level {n} outside [0, {space.length}]")
    keep = rng.permutation(space.length)[:n]
    out = np.zeros(space.length, dtype=np.int64)
    out[keep] = tokens[keep]
    return out


def reciprocal_project_batch(
    space: ProductSpace,
    x1_indices: np.ndarray,
    levels: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized :func:`reciprocal_project` on encoded complete states."""
    tokens = space.decode_batch(x1_indices)
    ranks = np.argsort(rng.random(tokens.shape), axis=1).argsort(axis=1)
    keep = ranks < np.asarray(levels)[:, None]
    return space.encode_batch(np.where(keep, tokens, MASK))


def sample_training_level(length: int, rng: np.random.Generator) -> int:
    """Uniform jump level in {0, ..., N-1} (the level whose jump is trained)."""
    if length < 1:
        raise InvalidLevelError(f"length must be >= 1, got {length}")
    return int(rng.integers(0, length))


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
def save_array_checkpoint(
    path: str | Path, array: np.ndarray, meta: dict
) -> None:
    """Write a flat binary checkpoint: magic, JSON metadata line, raw bytes."""
    array = np.ascontiguousarray(array, dtype="<f8")
    header = dict(meta)
    header["dtype"] = "<f8"
    header["shape"] = list(array.shape)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(array.tobytes(order="C"))


def load_array_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    """Inverse of :func:`save_array_checkpoint`; strict validation."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(_CKPT_MAGIC):
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    rest = blob[len(_CKPT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ConfigError(f"{path}: missing metadata line")
    try:
        meta = json.loads(rest[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed metadata: {exc}") from exc
    payload = rest[nl + 1:]
    try:
        shape = tuple(int(s) for s in meta["shape"])
        dtype = np.dtype(meta["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed metadata fields: {exc}") from exc
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise ConfigError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return meta, array


def save_model(model: LogitsModel, path: str | Path) -> None:
    """Checkpoint a model: (M, N, position policy, logits in index order)."""
    save_array_checkpoint(
        path,
        model.logits,
        {
            "kind": "logits",
            "vocab_size": model.space.vocab_size,
            "length": model.space.length,
            "position_policy": POSITION_POLICY,
        },
    )


def load_model(path: str | Path) -> LogitsModel:
    meta, array = load_array_checkpoint(path)
    if meta.get("kind") != "logits":
        raise ConfigError(f"{path}: checkpoint kind {meta.get('kind')!r} != 'logits'")
    if meta.get("position_policy") != POSITION_POLICY:
        raise ConfigError(
            f"{path}: unsupported position policy {meta.get('position_policy')!r}"
        )
    try:
        space = ProductSpace(int(meta["vocab_size"]), int(meta["length"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed space fields: {exc}") from exc
    try:
        return LogitsModel(space, array)
    except InvalidTargetError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
