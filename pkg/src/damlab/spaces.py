"""Product token spaces with a designated mask symbol.

A state is a length-``N`` vector of tokens.  Token ``0`` is the mask; content
tokens are ``1..M``.  States are addressed by a mixed-radix integer index with
radix ``M + 1`` and position 0 as the most significant digit, so the fully
masked state is always index 0.  The *level* of a state is its number of
unmasked (non-mask) positions; generation moves from level 0 (all masks) to
level N (no masks) by unmasking one position per jump.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidLevelError, InvalidTokenError, SpaceTooLargeError

MASK = 0

# Indices must fit in int64 for vectorized arithmetic.
_MAX_INDEX = 2**62


@dataclass(frozen=True)
class Successor:
    """One unmasking move: write ``token`` at masked ``position``."""

    position: int
    token: int
    state: np.ndarray
    index: int


@dataclass(frozen=True)
class ProductSpace:
    """The state space of a masked sequence model: ``{mask, 1..M}^N``.

    Parameters
    ----------
    vocab_size:
        Number of content tokens M (mask excluded).
    length:
        Sequence length N.
    """

    vocab_size: int
    length: int
    _powers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise InvalidTokenError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.length < 1:
            raise InvalidLevelError(f"length must be >= 1, got {self.length}")
        if (self.vocab_size + 1) ** self.length > _MAX_INDEX:
            raise SpaceTooLargeError(
                f"(M+1)^N = {(self.vocab_size + 1) ** self.length} exceeds the "
                f"int64 index range"
            )
        radix = self.vocab_size + 1
        powers = radix ** np.arange(self.length - 1, -1, -1, dtype=np.int64)
        object.__setattr__(self, "_powers", powers)

    # ------------------------------------------------------------------
    # basic geometry
    # ------------------------------------------------------------------
    @property
    def radix(self) -> int:
        return self.vocab_size + 1

    @property
    def num_states(self) -> int:
        return self.radix**self.length

    @property
    def mask_id(self) -> int:
        return MASK

    def full_mask(self) -> np.ndarray:
        """The level-0 start state (all positions masked)."""
        return np.zeros(self.length, dtype=np.int64)

    def level_size(self, n: int) -> int:
        """Number of states with exactly ``n`` unmasked positions."""
        self._check_level(n)
        return math.comb(self.length, n) * self.vocab_size**n

    def _check_level(self, n: int) -> None:
        if not 0 <= n <= self.length:
            raise InvalidLevelError(
                f"level {n} outside [0, {self.length}] for length-{self.length} space"
            )

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------
    def validate_state(self, tokens: np.ndarray) -> np.ndarray:
        arr = np.asarray(tokens)
        if arr.shape != (self.length,):
            raise InvalidTokenError(
                f"state must have shape ({self.length},), got {arr.shape}"
            )
        if not np.issubdtype(arr.dtype, np.integer):
            raise InvalidTokenError(f"state tokens must be integers, got {arr.dtype}")
        if arr.min() < 0 or arr.max() > self.vocab_size:
            raise InvalidTokenError(
                f"tokens must lie in [0, {self.vocab_size}], got {arr.tolist()}"
            )
        return arr.astype(np.int64)

    def encode(self, tokens: np.ndarray) -> int:
        """Mixed-radix index of a state (position 0 most significant)."""
        arr = self.validate_state(tokens)
        return int(arr @ self._powers)

    def decode(self, index: int) -> np.ndarray:
        """Inverse of :meth:`encode`."""
        if not 0 <= index < self.num_states:
            raise InvalidTokenError(
                f"state index {index} outside [0, {self.num_states})"
            )
        return (index // self._powers) % self.radix

    def encode_batch(self, tokens: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`encode` over rows of a (B, N) token array."""
        return np.asarray(tokens, dtype=np.int64) @ self._powers

    def decode_batch(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`decode`; returns a (B, N) token array."""
        idx = np.asarray(indices, dtype=np.int64)
        return (idx[:, None] // self._powers[None, :]) % self.radix

    # ------------------------------------------------------------------
    # levels
    # ------------------------------------------------------------------
    def level(self, tokens: np.ndarray) -> int:
        """Number of unmasked positions of a state."""
        return int(np.count_nonzero(self.validate_state(tokens)))

    def level_of_index(self, index: int) -> int:
        return int(np.count_nonzero(self.decode(index)))

    def levels_of_indices(self, indices: np.ndarray) -> np.ndarray:
        return np.count_nonzero(self.decode_batch(indices), axis=1)

    # ------------------------------------------------------------------
    # successors
    # ------------------------------------------------------------------
    def unmask_successors(self, tokens: np.ndarray) -> list[Successor]:
        """All single-position unmaskings of a state, ordered by (position, token)."""
        arr = self.validate_state(tokens)
        base_index = int(arr @ self._powers)
        out: list[Successor] = []
        for p in range(self.length):
            if arr[p] != MASK:
                continue
            for v in range(1, self.vocab_size + 1):
                succ = arr.copy()
                succ[p] = v
                out.append(
                    Successor(
                        position=p,
                        token=v,
                        state=succ,
                        index=base_index + v * int(self._powers[p]),
                    )
                )
        return out

    def successor_index_grid(self, indices: np.ndarray) -> np.ndarray:
        """Successor indices for each (state, position, token) triple.

        Returns a (B, N, M) int64 array: entry [b, p, v-1] is the index of
        state ``indices[b]`` with token ``v`` written at position ``p``.  Only
        meaningful where position ``p`` is masked in the source state; other
        entries are arithmetic garbage and must be masked by the caller.
        """
        idx = np.asarray(indices, dtype=np.int64)
        v = np.arange(1, self.vocab_size + 1, dtype=np.int64)
        return idx[:, None, None] + v[None, None, :] * self._powers[None, :, None]

    # ------------------------------------------------------------------
    # enumeration
    # ------------------------------------------------------------------
    def enumerate_level(self, n: int) -> Iterator[np.ndarray]:
        """Yield all level-``n`` states in canonical order.

        Canonical order is lexicographic over (set of unmasked positions,
        token assignment): position subsets in combination order, then token
        digits lexicographically.
        """
        self._check_level(n)
        for positions in itertools.combinations(range(self.length), n):
            for values in itertools.product(range(1, self.vocab_size + 1), repeat=n):
                state = np.zeros(self.length, dtype=np.int64)
                for p, v in zip(positions, values):
                    state[p] = v
                yield state

    def level_states(self, n: int) -> np.ndarray:
        """Indices of all level-``n`` states in canonical enumeration order."""
        self._check_level(n)
        chunks = []
        v = np.arange(1, self.vocab_size + 1, dtype=np.int64)
        for positions in itertools.combinations(range(self.length), n):
            # indices are sums over chosen positions of token * powers[p];
            # build with an outer-sum mesh so token digits vary lexicographically
            block = np.zeros(1, dtype=np.int64)
            for p in positions:
                block = (block[:, None] + (v * self._powers[p])[None, :]).ravel()
            chunks.append(block)
        return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)

    def reachable_from(self, tokens: np.ndarray) -> int:
        """Number of states reachable from ``tokens`` (inclusive)."""
        n = self.level(tokens)
        return self.radix ** (self.length - n)
