"""Synthetic grid benchmarks, bias/variance sweeps, and run orchestration.

The benchmark state space is two positions over a 91-token vocabulary, read as
a 91x91 grid of final states.  Rewards are defined as tables over that grid,
the terminal loss is their negation, and each run bundle contains everything a
plotting front end needs: the metric CSV, exact per-level histograms for the
base, the tilted optimum, and the trained model, the model checkpoint, and a
manifest describing how the bundle was produced.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .ctmc import TargetDist, push_forward_marginals, uniform_base
from .errors import ConfigError, InvalidTargetError, OracleCheckError
from .model import save_model
from .oracle import (
    TiltedDistribution,
    compute_tilted_distribution,
    compute_value_table,
    expand_terminal_loss,
    log_expected_terminal_tilt,
)
from .spaces import MASK, ProductSpace
from .trainer import TrainConfig, TrainResult, metrics_to_csv, train
from .adjoint import STUDY_CSV_HEADER, StudyRecord, estimator_bias_variance_study
from .version import VERSION

__all__ = [
    "GRID_SIZE",
    "ExperimentResult",
    "ExperimentSpec",
    "GridReward",
    "benchmark_spec",
    "checkerboard_reward",
    "custom_reward",
    "grid_space",
    "level_histogram",
    "load_histogram",
    "pinwheel_reward",
    "preflight_oracle_checks",
    "run_bias_variance_study",
    "run_experiment",
    "write_manifest",
]

GRID_SIZE = 91

#: file names inside a run bundle (a stable contract for downstream tooling)
BUNDLE_METRICS = "metrics.csv"
BUNDLE_MANIFEST = "manifest.json"
BUNDLE_CHECKPOINT = "model.ckpt"
BUNDLE_HISTOGRAMS = {
    ("base", 1): "hist_base_level1.json",
    ("base", 2): "hist_base_level2.json",
    ("star", 1): "hist_star_level1.json",
    ("star", 2): "hist_star_level2.json",
    ("model", 1): "hist_model_level1.json",
    ("model", 2): "hist_model_level2.json",
}


def grid_space() -> ProductSpace:
    """The benchmark space: two positions, 91 tokens each."""
    return ProductSpace(vocab_size=GRID_SIZE, length=2)


# ----------------------------------------------------------------------
# rewards
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class GridReward:
    """A reward table r over the grid of final states; terminal loss is -r."""

    kind: str  # "checkerboard" | "pinwheel" | "custom-table"
    table: np.ndarray  # (GRID_SIZE, GRID_SIZE)

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.shape != (GRID_SIZE, GRID_SIZE):
            raise InvalidTargetError(
                f"reward table shape {table.shape} != ({GRID_SIZE}, {GRID_SIZE})"
            )
        if not np.all(np.isfinite(table)):
            raise InvalidTargetError("reward table must be finite everywhere")
        object.__setattr__(self, "table", table)

    def terminal_loss(self, space: ProductSpace) -> np.ndarray:
        """Expanded per-state terminal loss g = -r (zero off the terminal level)."""
        if space.vocab_size != GRID_SIZE or space.length != 2:
            raise InvalidTargetError("grid rewards require the 91x91 benchmark space")
        # canonical terminal order is ascending in state index, i.e. row-major
        # over (token0, token1)
        return expand_terminal_loss(space, (-self.table).ravel())

    def sha256(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.table, dtype="<f8").tobytes()
        ).hexdigest()


def checkerboard_reward(
    block: int = 13, diagonal: float = 4.6, adjacent: float = 4.0, far: float = 3.4
) -> GridReward:
    """Blockwise-constant reward: a 7x7 checkerboard of 13x13 blocks.

    Diagonal blocks carry the largest reward, blocks one step off the diagonal
    a middle value, and all remaining blocks the smallest.  The default block
    size is the unique one that tiles the 91-cell axis into 7 equal blocks.
    """
    if GRID_SIZE % block != 0:
        raise InvalidTargetError(f"block size {block} does not tile {GRID_SIZE}")
    blocks = np.arange(GRID_SIZE) // block
    bi = blocks[:, None]
    bj = blocks[None, :]
    table = np.where(
        bi == bj, diagonal, np.where(np.abs(bi - bj) == 1, adjacent, far)
    ).astype(np.float64)
    return GridReward(kind="checkerboard", table=table)


def pinwheel_reward(
    radius: float = 12.0,
    ring_radius: float = 27.0,
    angles_deg: tuple[float, float, float] = (90.0, 210.0, 330.0),
    weights: tuple[float, float, float] = (0.5, -1.0, -20.0),
) -> GridReward:
    """Three disjoint circles on a ring around the grid center, zero elsewhere.

    The circle centers sit at the given angles on a ring around the central
    cell; each circle carries its own constant reward.  The defaults keep the
    circles disjoint and fully inside the grid.
    """
    center = (GRID_SIZE - 1) / 2.0
    ii, jj = np.meshgrid(
        np.arange(GRID_SIZE), np.arange(GRID_SIZE), indexing="ij"
    )
    table = np.zeros((GRID_SIZE, GRID_SIZE))
    claimed = np.zeros_like(table, dtype=bool)
    for angle, weight in zip(angles_deg, weights):
        theta = np.deg2rad(angle)
        ci = center + ring_radius * np.cos(theta)
        cj = center + ring_radius * np.sin(theta)
        inside = (ii - ci) ** 2 + (jj - cj) ** 2 <= radius**2
        if np.any(inside & claimed):
            raise InvalidTargetError("pinwheel circles overlap; shrink the radius")
        claimed |= inside
        table[inside] = weight
    return GridReward(kind="pinwheel", table=table)


def custom_reward(table: np.ndarray) -> GridReward:
    return GridReward(kind="custom-table", table=table)


# ----------------------------------------------------------------------
# histograms
# ----------------------------------------------------------------------
def level_histogram(space: ProductSpace, level: int, probs: np.ndarray) -> dict:
    """Histogram JSON payload for one level's marginal.

    Terminal level: a (91, 91) grid over content-token pairs.  Intermediate
    levels keep the mask axis: a (92, 92) grid over raw token values, nonzero
    only at states of that level.
    """
    states = space.level_states(level)
    if probs.shape != states.shape:
        raise InvalidTargetError(
            f"level {level} has {len(states)} states, got {len(probs)} probabilities"
        )
    tokens = space.decode_batch(states)
    if level == space.length:
        grid = np.zeros((space.vocab_size, space.vocab_size))
        grid[tokens[:, 0] - 1, tokens[:, 1] - 1] = probs
    else:
        grid = np.zeros((space.radix, space.radix))
        grid[tokens[:, 0], tokens[:, 1]] = probs
    return {
        "level": level,
        "shape": list(grid.shape),
        "probs": grid.ravel().tolist(),
    }


def load_histogram(path: Path) -> tuple[int, np.ndarray]:
    """Read a histogram JSON back as (level, grid array); strict on schema."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read histogram {path}: {exc}") from exc
    for key in ("level", "shape", "probs"):
        if key not in payload:
            raise ConfigError(f"histogram {path} missing key {key!r}")
    shape = tuple(payload["shape"])
    probs = np.asarray(payload["probs"], dtype=np.float64)
    if probs.size != int(np.prod(shape)):
        raise ConfigError(
            f"histogram {path}: {probs.size} probabilities do not fill shape {shape}"
        )
    return int(payload["level"]), probs.reshape(shape)


# ----------------------------------------------------------------------
# preflight
# ----------------------------------------------------------------------
def preflight_oracle_checks(
    base: TargetDist, g: np.ndarray, tolerance: float = 1e-9
) -> dict[str, float]:
    """Verify the oracle identities on this problem before any training.

    Checks: the backward value recursion agrees with an independent forward
    evaluation at the start state; the tilted jump law normalizes (the
    self-consistency of the value table); and the tilted final marginal is a
    probability vector.  Returns the residuals; raises OracleCheckError if
    any exceeds ``tolerance``.
    """
    space = base.space
    vt = compute_value_table(base, g)
    start = space.full_mask()
    backward = float(vt.log_neg_exp_v[space.encode(start)])  # -V by recursion
    forward = float(log_expected_terminal_tilt(base, g, start))  # -V by summation
    route_gap = abs(forward - backward) / max(1.0, abs(backward))

    # jump-law normalization == the value recursion restated; probe a spread
    # of non-terminal states (the full mask plus the first/last of each level)
    hjb_gap = 0.0
    for n in range(space.length):
        states = space.level_states(n)
        probe = np.unique(states[[0, len(states) // 2, -1]])
        probs = base.probs_batch(probe)
        succ = space.successor_index_grid(probe)
        digits = space.decode_batch(probe)
        for r, x in enumerate(probe):
            masked = digits[r] == MASK
            rates = probs[r][masked]
            children = succ[r][masked]
            total = float(
                (rates * np.exp(vt.log_neg_exp_v[children] - vt.log_neg_exp_v[x])).sum()
            )
            hjb_gap = max(hjb_gap, abs(total - 1.0))

    tilted = compute_tilted_distribution(base, g)
    mass_gap = max(
        abs(float(tilted.p_star_levels.table(n).sum()) - 1.0)
        for n in range(space.length + 1)
    )

    residuals = {
        "value_route_gap": route_gap,
        "jump_law_normalization_gap": hjb_gap,
        "tilted_mass_gap": mass_gap,
    }
    bad = {k: v for k, v in residuals.items() if not (v < tolerance)}
    if bad:
        raise OracleCheckError(f"oracle identities failed: {bad}")
    return residuals


# ----------------------------------------------------------------------
# experiment orchestration
# ----------------------------------------------------------------------
@dataclass
class ExperimentSpec:
    """Everything that determines a benchmark run.

    The RNG seed inside ``config`` fully determines the run: two runs of the
    same spec produce byte-identical metric CSVs (wall-clock timing is kept
    out of the CSV unless explicitly enabled).
    """

    problem: str
    reward: GridReward
    config: TrainConfig
    base: TargetDist | None = None  # None -> uniform base on the grid space
    out_dir: str | None = None

    @property
    def seed(self) -> int:
        return self.config.seed


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    result: TrainResult
    tilted: TiltedDistribution
    out_dir: Path
    files: dict[str, str]
    manifest: dict


def write_manifest(path: Path, payload: dict) -> dict:
    payload = dict(payload)
    payload.setdefault("version", VERSION)
    payload.setdefault("rng", "philox")
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def benchmark_spec(
    problem: str, seed: int = 0, steps: int = 20000, out_dir: str | None = None
) -> ExperimentSpec:
    """The tuned configuration for a named benchmark problem."""
    if problem == "checkerboard":
        reward, k = checkerboard_reward(), 16
    elif problem == "pinwheel":
        reward, k = pinwheel_reward(), 64
    else:
        raise ConfigError(f"unknown benchmark problem {problem!r}")
    config = TrainConfig(
        k=k,
        batch_size=128,
        lr=1e-2,
        steps=steps,
        seed=seed,
        metric_interval=100,
    )
    return ExperimentSpec(problem=problem, reward=reward, config=config, out_dir=out_dir)


def run_experiment(
    spec: ExperimentSpec,
    out_dir: str | Path | None = None,
    on_metric=None,
    manifest_extra: dict | None = None,
) -> ExperimentResult:
    """Oracle preflight, training, and bundle assembly for one experiment.

    The manifest is written (status "running") before any heavy work so a
    crashed run still leaves a record, then finalized with timings, final
    KL values, and the produced file list.  ``manifest_extra`` entries are
    merged into the manifest verbatim (front ends use this to record how
    the run was invoked).
    """
    out = Path(out_dir if out_dir is not None else (spec.out_dir or "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc

    space = grid_space()
    base = spec.base if spec.base is not None else uniform_base(space)
    if base.space != space:
        raise InvalidTargetError("experiment base must live on the benchmark space")
    g = spec.reward.terminal_loss(space)

    manifest_path = out / BUNDLE_MANIFEST
    manifest = write_manifest(
        manifest_path,
        {
            "status": "running",
            "problem": spec.problem,
            "reward_kind": spec.reward.kind,
            "reward_sha256": spec.reward.sha256(),
            "seed": spec.seed,
            "config": asdict(spec.config),
            "started_utc": datetime.now(timezone.utc).isoformat(),
            **(manifest_extra or {}),
        },
    )

    t0 = time.perf_counter()
    checks = preflight_oracle_checks(base, g)
    tilted = compute_tilted_distribution(base, g)
    result = train(spec.config, base, g, oracle=tilted, on_metric=on_metric)
    seconds_total = time.perf_counter() - t0

    files: dict[str, str] = {}

    csv_text = metrics_to_csv(
        result.records, space.length, wall_clock=spec.config.wall_clock_in_csv
    )
    (out / BUNDLE_METRICS).write_text(csv_text)
    files["metrics"] = BUNDLE_METRICS

    save_model(result.model, out / BUNDLE_CHECKPOINT)
    files["checkpoint"] = BUNDLE_CHECKPOINT

    marginals = {
        "base": push_forward_marginals(base),
        "star": tilted.p_star_levels,
        "model": push_forward_marginals(result.model),
    }
    for (tag, level), name in BUNDLE_HISTOGRAMS.items():
        payload = level_histogram(space, level, marginals[tag].table(level))
        payload["distribution"] = tag
        payload["problem"] = spec.problem
        (out / name).write_text(json.dumps(payload) + "\n")
        files[f"hist_{tag}_level{level}"] = name

    final = result.records[-1]
    manifest = write_manifest(
        manifest_path,
        {
            **manifest,
            "status": "complete",
            "finished_utc": datetime.now(timezone.utc).isoformat(),
            "seconds_total": seconds_total,
            "oracle_checks": checks,
            "final_step": final.step,
            "final_loss": final.loss,
            "final_kl_levels": list(final.kl_levels),
            "skipped_samples": result.skipped,
            "files": files,
        },
    )
    return ExperimentResult(
        spec=spec,
        result=result,
        tilted=tilted,
        out_dir=out,
        files=files,
        manifest=manifest,
    )


# ----------------------------------------------------------------------
# bias/variance sweep
# ----------------------------------------------------------------------
def run_bias_variance_study(
    k_values,
    theta: float,
    phi: float,
    c_values,
    trials: int,
    seed: int,
) -> tuple[str, list[StudyRecord]]:
    """Sweep the single-unmasking estimator study over K and loss scale.

    Returns the CSV text (header included) and the underlying records; rows
    are ordered by loss scale, then K, with both estimator variants per cell.
    Each cell gets its own deterministic sub-seed derived from ``seed``.
    """
    k_values = [int(k) for k in k_values]
    c_values = [float(c) for c in c_values]
    if not k_values or not c_values:
        raise InvalidTargetError("need at least one K and one loss scale")
    cells = [(c, k) for c in c_values for k in k_values]
    sub_seeds = np.random.SeedSequence(seed).generate_state(len(cells))
    records: list[StudyRecord] = []
    for (c, k), sub in zip(cells, sub_seeds):
        records.extend(
            estimator_bias_variance_study(theta, phi, c, k, trials, int(sub))
        )
    lines = [STUDY_CSV_HEADER] + [r.csv_row() for r in records]
    return "\n".join(lines) + "\n", records
