"""Cooperative multi-player epsilon-greedy bandit over the perturbation matrix.

Every entry of the perturbation matrix is a player choosing a value from a
shared arm grid.  All players receive the same scalar reward, computed from
the recommendation lists produced by the jointly assembled perturbation.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metrics import ACCURACY, DEFAULT_ALPHA, DIVERSITY, metric_value, unit_item_vectors
from .ranking import maxabs_scale, perturbed_item_matrix, topk_recommend

_logger = logging.getLogger(__name__)

DELTA_MAGIC = b"CMBP"
DELTA_VERSION = 1


class InvalidConfigError(ValueError):
    pass


class NonFiniteRewardError(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class ArmGrid:
    values: np.ndarray
    A: float
    n_A: int

    def __post_init__(self):
        v = self.values
        if len(v) != self.n_A or not (np.diff(v) > 0).all() or v[0] != -self.A or v[-1] != self.A:
            raise InvalidConfigError("arm grid must be strictly increasing from -A to A")


def init_arms(A: float, n_A: int) -> ArmGrid:
    """``n_A`` evenly spaced values covering ``[-A, A]`` inclusive."""
    if n_A < 2:
        raise InvalidConfigError("n_A must be >= 2")
    if not A > 0:
        raise InvalidConfigError("A must be > 0")
    k = np.arange(n_A, dtype=np.float64)
    # symmetric form keeps both endpoints and, for odd n_A, the midpoint exact
    values = A * ((2.0 * k - (n_A - 1)) / (n_A - 1))
    values.setflags(write=False)
    return ArmGrid(values, float(A), int(n_A))


@dataclass
class BanditState:
    """Per-player running-mean reward of every arm and its pull count."""

    values: np.ndarray
    counts: np.ndarray
    selections: np.ndarray

    @classmethod
    def zeros(cls, n_players: int, n_arms: int) -> "BanditState":
        return cls(
            np.zeros((n_players, n_arms), dtype=np.float64),
            np.zeros((n_players, n_arms), dtype=np.uint32),
            np.zeros(n_players, dtype=np.int64),
        )

    @property
    def n_players(self) -> int:
        return self.values.shape[0]


def select_arm(values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice for a single player.

    Draws the exploration coin and a candidate random arm, in that order, so a
    one-player :func:`select_arms` call consumes the stream identically.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidConfigError("epsilon must lie in [0, 1]")
    coin = rng.random()
    random_arm = int(rng.integers(len(values)))
    return random_arm if coin < epsilon else int(np.argmax(values))


def select_arms(state: BanditState, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`select_arm` over every player (greedy ties go to the
    lowest arm index)."""
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidConfigError("epsilon must lie in [0, 1]")
    n, n_arms = state.values.shape
    coins = rng.random(n)
    random_arms = rng.integers(n_arms, size=n)
    greedy = np.argmax(state.values, axis=1)
    arms = np.where(coins < epsilon, random_arms, greedy)
    state.selections[:] = arms
    return arms


def update_arm(state: BanditState, player: int, arm: int, reward: float) -> None:
    state.counts[player, arm] += 1
    n = state.counts[player, arm]
    state.values[player, arm] += (reward - state.values[player, arm]) / n


def update_arms(state: BanditState, arms: np.ndarray, reward: float) -> None:
    """Incremental-average update of each player's selected arm."""
    rows = np.arange(state.n_players)
    state.counts[rows, arms] += 1
    n = state.counts[rows, arms].astype(np.float64)
    v = state.values[rows, arms]
    state.values[rows, arms] = v + (reward - v) / n


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveSpec:
    diversity_metric: str = "ilad"
    accuracy_metric: str | None = None
    lambda2: float = 0.9
    lambda1: float = 0.0
    K: int = 20
    alpha: float = DEFAULT_ALPHA
    split: str = "valid"

    def __post_init__(self):
        if self.diversity_metric not in DIVERSITY:
            raise InvalidConfigError(f"diversity metric must be one of {DIVERSITY}")
        if self.accuracy_metric is not None and self.accuracy_metric not in ACCURACY:
            raise InvalidConfigError(f"accuracy metric must be one of {ACCURACY}")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise InvalidConfigError("lambda2 must lie in [0, 1]")
        if self.lambda1 < 0:
            raise InvalidConfigError("lambda1 must be >= 0")


class RewardFunction:
    """Reward of a perturbation: squared objective minus an L1 penalty.

    The objective is the diversity metric alone, or
    ``lambda2 * accuracy + (1 - lambda2) * diversity`` when an accuracy metric
    is configured.  The penalty is ``lambda1`` times the mean absolute entry
    of the perturbation.  Precomputed pieces (scales, unit vectors, user
    sample) are cached on the instance.
    """

    def __init__(self, model, ds, spec: ObjectiveSpec, users=None):
        self.model = model
        self.ds = ds
        self.spec = spec
        self.users = None if users is None else np.asarray(users, dtype=np.int64)
        self.scale = maxabs_scale(model.Q)[1]
        self.unit = unit_item_vectors(model.Q) if spec.diversity_metric == "ilad" else None

    def lists(self, delta):
        Q_tilde = perturbed_item_matrix(self.model.Q, delta, self.scale)
        return topk_recommend(self.model, self.ds, self.spec.K, users=self.users, Q=Q_tilde)

    def __call__(self, delta) -> tuple[float, dict]:
        spec = self.spec
        recs = self.lists(delta)
        div = metric_value(spec.diversity_metric, recs, self.ds, spec.K, spec.split, self.unit, spec.alpha)
        if spec.accuracy_metric is not None:
            acc = metric_value(spec.accuracy_metric, recs, self.ds, spec.K, spec.split, None, spec.alpha)
            psi = spec.lambda2 * acc + (1.0 - spec.lambda2) * div
        else:
            acc = None
            psi = div
        penalty = spec.lambda1 * float(np.abs(delta).mean())
        reward = psi * psi - penalty
        return reward, {"accuracy": acc, "diversity": div, "objective": psi, "penalty": penalty}


def compute_reward(delta, model, ds, spec: ObjectiveSpec, users=None) -> tuple[float, dict]:
    return RewardFunction(model, ds, spec, users)(delta)


# ---------------------------------------------------------------------------
# optimisation loop
# ---------------------------------------------------------------------------


@dataclass
class RunTrace:
    rewards: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    delta: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "reward", "accuracy", "diversity"])
            for t, (r, s) in enumerate(zip(self.rewards, self.snapshots), start=1):
                acc = s.get("accuracy")
                div = s.get("diversity")
                w.writerow([t, repr(r), "" if acc is None else repr(acc), "" if div is None else repr(div)])


@dataclass(frozen=True)
class BanditConfig:
    A: float = 0.3
    n_A: int = 61
    epsilon: float = 0.1
    T: int = 200
    spec: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    seed: int = 0
    eval_user_sample: int | None = None

    def __post_init__(self):
        if self.T < 0:
            raise InvalidConfigError("T must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidConfigError("epsilon must lie in [0, 1]")


def run_bandit(
    reward_fn: Callable[[np.ndarray], tuple[float, dict]],
    shape: tuple[int, ...],
    grid: ArmGrid,
    epsilon: float,
    T: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, RunTrace, BanditState]:
    """Generic cooperative loop: every player picks, the assembled
    perturbation is scored once, every selected arm is updated with the shared
    reward.  A terminal greedy pass fixes the returned perturbation; with
    ``T == 0`` the all-zero initial perturbation is returned."""
    n_players = int(np.prod(shape))
    state = BanditState.zeros(n_players, grid.n_A)
    trace = RunTrace()
    for t in range(1, T + 1):
        arms = select_arms(state, epsilon, rng)
        delta = grid.values[arms].reshape(shape)
        reward, snap = reward_fn(delta)
        if not np.isfinite(reward):
            trace.delta = delta
            raise NonFiniteRewardError(f"non-finite reward at iteration {t}", trace)
        update_arms(state, arms, reward)
        trace.rewards.append(float(reward))
        trace.snapshots.append(snap)
        _logger.debug("iter %d reward %.6f", t, reward)
    if T == 0:
        delta = np.zeros(shape)
    else:
        final = np.argmax(state.values, axis=1)
        state.selections[:] = final
        delta = grid.values[final].reshape(shape)
    trace.delta = delta
    return delta, trace, state


def eval_users(ds, sample: int | None, seed: int):
    """Fixed seeded user subsample (sorted), or ``None`` for everyone."""
    if sample is None or sample >= ds.n_users:
        return None
    rng = np.random.default_rng([seed, 0x5EED])
    return np.sort(rng.choice(ds.n_users, size=sample, replace=False))


def run_cmb(model, ds, cfg: BanditConfig) -> tuple[np.ndarray, RunTrace]:
    """Learn the perturbation matrix for ``model`` on ``ds``."""
    grid = init_arms(cfg.A, cfg.n_A)
    reward_fn = RewardFunction(model, ds, cfg.spec, eval_users(ds, cfg.eval_user_sample, cfg.seed))
    rng = np.random.default_rng(cfg.seed)
    delta, trace, _ = run_bandit(reward_fn, model.Q.shape, grid, cfg.epsilon, cfg.T, rng)
    return delta, trace


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_delta(delta: np.ndarray, path) -> None:
    d, V = delta.shape
    with open(path, "wb") as fh:
        fh.write(DELTA_MAGIC)
        fh.write(struct.pack("<III", DELTA_VERSION, d, V))
        fh.write(np.ascontiguousarray(delta).astype("<f4").tobytes())


def load_delta(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != DELTA_MAGIC:
            raise ValueError(f"{path}: not a CMBP perturbation file")
        version, d, V = struct.unpack("<III", fh.read(12))
        if version != DELTA_VERSION:
            raise ValueError(f"{path}: unsupported perturbation version {version}")
        data = np.frombuffer(fh.read(4 * d * V), dtype="<f4")
    return data.reshape(d, V).astype(np.float64)


def export_delta_csv(delta: np.ndarray, path) -> None:
    """Long format ``feature,item,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "item", "value"])
        for r in range(delta.shape[0]):
            for c in range(delta.shape[1]):
                w.writerow([r, c, repr(float(delta[r, c]))])
