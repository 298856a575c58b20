"""Path-selection policies for the multihoming router.

Baselines pick the WAN path at SYN time: a fixed path, a uniformly random
one, or one of three multi-armed-bandit learners (epsilon-greedy, UCB,
Gaussian Thompson sampling) that treat the k paths as arms and the negated
flow completion time in seconds as the reward. The SYN-race policy is a
marker: it defers the choice to the router's handshake race.

Bandit state is kept per (source host, destination host) pair, so learners
for different pairs never influence each other.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

Pair = tuple[int, int]


class PolicyKind(Enum):
    STATIC = "static"
    UNIFORM_RANDOM = "random"
    TWO_SYN = "2syn"
    EPSILON_GREEDY = "egreedy"
    UCB = "ucb"
    THOMPSON = "thompson"


@dataclass
class ArmStats:
    """Per-(pair, path) reward statistics."""

    pulls: int = 0
    reward_sum: float = 0.0
    reward_sq_sum: float = 0.0

    @property
    def mean(self) -> float:
        return self.reward_sum / self.pulls

    @property
    def variance(self) -> float:
        if self.pulls < 2:
            return 0.0
        return max(
            (self.reward_sq_sum - self.reward_sum**2 / self.pulls) / (self.pulls - 1), 0.0
        )


def reward_from_fct(fct_seconds: float) -> float:
    """Lower completion time is better, so the reward is its negation."""
    return -fct_seconds


def _argmax_lowest_index(scores: list[float]) -> int:
    best, best_score = 0, scores[0]
    for i in range(1, len(scores)):
        if scores[i] > best_score:
            best, best_score = i, scores[i]
    return best


class PathPolicy:
    """Base: selects a 1-based path index for a new flow of `pair`."""

    kind: PolicyKind
    uses_race = False

    def __init__(self, k: int) -> None:
        if k < 1:
            raise ValueError("need at least one path")
        self.k = k

    def select_path(self, pair: Pair) -> int:
        raise NotImplementedError

    def record_outcome(self, pair: Pair, path: int, fct_seconds: float) -> None:
        """Called once per completed flow; stateless policies ignore it."""

    def label(self) -> str:
        return self.kind.value


class StaticPolicy(PathPolicy):
    kind = PolicyKind.STATIC

    def __init__(self, k: int, path: int) -> None:
        super().__init__(k)
        if not 1 <= path <= k:
            raise ValueError(f"static path {path} out of range 1..{k}")
        self.path = path

    def select_path(self, pair: Pair) -> int:
        return self.path

    def label(self) -> str:
        return f"static{self.path}"


class UniformRandomPolicy(PathPolicy):
    kind = PolicyKind.UNIFORM_RANDOM

    def __init__(self, k: int, rng: random.Random) -> None:
        super().__init__(k)
        self.rng = rng

    def select_path(self, pair: Pair) -> int:
        return self.rng.randrange(self.k) + 1


class TwoSynPolicy(PathPolicy):
    """Marker policy: the router races duplicated SYNs instead of selecting."""

    kind = PolicyKind.TWO_SYN
    uses_race = True

    def select_path(self, pair: Pair) -> int:
        raise RuntimeError("the SYN race decides the path; nothing to select")


class _BanditPolicy(PathPolicy):
    def __init__(self, k: int) -> None:
        super().__init__(k)
        self._stats: dict[Pair, list[ArmStats]] = {}

    def arms(self, pair: Pair) -> list[ArmStats]:
        arms = self._stats.get(pair)
        if arms is None:
            arms = [ArmStats() for _ in range(self.k)]
            self._stats[pair] = arms
        return arms

    def record_outcome(self, pair: Pair, path: int, fct_seconds: float) -> None:
        arm = self.arms(pair)[path - 1]
        r = reward_from_fct(fct_seconds)
        arm.pulls += 1
        arm.reward_sum += r
        arm.reward_sq_sum += r * r

    def _first_unpulled(self, arms: list[ArmStats]) -> Optional[int]:
        for i, arm in enumerate(arms):
            if arm.pulls == 0:
                return i + 1
        return None


class EpsilonGreedyPolicy(_BanditPolicy):
    kind = PolicyKind.EPSILON_GREEDY

    def __init__(self, k: int, rng: random.Random, epsilon: float = 0.1) -> None:
        super().__init__(k)
        self.rng = rng
        self.epsilon = epsilon

    def select_path(self, pair: Pair) -> int:
        arms = self.arms(pair)
        unpulled = self._first_unpulled(arms)
        if unpulled is not None:
            return unpulled
        best = _argmax_lowest_index([arm.mean for arm in arms]) + 1
        if self.k > 1 and self.rng.random() < self.epsilon:
            others = [i + 1 for i in range(self.k) if i + 1 != best]
            return others[self.rng.randrange(len(others))]
        return best


class UcbPolicy(_BanditPolicy):
    """UCB1 on per-pair means min-max normalized over the observed rewards,
    keeping the confidence term commensurate with the exploitation term."""

    kind = PolicyKind.UCB

    def __init__(self, k: int, c: float = 1.0) -> None:
        super().__init__(k)
        self.c = c
        self._reward_range: dict[Pair, tuple[float, float]] = {}

    def record_outcome(self, pair: Pair, path: int, fct_seconds: float) -> None:
        super().record_outcome(pair, path, fct_seconds)
        r = reward_from_fct(fct_seconds)
        lo, hi = self._reward_range.get(pair, (r, r))
        self._reward_range[pair] = (min(lo, r), max(hi, r))

    def select_path(self, pair: Pair) -> int:
        arms = self.arms(pair)
        unpulled = self._first_unpulled(arms)
        if unpulled is not None:
            return unpulled
        total = sum(arm.pulls for arm in arms)
        lo, hi = self._reward_range[pair]
        span = hi - lo
        scores = []
        for arm in arms:
            mean = (arm.mean - lo) / span if span > 0 else 0.5
            scores.append(mean + self.c * math.sqrt(2.0 * math.log(total) / arm.pulls))
        return _argmax_lowest_index(scores) + 1


@dataclass
class _Posterior:
    """Gaussian conjugate posterior with known (estimated) observation variance."""

    prior_mean: float
    prior_var: float
    mean: float = field(init=False)
    var: float = field(init=False)

    def __post_init__(self) -> None:
        self.mean = self.prior_mean
        self.var = self.prior_var


class ThompsonPolicy(_BanditPolicy):
    kind = PolicyKind.THOMPSON

    PRIOR_MEAN = 0.0
    PRIOR_VAR = 10.0
    OBS_VAR_FLOOR = 1e-6

    def __init__(self, k: int, rng: random.Random) -> None:
        super().__init__(k)
        self.rng = rng
        self._posteriors: dict[Pair, list[_Posterior]] = {}

    def _post(self, pair: Pair) -> list[_Posterior]:
        post = self._posteriors.get(pair)
        if post is None:
            post = [_Posterior(self.PRIOR_MEAN, self.PRIOR_VAR) for _ in range(self.k)]
            self._posteriors[pair] = post
        return post

    def record_outcome(self, pair: Pair, path: int, fct_seconds: float) -> None:
        super().record_outcome(pair, path, fct_seconds)
        arm = self.arms(pair)[path - 1]
        obs_var = max(arm.variance, self.OBS_VAR_FLOOR)
        post = self._post(pair)[path - 1]
        post.var = 1.0 / (1.0 / post.prior_var + arm.pulls / obs_var)
        post.mean = post.var * (
            post.prior_mean / post.prior_var + arm.reward_sum / obs_var
        )

    def select_path(self, pair: Pair) -> int:
        post = self._post(pair)
        samples = [self.rng.gauss(p.mean, math.sqrt(p.var)) for p in post]
        return _argmax_lowest_index(samples) + 1


BASE_POLICY_NAMES = ("static1", "static2", "random", "2syn")
MAB_POLICY_NAMES = ("egreedy", "ucb", "thompson")


def make_policy(
    name: str,
    k: int,
    rng_streams,
    *,
    epsilon: float = 0.1,
    ucb_c: float = 1.0,
) -> PathPolicy:
    """Build a policy from its CLI/scenario-file name (e.g. "static2")."""
    name = name.lower()
    if name.startswith("static"):
        return StaticPolicy(k, int(name[len("static"):] or "1"))
    if name == "random":
        return UniformRandomPolicy(k, rng_streams.stream("policy.random"))
    if name == "2syn":
        return TwoSynPolicy(k)
    if name == "egreedy":
        return EpsilonGreedyPolicy(k, rng_streams.stream("policy.egreedy"), epsilon)
    if name == "ucb":
        return UcbPolicy(k, ucb_c)
    if name == "thompson":
        return ThompsonPolicy(k, rng_streams.stream("policy.thompson"))
    raise ValueError(f"unknown policy {name!r}")
