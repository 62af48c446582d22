"""Threshold cost prediction and confusion-matrix metrics.

A step is predicted to violate the constraint when the cosine similarity
between the constraint embedding and the step's text description exceeds
the threshold (strictly).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .descriptor import describe
from .embedding import cosine_sim
from .gridworld import HAZARD_EVENT, GridConfig, HazardWorld, N_ACTIONS, to_hazard

GRID_THRESHOLD = 0.4
# value used for the robot-navigation task in the original experiments; kept for reference
SAFETYGOAL_THRESHOLD = 0.55


@dataclass(frozen=True)
class CostPredictorConfig:
    threshold: float = GRID_THRESHOLD

    def __post_init__(self):
        if not (math.isfinite(self.threshold) and -1.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in [-1, 1], got {self.threshold}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def record(self, predicted: int, actual: int) -> "ConfusionCounts":
        return self + ConfusionCounts(
            tp=int(predicted and actual), fp=int(predicted and not actual),
            fn=int(actual and not predicted), tn=int(not predicted and not actual))

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total else None


def predict_cost(h_c, h_o, config: CostPredictorConfig = CostPredictorConfig()) -> int:
    return int(cosine_sim(h_c, h_o) > config.threshold)


def _ratio(num, den):
    return num / den if den else None


def f1_score(precision, recall):
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def metrics(counts: ConfusionCounts):
    """``(precision, recall, f1)``; ``None`` marks an undefined ratio."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return precision, recall, f1_score(precision, recall)


class SemanticCostPredictor:
    """condense -> embed constraint; describe -> embed step; compare.

    Embeddings are memoized by text, so a frozen backend is queried once per
    distinct sentence. Never sees the oracle cost.
    """

    def __init__(self, backend, condenser, config: CostPredictorConfig = CostPredictorConfig(),
                 table=None):
        self.backend = backend
        self.condenser = condenser
        self.config = config
        self.table = table
        self._emb: dict[str, np.ndarray] = {}
        self._memo: dict[tuple[str, str], int] = {}

    def embed(self, text: str) -> np.ndarray:
        h = self._emb.get(text)
        if h is None:
            h = np.asarray(self.backend.embed(text), dtype=float)
            self._emb[text] = h
        return h

    def constraint_text(self, constraint) -> str:
        return self.condenser(constraint).text

    def constraint_embedding(self, constraint) -> np.ndarray:
        return self.embed(self.constraint_text(constraint))

    def similarity(self, constraint, event) -> float:
        text = describe(event, table=self.table).text
        return cosine_sim(self.constraint_embedding(constraint), self.embed(text))

    def __call__(self, constraint, event) -> int:
        key = (self.constraint_text(constraint), str(event))
        hit = self._memo.get(key)
        if hit is None:
            h_o = self.embed(describe(event, table=self.table).text)
            hit = predict_cost(self.embed(key[0]), h_o, self.config)
            self._memo[key] = hit
        return hit


def oracle_predictor(constraint, event) -> int:
    """Reference predictor built from the constraint label; for tests and sanity checks."""
    return int(event == HAZARD_EVENT[to_hazard(constraint.prohibited)])


def constant_predictor(value: int):
    return lambda constraint, event: int(value)


def evaluation_episodes(env_config: GridConfig, corpus, episodes: int, seed: int):
    """Seeded (layout seed, constraint, action rng) triples shared by every arm."""
    rng = np.random.default_rng(seed)
    for _ in range(episodes):
        layout_seed = int(rng.integers(2 ** 31))
        constraint = corpus[int(rng.integers(len(corpus)))]
        yield layout_seed, constraint, np.random.default_rng(int(rng.integers(2 ** 31)))


def collect_eval_steps(env_config: GridConfig, corpus, episodes: int = 50, seed: int = 0):
    """Uniform-random-policy rollouts: list of (constraint, event, oracle_cost)."""
    steps = []
    for layout_seed, constraint, act_rng in evaluation_episodes(env_config, corpus, episodes, seed):
        env = HazardWorld(env_config.with_seed(layout_seed))
        env.reset(constraint.id, constraint.prohibited)
        done = False
        while not done:
            res = env.step(int(act_rng.integers(N_ACTIONS)))
            steps.append((constraint, res.event, res.oracle_cost))
            done = res.done
    return steps


def evaluate_steps(predictor, steps) -> ConfusionCounts:
    counts = ConfusionCounts()
    for constraint, event, actual in steps:
        counts = counts.record(predictor(constraint, event), actual)
    return counts


def evaluate_predictor(predictor, env_config: GridConfig, corpus, episodes: int = 50,
                       seed: int = 0) -> ConfusionCounts:
    """Per-step confusion counts of ``predictor(constraint, event)`` vs the oracle."""
    return evaluate_steps(predictor, collect_eval_steps(env_config, corpus, episodes, seed))


CSV_FIELDS = ("run_id", "arm", "tp", "fp", "fn", "tn", "precision", "recall", "f1")


def _fmt(x):
    return "" if x is None else repr(float(x))


def metrics_csv(rows, config_hash: str | None = None) -> str:
    """``rows``: iterable of (run_id, arm, ConfusionCounts)."""
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for run_id, arm, c in rows:
        p, r, f = metrics(c)
        w.writerow([run_id, arm, c.tp, c.fp, c.fn, c.tn, _fmt(p), _fmt(r), _fmt(f)])
    return buf.getvalue()
