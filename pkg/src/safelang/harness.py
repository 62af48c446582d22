"""Experiment orchestration: configs, arms, seeds, aggregation and reports.

Layout of one run's output directory::

    <out>/metadata.json          config, config hash, condenser fallbacks
    <out>/seed_<s>/episodes.csv  one row per training episode
    <out>/seed_<s>/checkpoint.npz
    <out>/aggregate.csv          smoothed mean/min/max across seeds
    <out>/costpred.csv           confusion counts (cost-prediction arms)
    <out>/summary.json           final-window statistics
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .constraints import load_corpus, make_condenser
from .costpred import (CostPredictorConfig, ConfusionCounts, SemanticCostPredictor,
                       collect_eval_steps, evaluate_steps, metrics, metrics_csv)
from .embedding import LocalEmbedder, ProjectedEmbedder, finetune
from .gridworld import GridConfig, HazardWorld
from .remote import RemoteConfig, RemoteEmbeddingClient, RemoteTextClient
from .rloptim import EPISODE_FIELDS, ORACLE, TrainConfig, config_hash, train

log = logging.getLogger(__name__)

ARMS = ("ppo", "ppo_lag_oracle", "ppo_cp", "ppo_cp_no_condenser", "ppo_cp_untuned_embedder")
CP_ARMS = ("ppo_cp", "ppo_cp_no_condenser", "ppo_cp_untuned_embedder")
SMOOTHING_WINDOW = 20
FINAL_FRACTION = 0.1


class ConfigError(ValueError):
    pass


def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class EmbedderConfig:
    vocab_size: int = 512
    dim: int = 32
    seed: int = 0
    finetune: bool = True
    iterations: int = 10
    pairs_per_iter: int = 128
    lr: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    arm: str
    env: GridConfig = field(default_factory=GridConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    costpred: CostPredictorConfig | None = None
    corpus: str | None = None
    backend: str = "local"
    condenser: str = "rule"
    seeds: tuple = (0, 1, 2, 3)
    output_dir: str = "runs/out"
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    remote_condenser: dict | None = None
    remote_embedding: dict | None = None
    train_hazards: tuple | None = None
    plot: bool = False

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        if self.arm in CP_ARMS and self.costpred is None:
            raise ConfigError(f"arm {self.arm} needs a costpred section")
        if self.arm not in CP_ARMS and self.costpred is not None:
            raise ConfigError(f"arm {self.arm} does not use cost prediction; remove costpred")
        if self.backend not in ("local", "remote"):
            raise ConfigError("backend must be 'local' or 'remote'")
        if self.condenser not in ("rule", "remote", "identity"):
            raise ConfigError("condenser must be 'rule', 'remote' or 'identity'")
        if self.arm == "ppo_cp_no_condenser" and self.condenser != "identity":
            raise ConfigError("ppo_cp_no_condenser requires condenser='identity'")
        if self.condenser == "remote" and not self.remote_condenser:
            raise ConfigError("condenser='remote' needs a remote_condenser section")
        if self.backend == "remote" and not self.remote_embedding:
            raise ConfigError("backend='remote' needs a remote_embedding section")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.train_hazards is not None:
            object.__setattr__(self, "train_hazards", tuple(self.train_hazards))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "arm" not in d:
            raise ConfigError("config needs an 'arm'")
        d = dict(d)
        d["env"] = _strict(GridConfig, d.get("env"), "env")
        d["train"] = _strict(TrainConfig, d.get("train"), "train")
        if d.get("costpred") is not None:
            d["costpred"] = _strict(CostPredictorConfig, d["costpred"], "costpred")
        d["embedder"] = _strict(EmbedderConfig, d.get("embedder"), "embedder")
        d["evaluation"] = _strict(EvalConfig, d.get("evaluation"), "evaluation")
        for key in ("remote_condenser", "remote_embedding"):
            if d.get(key) is not None:
                RemoteConfig.from_dict(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["seeds"] = list(self.seeds)
        if self.train_hazards is not None:
            d["train_hazards"] = list(self.train_hazards)
        return d

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)


# --- building blocks ----------------------------------------------------------

def build_condenser(config: RunConfig):
    client = None
    if config.condenser == "remote":
        client = RemoteTextClient(RemoteConfig.from_dict(config.remote_condenser))
    return make_condenser(config.condenser, client=client)


def build_backend(config: RunConfig, corpus, condenser, seed: int = 0, tuned: bool | None = None):
    """Embedding backend for one seed, fine-tuned unless the arm or config says otherwise."""
    ec = config.embedder
    if config.backend == "local":
        backend = LocalEmbedder.create(ec.vocab_size, ec.dim, seed=ec.seed + seed)
    else:
        backend = ProjectedEmbedder(RemoteEmbeddingClient(RemoteConfig.from_dict(config.remote_embedding)))
    if tuned is None:
        tuned = ec.finetune and config.arm != "ppo_cp_untuned_embedder"
    report = None
    if tuned:
        backend, report = finetune(backend, corpus, ec.iterations, ec.pairs_per_iter, ec.lr,
                                   seed=ec.seed + seed, condense=condenser)
    return backend, report


def _cost_config(config: RunConfig) -> CostPredictorConfig:
    return config.costpred or CostPredictorConfig()


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def episodes_csv(rows, header: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in EPISODE_FIELDS])
    return buf.getvalue()


def read_episodes_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({"episode": int(r["episode"]), "constraint_id": r["constraint_id"],
                     "reward_sum": float(r["reward_sum"]),
                     "predicted_cost_sum": int(r["predicted_cost_sum"]),
                     "oracle_cost_sum": int(r["oracle_cost_sum"]),
                     "alpha": float(r["alpha"]), "steps": int(r["steps"])})
    return rows


# --- aggregation --------------------------------------------------------------

def smooth(series, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Trailing moving average; early points average over what exists so far."""
    x = np.asarray(series, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


AGG_METRICS = ("reward_sum", "oracle_cost_sum", "predicted_cost_sum")


@dataclass
class Aggregate:
    """Per-episode count/sum/min/max of smoothed curves; merging is associative."""

    count: int
    sums: dict
    mins: dict
    maxs: dict

    @classmethod
    def of_seed(cls, rows, window: int = SMOOTHING_WINDOW) -> "Aggregate":
        curves = {m: smooth([r[m] for r in rows], window) for m in AGG_METRICS}
        return cls(1, curves, {m: c.copy() for m, c in curves.items()},
                   {m: c.copy() for m, c in curves.items()})

    def merge(self, other: "Aggregate") -> "Aggregate":
        return Aggregate(self.count + other.count,
                         {m: self.sums[m] + other.sums[m] for m in AGG_METRICS},
                         {m: np.minimum(self.mins[m], other.mins[m]) for m in AGG_METRICS},
                         {m: np.maximum(self.maxs[m], other.maxs[m]) for m in AGG_METRICS})

    def mean(self, metric: str) -> np.ndarray:
        return self.sums[metric] / self.count

    def to_csv(self, header: dict) -> str:
        buf = io.StringIO()
        buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ["episode"] + [f"{m}_{s}" for m in AGG_METRICS for s in ("mean", "min", "max")]
        w.writerow(cols)
        for i in range(len(self.sums[AGG_METRICS[0]])):
            row = [i]
            for m in AGG_METRICS:
                row += [repr(float(self.mean(m)[i])), repr(float(self.mins[m][i])),
                        repr(float(self.maxs[m][i]))]
            w.writerow(row)
        return buf.getvalue()


def aggregate(seed_rows, window: int = SMOOTHING_WINDOW) -> Aggregate:
    aggs = [Aggregate.of_seed(rows, window) for rows in seed_rows]
    out = aggs[0]
    for a in aggs[1:]:
        out = out.merge(a)
    return out


def final_window(rows, fraction: float = FINAL_FRACTION) -> dict:
    n = max(1, int(round(len(rows) * fraction)))
    tail = rows[-n:]
    return {"episodes": n,
            "reward_mean": float(np.mean([r["reward_sum"] for r in tail])),
            "oracle_cost_mean": float(np.mean([r["oracle_cost_sum"] for r in tail])),
            "predicted_cost_mean": float(np.mean([r["predicted_cost_sum"] for r in tail]))}


def _spread(values):
    return {"mean": float(np.mean(values)), "min": float(np.min(values)),
            "max": float(np.max(values))}


# --- running ------------------------------------------------------------------

def _counts_dict(c: ConfusionCounts) -> dict:
    p, r, f = metrics(c)
    return {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, "precision": p, "recall": r, "f1": f}


def run_seed(config: RunConfig, seed: int) -> dict:
    """Train one seed end to end and write its files. Returns a result record."""
    out = Path(config.output_dir) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(config.corpus)
    condenser = build_condenser(config)
    backend, ft_report = build_backend(config, corpus, condenser, seed)
    predictor = SemanticCostPredictor(backend, condenser, _cost_config(config))
    cost_source = {"ppo": None, "ppo_lag_oracle": ORACLE}.get(config.arm, predictor)
    layout_seed = config.env.seed + seed
    tcfg = TrainConfig(**{**config.train.to_dict(), "seed": config.train.seed + seed})

    def env_factory(s):
        return HazardWorld(config.env.with_seed(layout_seed if s is None else s))

    trainer, rows = train(tcfg, env_factory, corpus, predictor.constraint_embedding, cost_source,
                          freeze_alpha=config.arm == "ppo", hazards=config.train_hazards)
    header = {"config_hash": config.hash, "arm": config.arm, "seed": seed}
    (out / "episodes.csv").write_text(episodes_csv(rows, header))
    trainer.save(out / "checkpoint.npz", config.hash)
    if isinstance(backend, LocalEmbedder):
        backend.save(out / "embedder.bin")
    result = {"seed": seed, "rows": rows, "final": final_window(rows),
              "finetune_losses": ft_report.losses if ft_report else None,
              "fallbacks": list(condenser.fallbacks)}
    if config.arm in CP_ARMS:
        steps = collect_eval_steps(config.env, corpus, config.evaluation.episodes,
                                   config.evaluation.seed + seed)
        result["confusion"] = evaluate_steps(predictor, steps)
    return result


@dataclass
class RunReport:
    output_dir: Path
    config: RunConfig
    seed_csvs: dict
    aggregate: Aggregate | None
    summary: dict
    failures: dict

    @property
    def complete(self) -> bool:
        return not self.failures


def _run_seed_safe(args):
    config, seed = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        return seed, run_seed(config, seed), None
    except Exception as exc:  # recorded per seed, the report marks partial completion
        log.exception("seed %s failed", seed)
        return seed, None, f"{type(exc).__name__}: {exc}"


def run(config: RunConfig, workers: int = 1) -> RunReport:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(config, s) for s in config.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_safe, jobs))
    else:
        results = [_run_seed_safe(j) for j in jobs]
    done = {s: r for s, r, err in results if r is not None}
    failures = {str(s): err for s, _, err in results if err is not None}
    header = {"config_hash": config.hash, "arm": config.arm,
              "smoothing_window": SMOOTHING_WINDOW}
    agg = None
    if done:
        agg = aggregate([done[s]["rows"] for s in sorted(done)])
        (out / "aggregate.csv").write_text(agg.to_csv({**header, "seeds": len(done)}))
    summary = {
        "arm": config.arm, "config_hash": config.hash, "completed_seeds": sorted(done),
        "failures": failures, "partial": bool(failures),
        "final_window": {str(s): done[s]["final"] for s in sorted(done)},
    }
    if done:
        finals = [done[s]["final"] for s in sorted(done)]
        summary["final_reward"] = _spread([f["reward_mean"] for f in finals])
        summary["final_oracle_cost"] = _spread([f["oracle_cost_mean"] for f in finals])
    if config.arm in CP_ARMS and done:
        rows = [(config.hash, config.arm + f"/seed_{s}", done[s]["confusion"]) for s in sorted(done)]
        total = sum((r[2] for r in rows), ConfusionCounts())
        rows.append((config.hash, config.arm, total))
        (out / "costpred.csv").write_text(metrics_csv(rows, config.hash))
        summary["confusion"] = _counts_dict(total)
    summary["env"] = asdict(config.env)
    summary["train"] = {k: v for k, v in config.train.to_dict().items() if k != "seed"}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    meta = {"config": config.to_dict(), "config_hash": config.hash,
            "fallbacks": {str(s): done[s]["fallbacks"] for s in sorted(done)},
            "finetune_losses": {str(s): done[s]["finetune_losses"] for s in sorted(done)}}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if config.plot and agg is not None:
        plot_curves(agg, out / "curves.svg", title=config.arm)
    return RunReport(out, config, {s: out / f"seed_{s}" / "episodes.csv" for s in sorted(done)},
                     agg, summary, failures)


def plot_curves(agg: Aggregate, path, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    x = np.arange(len(agg.sums["reward_sum"]))
    for ax, m, label in zip(axes, ("reward_sum", "oracle_cost_sum"),
                            ("episode reward sum", "episode cost sum")):
        ax.plot(x, agg.mean(m))
        ax.fill_between(x, agg.mins[m], agg.maxs[m], alpha=0.3)
        ax.set_xlabel("episode")
        ax.set_ylabel(label)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# --- threshold sweep and evaluation -------------------------------------------

def _eval_setup(config: RunConfig, seed: int):
    corpus = load_corpus(config.corpus)
    condenser = build_condenser(config)
    backend, _ = build_backend(config, corpus, condenser, seed)
    steps = collect_eval_steps(config.env, corpus, config.evaluation.episodes,
                               config.evaluation.seed + seed)
    return corpus, condenser, backend, steps


def sweep_threshold(config: RunConfig, thresholds, seed: int | None = None):
    """``[(T, precision, recall, f1)]`` for the frozen predictor on shared episodes."""
    if not thresholds:
        raise ValueError("threshold list is empty")
    seed = config.seeds[0] if seed is None else seed
    _, condenser, backend, steps = _eval_setup(config, seed)
    table = []
    for t in sorted(thresholds):
        predictor = SemanticCostPredictor(backend, condenser, CostPredictorConfig(float(t)))
        table.append((float(t), *metrics(evaluate_steps(predictor, steps))))
    return table


def eval_costpred(config: RunConfig, seed: int | None = None) -> dict:
    """Confusion counts for the fine-tuned and the untuned embedder on the same steps."""
    seed = config.seeds[0] if seed is None else seed
    corpus, condenser, _, steps = _eval_setup(config, seed)
    out = {}
    for arm, tuned in (("finetuned", True), ("untuned", False)):
        backend, _ = build_backend(config, corpus, condenser, seed, tuned=tuned)
        out[arm] = evaluate_steps(SemanticCostPredictor(backend, condenser, _cost_config(config)), steps)
    return out


# --- comparison ---------------------------------------------------------------

def load_summary(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    return json.loads(p.read_text())


def compare_arms(reports) -> dict:
    """Final-window reward/cost per arm with ranges, plus pairwise deltas."""
    summaries = [r.summary if isinstance(r, RunReport) else
                 (r if isinstance(r, dict) else load_summary(r)) for r in reports]
    if not summaries:
        raise ValueError("nothing to compare")
    ref = summaries[0]
    for s in summaries[1:]:
        if s["env"] != ref["env"] or s["train"] != ref["train"]:
            raise ConfigError(f"{s['arm']} was run with a different env/train config than {ref['arm']}")
    rows = []
    for s in summaries:
        row = {"arm": s["arm"], "reward": s["final_reward"], "oracle_cost": s["final_oracle_cost"]}
        if "confusion" in s:
            row["f1"] = s["confusion"]["f1"]
            row["recall"] = s["confusion"]["recall"]
            row["precision"] = s["confusion"]["precision"]
        rows.append(row)
    deltas = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            d = {"a": a["arm"], "b": b["arm"],
                 "reward_delta": b["reward"]["mean"] - a["reward"]["mean"],
                 "oracle_cost_delta": b["oracle_cost"]["mean"] - a["oracle_cost"]["mean"]}
            if "f1" in a and "f1" in b:
                d["f1_delta"] = (b["f1"] or 0.0) - (a["f1"] or 0.0)
            deltas.append(d)
    return {"arms": rows, "deltas": deltas}


def comparison_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "reward_mean", "reward_min", "reward_max", "oracle_cost_mean",
                "oracle_cost_min", "oracle_cost_max", "f1"])
    for r in table["arms"]:
        w.writerow([r["arm"], r["reward"]["mean"], r["reward"]["min"], r["reward"]["max"],
                    r["oracle_cost"]["mean"], r["oracle_cost"]["min"], r["oracle_cost"]["max"],
                    "" if r.get("f1") is None else r["f1"]])
    w.writerow([])
    w.writerow(["a", "b", "reward_delta", "oracle_cost_delta", "f1_delta"])
    for d in table["deltas"]:
        w.writerow([d["a"], d["b"], d["reward_delta"], d["oracle_cost_delta"], d.get("f1_delta", "")])
    return buf.getvalue()
