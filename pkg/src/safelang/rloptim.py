"""PPO with a Lagrange multiplier on (predicted) per-step costs.

The policy and the cost critic see the observation concatenated with the
constraint embedding; the reward critic sees the observation only. All
gradients are analytic (see :mod:`safelang.nn`).

Training interacts with the environment through :class:`AgentView`, which
hands the learner a cost from its configured source and keeps the
ground-truth cost in a separate audit record used for logging only.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .gridworld import N_ACTIONS, HazardWorld, to_hazard
from .nn import MLP, Adam

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ORACLE = "oracle"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.5
    cost_budget: float = 0.5
    lagrange_lr: float = 0.01
    alpha_init: float = 0.0
    epochs: int = 4
    minibatch_size: int = 256
    lr: float = 3e-4
    max_grad_norm: float | None = 0.5
    total_episodes: int = 2000
    episodes_per_batch: int = 8
    hidden: tuple = (64, 64)
    normalize_advantages: bool = True
    value_target: str = "td"
    entropy_coef: float = 0.0
    resample_layout: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.cost_budget < 0:
            raise ValueError("cost_budget must be >= 0")
        if self.lagrange_lr <= 0:
            raise ValueError("lagrange_lr must be > 0")
        if self.alpha_init < 0:
            raise ValueError("alpha_init must be >= 0")
        if self.value_target not in ("td", "gae"):
            raise ValueError("value_target must be 'td' or 'gae'")
        if min(self.epochs, self.minibatch_size, self.total_episodes, self.episodes_per_batch) < 1:
            raise ValueError("epochs, minibatch_size, total_episodes, episodes_per_batch must be >= 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# --- advantage estimation -----------------------------------------------------

def td_errors(rewards, values, dones, gamma: float, last_value: float = 0.0) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must have equal length")
    nxt = np.append(values[1:], last_value)
    return rewards + gamma * np.where(dones, 0.0, nxt) - values


def gae(rewards, values, dones=None, gamma: float = 0.99, lam: float = 0.95,
        last_value: float = 0.0) -> np.ndarray:
    """Generalized advantage estimates, truncated at every ``done``.

    ``dones[t]`` marks that ``s_{t+1}`` is terminal; ``last_value`` bootstraps
    the final step when it is not.
    """
    rewards = np.asarray(rewards, dtype=float)
    if dones is None:
        dones = np.zeros(rewards.shape, dtype=bool)
    dones = np.asarray(dones, dtype=bool)
    deltas = td_errors(rewards, values, dones, gamma, last_value)
    adv = np.zeros_like(deltas)
    acc = 0.0
    for t in reversed(range(len(deltas))):
        acc = deltas[t] + gamma * lam * (0.0 if dones[t] else acc)
        adv[t] = acc
    return adv


# --- networks -----------------------------------------------------------------

@dataclass
class PolicyBundle:
    policy: MLP
    value: MLP
    cost_value: MLP
    alpha: float = 0.0

    @classmethod
    def create(cls, obs_dim: int, hc_dim: int, hidden=(64, 64), seed=0, alpha: float = 0.0):
        r_pi, r_v, r_c = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        hidden = list(hidden)
        return cls(
            policy=MLP([obs_dim + hc_dim, *hidden, N_ACTIONS], r_pi, out_scale=0.01),
            value=MLP([obs_dim, *hidden, 1], r_v, out_scale=1.0),
            cost_value=MLP([obs_dim + hc_dim, *hidden, 1], r_c, out_scale=1.0),
            alpha=alpha,
        )

    def networks(self):
        return {"policy": self.policy, "value": self.value, "cost_value": self.cost_value}

    def all_params(self):
        return self.policy.params + self.value.params + self.cost_value.params

    def is_finite(self) -> bool:
        return np.isfinite(self.alpha) and all(np.all(np.isfinite(p)) for p in self.all_params())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Batch:
    obs: np.ndarray
    hc: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    adv_c: np.ndarray
    v_target: np.ndarray
    vc_target: np.ndarray

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float):
    """Mean of min(r*A, clip(r)*A) and its derivative w.r.t. each ratio."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    use_unclipped = unclipped <= clipped
    value = np.where(use_unclipped, unclipped, clipped).mean()
    dratio = np.where(use_unclipped, adv, 0.0) / len(ratio)
    return float(value), dratio


def _policy_pass(bundle: PolicyBundle, batch: Batch):
    x = np.concatenate([batch.obs, batch.hc], axis=1)
    logits, acts = bundle.policy.forward(x)
    logp_all = log_softmax(logits)
    logp = logp_all[np.arange(len(batch)), batch.actions]
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - batch.logp_old)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError(f"non-finite probability ratio (max log-ratio "
                                 f"{np.max(logp - batch.logp_old)})")
    return logits, acts, logp_all, ratio


def clip_losses(bundle: PolicyBundle, batch: Batch, eps: float):
    """Reward and cost clipped surrogates with their gradients w.r.t. the policy params."""
    logits, acts, logp_all, ratio = _policy_pass(bundle, batch)
    probs = np.exp(logp_all)
    onehot = np.eye(N_ACTIONS)[batch.actions]
    out = []
    for adv in (batch.adv, batch.adv_c):
        value, dratio = clipped_surrogate(ratio, adv, eps)
        dlogits = (dratio * ratio)[:, None] * (onehot - probs)
        out.append((value, bundle.policy.backward(dlogits, acts)))
    (l_clip, g_clip), (l_clip_c, g_clip_c) = out
    return l_clip, l_clip_c, g_clip, g_clip_c


def policy_entropy(bundle: PolicyBundle, batch: Batch):
    x = np.concatenate([batch.obs, batch.hc], axis=1)
    logits, acts = bundle.policy.forward(x)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    # dH/dz_k = -p_k (log p_k + H)
    dlogits = -p * (logp + ent[:, None]) / len(batch)
    return float(ent.mean()), bundle.policy.backward(dlogits, acts)


def value_losses(bundle: PolicyBundle, batch: Batch):
    """Squared TD losses against frozen targets (cost loss carries a 1/2 factor)."""
    n = len(batch)
    v, acts_v = bundle.value.forward(batch.obs)
    err = batch.v_target - v[:, 0]
    l_vf = float(np.mean(err ** 2))
    g_vf = bundle.value.backward((-2.0 * err / n)[:, None], acts_v)
    vc, acts_c = bundle.cost_value.forward(np.concatenate([batch.obs, batch.hc], axis=1))
    err_c = batch.vc_target - vc[:, 0]
    l_cvf = float(np.mean(0.5 * err_c ** 2))
    g_cvf = bundle.cost_value.backward((-err_c / n)[:, None], acts_c)
    return l_vf, l_cvf, g_vf, g_cvf


def total_loss(l_clip: float, l_clip_c: float, l_vf: float, l_cvf: float,
               alpha: float, c1: float, c2: float) -> float:
    """Objective to maximize: reward surrogate minus weighted cost surrogate and critic losses."""
    return l_clip - alpha * l_clip_c - c1 * l_vf - c2 * l_cvf


def objective_and_grads(bundle: PolicyBundle, batch: Batch, alpha: float, config: TrainConfig):
    """Total objective and its gradient w.r.t. every network parameter.

    Returns ``(L, parts, grads)`` with ``grads`` keyed like
    :meth:`PolicyBundle.networks`; these are ascent directions.
    """
    l_clip, l_clip_c, g_clip, g_clip_c = clip_losses(bundle, batch, config.clip_eps)
    l_vf, l_cvf, g_vf, g_cvf = value_losses(bundle, batch)
    total = total_loss(l_clip, l_clip_c, l_vf, l_cvf, alpha, config.c1, config.c2)
    g_pi = [a - alpha * b for a, b in zip(g_clip, g_clip_c)]
    parts = {"clip": l_clip, "clip_c": l_clip_c, "vf": l_vf, "cvf": l_cvf}
    if config.entropy_coef:
        ent, g_ent = policy_entropy(bundle, batch)
        total += config.entropy_coef * ent
        g_pi = [g + config.entropy_coef * e for g, e in zip(g_pi, g_ent)]
        parts["entropy"] = ent
    grads = {
        "policy": g_pi,
        "value": [-config.c1 * g for g in g_vf],
        "cost_value": [-config.c2 * g for g in g_cvf],
    }
    return total, parts, grads


def update_lagrange(alpha: float, episode_cost_sums, budget: float, lr: float) -> float:
    """One projected ascent step on alpha * (mean episode cost - budget)."""
    if lr <= 0:
        raise ValueError("lagrange step size must be positive")
    costs = np.asarray(episode_cost_sums, dtype=float)
    if costs.size == 0:
        return alpha
    return max(0.0, alpha + lr * (float(costs.mean()) - budget))


# --- environment access -------------------------------------------------------

@dataclass
class Audit:
    oracle_costs: list = field(default_factory=list)


class AgentView:
    """What the learner sees of the environment.

    ``cost_fn(constraint, event)`` supplies the learner's cost; ``ORACLE``
    forwards the ground-truth cost (baseline only); ``None`` gives zero cost.
    The ground truth is otherwise only written to ``audit``.
    """

    def __init__(self, env: HazardWorld, cost_fn=None):
        self._env = env
        self._cost_fn = cost_fn
        self.audit = Audit()
        self._constraint = None

    @property
    def observation_size(self) -> int:
        return self._env.observation_size

    def reset(self, constraint) -> np.ndarray:
        self._constraint = constraint
        self.audit = Audit()
        return self._env.reset(constraint.id, to_hazard(constraint.prohibited))

    def step(self, action):
        res = self._env.step(action)
        self.audit.oracle_costs.append(res.oracle_cost)
        if self._cost_fn is None:
            cost = 0
        elif self._cost_fn == ORACLE:
            cost = res.oracle_cost
        else:
            cost = int(self._cost_fn(self._constraint, res.event))
        return res.observation, res.reward, cost, res.done, res.event


@dataclass
class Episode:
    constraint_id: str
    obs: np.ndarray
    hc: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray
    oracle_cost_sum: int

    def __len__(self):
        return len(self.actions)


def sample_action(bundle: PolicyBundle, x: np.ndarray, rng: np.random.Generator):
    logits = bundle.policy(x)
    logp = log_softmax(logits)
    u = rng.random()
    cdf = np.cumsum(np.exp(logp))
    a = min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), N_ACTIONS - 1)
    return a, float(logp[a])


def rollout(view: AgentView, bundle: PolicyBundle, constraint, h_c: np.ndarray,
            rng: np.random.Generator, max_steps: int | None = None) -> Episode:
    """Run one episode with actions sampled from the constraint-conditioned policy."""
    obs_l, act_l, logp_l, rew_l, cost_l, done_l = [], [], [], [], [], []
    obs = view.reset(constraint)
    done = False
    while not done:
        a, lp = sample_action(bundle, np.concatenate([obs, h_c]), rng)
        nxt, r, c, done, _ = view.step(a)
        if c not in (0, 1):
            raise ValueError(f"cost source returned {c}, expected 0 or 1")
        obs_l.append(obs)
        act_l.append(a)
        logp_l.append(lp)
        rew_l.append(r)
        cost_l.append(c)
        done_l.append(done)
        obs = nxt
        if max_steps is not None and len(act_l) >= max_steps:
            break
    n = len(act_l)
    return Episode(constraint.id, np.array(obs_l), np.tile(h_c, (n, 1)), np.array(act_l),
                   np.array(logp_l), np.array(rew_l, dtype=float), np.array(cost_l, dtype=float),
                   np.array(done_l), int(sum(view.audit.oracle_costs)))


def _values(net: MLP, x: np.ndarray) -> np.ndarray:
    return net(x)[:, 0]


def build_batch(bundle: PolicyBundle, episodes, config: TrainConfig) -> Batch:
    """Freeze critic values, advantages and targets for one update phase."""
    obs = np.concatenate([e.obs for e in episodes])
    hc = np.concatenate([e.hc for e in episodes])
    v_all = _values(bundle.value, obs)
    vc_all = _values(bundle.cost_value, np.concatenate([obs, hc], axis=1))
    adv, adv_c, vt, vct = [], [], [], []
    start = 0
    for e in episodes:
        sl = slice(start, start + len(e))
        start += len(e)
        # a truncated final step (not done) bootstraps from 0 as well: the
        # step fraction in the observation makes the horizon visible
        dones = e.dones.copy()
        dones[-1] = True
        for rew, vals, a_out, t_out in ((e.rewards, v_all[sl], adv, vt),
                                        (e.costs, vc_all[sl], adv_c, vct)):
            a = gae(rew, vals, dones, config.gamma, config.lam)
            a_out.append(a)
            if config.value_target == "td":
                t_out.append(td_errors(rew, vals, dones, config.gamma) + vals)
            else:
                t_out.append(a + vals)
    adv = np.concatenate(adv)
    if config.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return Batch(obs, hc, np.concatenate([e.actions for e in episodes]),
                 np.concatenate([e.logp for e in episodes]), adv, np.concatenate(adv_c),
                 np.concatenate(vt), np.concatenate(vct))


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite values at iteration {iteration}: {detail}")
        self.iteration = iteration


class Trainer:
    """Owns a PolicyBundle and its optimizer state."""

    def __init__(self, bundle: PolicyBundle, config: TrainConfig, freeze_alpha: bool = False):
        self.bundle = bundle
        self.config = config
        self.freeze_alpha = freeze_alpha
        self.optims = {name: Adam(net.params, lr=config.lr, max_grad_norm=config.max_grad_norm)
                       for name, net in bundle.networks().items()}
        self.iteration = 0

    def update(self, episodes, rng: np.random.Generator) -> dict:
        cfg = self.config
        batch = build_batch(self.bundle, episodes, cfg)
        stats = []
        for _ in range(cfg.epochs):
            order = rng.permutation(len(batch))
            for s in range(0, len(batch), cfg.minibatch_size):
                mb = batch.take(order[s:s + cfg.minibatch_size])
                total, parts, grads = objective_and_grads(self.bundle, mb, self.bundle.alpha, cfg)
                for name, g in grads.items():
                    self.optims[name].step([-x for x in g])
                stats.append(total)
        if not self.freeze_alpha:
            self.bundle.alpha = update_lagrange(self.bundle.alpha, [e.costs.sum() for e in episodes],
                                                cfg.cost_budget, cfg.lagrange_lr)
        self.iteration += 1
        if not self.bundle.is_finite():
            raise TrainingDiverged(self.iteration, "parameters or alpha")
        return {"objective": float(np.mean(stats)), "alpha": self.bundle.alpha}

    # --- checkpoints ---
    def state_arrays(self) -> dict:
        arrays = {"alpha": np.array(self.bundle.alpha), "iteration": np.array(self.iteration)}
        for name, net in self.bundle.networks().items():
            opt = self.optims[name]
            arrays[f"{name}/t"] = np.array(opt.t)
            for i, p in enumerate(net.params):
                arrays[f"{name}/p{i}"] = p
                arrays[f"{name}/m{i}"] = opt.m[i]
                arrays[f"{name}/v{i}"] = opt.v[i]
        return arrays

    def save(self, path, config_hash: str) -> None:
        buf = io.BytesIO()
        np.savez(buf, format_version=np.array(CHECKPOINT_VERSION),
                 config_hash=np.array(config_hash), **self.state_arrays())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    def load(self, path, config_hash: str | None = None) -> None:
        with np.load(path) as data:
            if int(data["format_version"]) != CHECKPOINT_VERSION:
                raise ValueError("unsupported checkpoint version")
            if config_hash is not None and str(data["config_hash"]) != config_hash:
                raise ValueError("checkpoint was written for a different config")
            self.bundle.alpha = float(data["alpha"])
            self.iteration = int(data["iteration"])
            for name, net in self.bundle.networks().items():
                opt = self.optims[name]
                opt.t = int(data[f"{name}/t"])
                for i in range(len(net.params)):
                    net.params[i][...] = data[f"{name}/p{i}"]
                    opt.m[i][...] = data[f"{name}/m{i}"]
                    opt.v[i][...] = data[f"{name}/v{i}"]


EPISODE_FIELDS = ("episode", "constraint_id", "reward_sum", "predicted_cost_sum",
                  "oracle_cost_sum", "alpha", "steps")


def train(config: TrainConfig, env_factory, corpus, encoder, cost_source=None, *,
          freeze_alpha: bool = False, hazards=None, on_episode=None):
    """Sample constraint, encode, roll out, update; repeat for ``total_episodes``.

    ``encoder(constraint) -> h_c`` runs condensation and embedding.
    ``cost_source`` is a ``(constraint, event) -> {0,1}`` predictor, ``ORACLE``
    or ``None``. ``env_factory(layout_seed)`` returns a :class:`HazardWorld`.
    Returns the trained :class:`Trainer` and one dict per episode.
    """
    pool = [c for c in corpus if hazards is None or c.prohibited in hazards]
    if not pool:
        raise ValueError("no constraints left to train on")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_act, rng_env, rng_upd = (np.random.default_rng(s) for s in seeds)
    h_cache = {}

    def h_of(c):
        if c.id not in h_cache:
            h_cache[c.id] = np.asarray(encoder(c), dtype=float)
        return h_cache[c.id]

    env = env_factory(None)
    view = AgentView(env, cost_source)
    bundle = PolicyBundle.create(view.observation_size, h_of(pool[0]).size, config.hidden,
                                 seed=int(seeds[0].generate_state(1)[0]), alpha=config.alpha_init)
    trainer = Trainer(bundle, config, freeze_alpha=freeze_alpha)
    rows, pending = [], []
    for ep in range(config.total_episodes):
        constraint = pool[int(rng_env.integers(len(pool)))]
        if config.resample_layout:
            view = AgentView(env_factory(int(rng_env.integers(2 ** 31))), cost_source)
        alpha = bundle.alpha
        episode = rollout(view, bundle, constraint, h_of(constraint), rng_act)
        pending.append(episode)
        row = {"episode": ep, "constraint_id": constraint.id,
               "reward_sum": float(episode.rewards.sum()),
               "predicted_cost_sum": int(episode.costs.sum()),
               "oracle_cost_sum": episode.oracle_cost_sum, "alpha": alpha,
               "steps": len(episode)}
        rows.append(row)
        if on_episode is not None:
            on_episode(row)
        if len(pending) == config.episodes_per_batch or ep == config.total_episodes - 1:
            try:
                trainer.update(pending, rng_upd)
            except FloatingPointError as exc:
                raise TrainingDiverged(trainer.iteration, str(exc)) from exc
            pending = []
    return trainer, rows


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
