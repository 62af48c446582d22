"""Independent reference computations used by the tests.

Nothing here calls into the code paths it is used to check.
"""

import numpy as np

from safelang.rloptim import Batch, PolicyBundle


def brute_force_gae(rewards, values, dones, gamma, lam, last_value=0.0):
    """Double sum over (gamma*lam)^l * delta_{t+l}, stopping at the episode end."""
    n = len(rewards)
    deltas = []
    for t in range(n):
        if dones[t]:
            nxt = 0.0
        elif t + 1 < n:
            nxt = values[t + 1]
        else:
            nxt = last_value
        deltas.append(rewards[t] + gamma * nxt - values[t])
    adv = []
    for t in range(n):
        total = 0.0
        for l in range(n - t):
            total += (gamma * lam) ** l * deltas[t + l]
            if dones[t + l]:
                break
        adv.append(total)
    return np.array(adv)


def rel_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def central_difference(f, arr, idx, h=1e-6):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def random_bundle_and_batch(rng, n=8, obs_dim=5, hc_dim=3, hidden=(4, 4), eps=0.2):
    bundle = PolicyBundle.create(obs_dim, hc_dim, hidden, seed=int(rng.integers(2 ** 31)))
    for p in bundle.all_params():
        p[...] = rng.normal(scale=0.7, size=p.shape)
    obs = rng.normal(size=(n, obs_dim))
    hc = rng.normal(size=(n, hc_dim))
    actions = rng.integers(5, size=n)
    x = np.concatenate([obs, hc], axis=1)
    logits = bundle.policy(x)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    cur = logp[np.arange(n), actions]
    # keep every ratio well away from the clip kinks so central differences are valid
    log_ratio = np.empty(n)
    for i in range(n):
        while True:
            r = rng.uniform(-0.6, 0.6)
            if min(abs(np.exp(r) - (1 - eps)), abs(np.exp(r) - (1 + eps))) > 1e-3:
                break
        log_ratio[i] = r
    batch = Batch(obs, hc, actions, cur - log_ratio, rng.normal(size=n), rng.normal(size=n),
                  rng.normal(size=n), rng.normal(size=n))
    return bundle, batch
