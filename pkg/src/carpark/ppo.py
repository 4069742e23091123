"""Proximal policy optimization written against plain numpy arrays: a
tanh multi-layer perceptron pair (actor with one categorical head per
action branch, critic with a scalar value head), hand-derived
reverse-mode gradients of the clipped-surrogate loss, an
adaptive-moment optimizer, and generalized advantage estimation.

All agents share one parameter set; rollout segments from every agent
feed a single buffer and are cut at the time horizon or at episode end.
The last 0.2 of the step budget is an evaluation phase: the update loop
keeps running with the learning rate exactly 0, so parameters stay
bit-identical while the metrics keep flowing.
"""

from __future__ import annotations

import csv
import math
import os
import random
from dataclasses import asdict, dataclass

import numpy as np

from .config import EnvironmentConfig
from .env import ActionTuple, ParkingEnv
from .metrics import (
    DEFAULT_SUMMARY_FREQ,
    STORE_BASENAME,
    MetricStore,
    TrainingRecorder,
    write_run_meta,
)

CHECKPOINT_VERSION = 1
PPO_MODEL_BASENAME = "model.npz"
REWARDS_BASENAME = "rewards.csv"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
VALUE_LOSS_WEIGHT = 0.5
ADV_NORM_EPS = 1e-8


@dataclass(frozen=True)
class PpoHyper:
    """Optimizer and rollout settings; the defaults are the tuned
    values used by every parking experiment."""

    total_steps: int
    lr: float = 1e-4
    batch: int = 32
    buffer: int = 4096
    horizon: int = 128
    epochs: int = 10
    gamma: float = 0.999
    lam: float = 0.925
    epsilon_clip: float = 0.25
    beta: float = 0.002
    hidden: int = 256
    layers: int = 3
    train_fraction: float = 0.8  # the rest is the lr=0 evaluation phase

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive: {self.total_steps}")
        for name in ("lr", "beta"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} cannot be negative")
        for name in ("batch", "buffer", "horizon", "epochs", "hidden",
                     "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch > self.buffer:
            raise ValueError(
                f"batch {self.batch} exceeds buffer size {self.buffer}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1]: {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1]: {self.lam}")
        if self.epsilon_clip <= 0.0:
            raise ValueError(
                f"epsilon_clip must be positive: {self.epsilon_clip}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1]: {self.train_fraction}")


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int,
                gain: float) -> np.ndarray:
    """Orthogonal weight matrix scaled by gain (QR of a gaussian draw,
    sign-fixed so the factorization is unique)."""
    flat = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


class PolicyParams:
    """Named parameter arrays for the actor and critic networks plus
    the optimizer's moment accumulators and step counter.

    Layer naming: actor.w0/b0 .. actor.w{L-1}, one actor.head{k}.w/b
    pair per action branch, the critic mirror, and critic.value.w/b.
    """

    def __init__(self, obs_dim: int, branches, hidden: int = 256,
                 layers: int = 3, rng: np.random.Generator | None = None):
        self.obs_dim = int(obs_dim)
        self.branches = tuple(int(b) for b in branches)
        self.hidden = int(hidden)
        self.layers = int(layers)
        if self.obs_dim < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError("network dimensions must be positive")
        if not self.branches or min(self.branches) < 1:
            raise ValueError("action branches must be non-empty and positive")
        if rng is None:
            rng = np.random.default_rng()
        data: dict[str, np.ndarray] = {}
        for prefix in ("actor", "critic"):
            n_in = self.obs_dim
            for i in range(self.layers):
                data[f"{prefix}.w{i}"] = _orthogonal(
                    rng, n_in, self.hidden, math.sqrt(2.0))
                data[f"{prefix}.b{i}"] = np.zeros(self.hidden)
                n_in = self.hidden
        for k, size in enumerate(self.branches):
            data[f"actor.head{k}.w"] = _orthogonal(rng, self.hidden, size, 0.01)
            data[f"actor.head{k}.b"] = np.zeros(size)
        data["critic.value.w"] = _orthogonal(rng, self.hidden, 1, 1.0)
        data["critic.value.b"] = np.zeros(1)
        self.data = data
        self.m = {name: np.zeros_like(arr) for name, arr in data.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in data.items()}
        self.t = 0

    def checksum(self) -> float:
        """Order-stable digest of the parameter values; used to verify
        the evaluation phase leaves them untouched."""
        return float(sum(float(np.sum(self.data[k])) for k in sorted(self.data)))

    # ---------------------------------------------------------- persistence

    def save(self, path: str) -> None:
        arrays = {f"p.{k}": v for k, v in self.data.items()}
        arrays.update({f"m.{k}": v for k, v in self.m.items()})
        arrays.update({f"v.{k}": v for k, v in self.v.items()})
        arrays["meta"] = np.array(
            [CHECKPOINT_VERSION, self.obs_dim, self.hidden, self.layers,
             self.t], dtype=np.int64)
        arrays["branches"] = np.array(self.branches, dtype=np.int64)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "PolicyParams":
        with np.load(path) as archive:
            if "meta" not in archive or "branches" not in archive:
                raise ValueError(f"{path}: not a policy checkpoint")
            meta = archive["meta"]
            if meta[0] != CHECKPOINT_VERSION:
                raise ValueError(
                    f"{path}: unsupported checkpoint version {meta[0]}")
            obs_dim, hidden, layers = int(meta[1]), int(meta[2]), int(meta[3])
            branches = tuple(int(b) for b in archive["branches"])
            params = cls(obs_dim, branches, hidden, layers,
                         rng=np.random.default_rng(0))
            for name in params.data:
                for store, tag in ((params.data, "p"), (params.m, "m"),
                                   (params.v, "v")):
                    key = f"{tag}.{name}"
                    if key not in archive:
                        raise ValueError(f"{path}: missing array {key}")
                    arr = archive[key]
                    if arr.shape != store[name].shape:
                        raise ValueError(
                            f"{path}: {key} has shape {arr.shape}, expected "
                            f"{store[name].shape}")
                    if not np.isfinite(arr).all():
                        raise ValueError(f"{path}: non-finite values in {key}")
                    store[name] = arr.astype(np.float64)
            params.t = int(meta[4])
        return params


def _mlp_acts(data: dict, prefix: str, layers: int,
              x: np.ndarray) -> list[np.ndarray]:
    """Hidden activations, input first; every hidden layer is tanh."""
    acts = [x]
    h = x
    for i in range(layers):
        h = np.tanh(h @ data[f"{prefix}.w{i}"] + data[f"{prefix}.b{i}"])
        acts.append(h)
    return acts


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _actor_logps(params: PolicyParams, x: np.ndarray):
    """Per-branch log-probability matrices plus the activation cache."""
    acts = _mlp_acts(params.data, "actor", params.layers, x)
    h = acts[-1]
    logps = []
    for k in range(len(params.branches)):
        logits = h @ params.data[f"actor.head{k}.w"] \
            + params.data[f"actor.head{k}.b"]
        logps.append(_log_softmax(logits))
    return logps, acts


def _critic_values(params: PolicyParams, x: np.ndarray):
    acts = _mlp_acts(params.data, "critic", params.layers, x)
    values = (acts[-1] @ params.data["critic.value.w"]
              + params.data["critic.value.b"]).ravel()
    return values, acts


def forward(params: PolicyParams, observation) -> tuple[list[np.ndarray], float]:
    """Distribution per action branch and the state value for a single
    observation vector."""
    x = np.asarray(observation, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params.obs_dim:
        raise ValueError(
            f"observation has {x.shape[1]} features, the policy expects "
            f"{params.obs_dim}")
    logps, _ = _actor_logps(params, x)
    values, _ = _critic_values(params, x)
    dists = [np.exp(lp[0]) for lp in logps]
    if not all(np.isfinite(d).all() for d in dists) \
            or not math.isfinite(values[0]):
        raise FloatingPointError("non-finite activation in policy forward")
    return dists, float(values[0])


def gae(rewards, values, terminals, gamma: float, lam: float,
        bootstrap: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Advantages from exponentially weighted TD residuals, and the
    value targets advantages+values. terminals mark steps whose next
    state bootstraps from zero; a segment cut mid-episode passes the
    next state's value estimate as bootstrap."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    n = len(rewards)
    if len(values) != n or len(terminals) != n:
        raise ValueError("rewards, values and terminals must align")
    advantages = np.empty(n)
    next_value = float(bootstrap)
    running = 0.0
    for t in range(n - 1, -1, -1):
        cont = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * next_value * cont - values[t]
        running = delta + gamma * lam * cont * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


class RolloutBuffer:
    """Trajectory steps awaiting an update pass: observation, action
    indices per branch, behavior log-prob, reward, value, terminal
    flag, and the advantages/returns computed when the segment was
    inserted. Segments enter whole, at the time horizon or at episode
    end, and the buffer is drained by each update cycle."""

    def __init__(self, capacity: int = 4096, horizon: int = 128):
        if capacity < 1 or horizon < 1:
            raise ValueError("capacity and horizon must be positive")
        self.capacity = int(capacity)
        self.horizon = int(horizon)
        self.clear()

    def clear(self) -> None:
        self.obs: list[np.ndarray] = []
        self.actions: list[tuple[int, ...]] = []
        self.logp: list[float] = []
        self.rewards: list[float] = []
        self.values: list[float] = []
        self.terminals: list[bool] = []
        self.advantages: list[float] = []
        self.returns: list[float] = []

    @property
    def size(self) -> int:
        return len(self.rewards)

    @property
    def full(self) -> bool:
        return self.size >= self.capacity

    def add_segment(self, obs, actions, logp, rewards, values, terminals,
                    gamma: float, lam: float, bootstrap: float = 0.0) -> None:
        n = len(rewards)
        if n == 0:
            return
        if n > self.horizon:
            raise ValueError(
                f"segment of {n} steps exceeds the time horizon "
                f"{self.horizon}")
        if not (len(obs) == len(actions) == len(logp) == len(values)
                == len(terminals) == n):
            raise ValueError("segment series must align")
        adv, ret = gae(rewards, values, terminals, gamma, lam, bootstrap)
        self.obs.extend(obs)
        self.actions.extend(actions)
        self.logp.extend(logp)
        self.rewards.extend(rewards)
        self.values.extend(values)
        self.terminals.extend(terminals)
        self.advantages.extend(adv.tolist())
        self.returns.extend(ret.tolist())

    def drain(self) -> dict:
        batch = {
            "obs": np.asarray(self.obs, dtype=np.float64),
            "actions": np.asarray(self.actions, dtype=np.int64),
            "logp": np.asarray(self.logp, dtype=np.float64),
            "advantages": np.asarray(self.advantages, dtype=np.float64),
            "returns": np.asarray(self.returns, dtype=np.float64),
        }
        self.clear()
        return batch


def _entropy_terms(logps: list[np.ndarray]) -> list[np.ndarray]:
    # p*log p with the 0*log 0 = 0 convention (underflowed probabilities)
    out = []
    for lp in logps:
        p = np.exp(lp)
        out.append(-np.where(p > 0.0, p * lp, 0.0).sum(axis=1))
    return out


def ppo_loss(params: PolicyParams, obs, actions, logp_old, advantages,
             returns, epsilon_clip: float, beta: float) -> tuple[float, dict]:
    """Composite minimization loss: negative clipped surrogate, plus
    half the value MSE, minus beta times the summed branch entropy."""
    x = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    n = len(x)
    logps, _ = _actor_logps(params, x)
    rows = np.arange(n)
    logp = sum(lp[rows, actions[:, k]] for k, lp in enumerate(logps))
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - epsilon_clip, 1.0 + epsilon_clip) \
        * advantages
    policy_loss = -float(np.minimum(unclipped, clipped).mean())
    entropy = float(sum(term.mean() for term in _entropy_terms(logps)))
    values, _ = _critic_values(params, x)
    value_loss = float(((values - returns) ** 2).mean())
    total = policy_loss + VALUE_LOSS_WEIGHT * value_loss - beta * entropy
    return total, {"policy_loss": policy_loss, "value_loss": value_loss,
                   "entropy": entropy}


def gradients(params: PolicyParams, obs, actions, logp_old, advantages,
              returns, epsilon_clip: float,
              beta: float) -> tuple[dict, dict]:
    """Exact reverse-mode gradients of ppo_loss for every parameter."""
    x = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    n = len(x)
    rows = np.arange(n)
    data = params.data
    grads: dict[str, np.ndarray] = {}

    logps, acts = _actor_logps(params, x)
    h = acts[-1]
    logp = sum(lp[rows, actions[:, k]] for k, lp in enumerate(logps))
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * advantages
    clipped_ratio = np.clip(ratio, 1.0 - epsilon_clip, 1.0 + epsilon_clip)
    clipped = clipped_ratio * advantages
    policy_loss = -float(np.minimum(unclipped, clipped).mean())
    entropies = _entropy_terms(logps)
    entropy = float(sum(term.mean() for term in entropies))

    # d(loss)/d(log pi): zero where the clipped branch is the active min,
    # since the clip is flat there
    active = unclipped <= clipped
    g_logp = -(advantages * ratio * active) / n

    d_h = np.zeros_like(h)
    for k, lp in enumerate(logps):
        p = np.exp(lp)
        one_hot = np.zeros_like(p)
        one_hot[rows, actions[:, k]] = 1.0
        d_logits = g_logp[:, None] * (one_hot - p)
        # entropy bonus: d(-beta*mean(H))/d(logits) with
        # dH/dz_j = -p_j(log p_j + H)
        d_logits += (beta / n) * p * (lp + entropies[k][:, None])
        grads[f"actor.head{k}.w"] = h.T @ d_logits
        grads[f"actor.head{k}.b"] = d_logits.sum(axis=0)
        d_h += d_logits @ data[f"actor.head{k}.w"].T
    for i in range(params.layers - 1, -1, -1):
        d_pre = d_h * (1.0 - acts[i + 1] ** 2)
        grads[f"actor.w{i}"] = acts[i].T @ d_pre
        grads[f"actor.b{i}"] = d_pre.sum(axis=0)
        d_h = d_pre @ data[f"actor.w{i}"].T

    values, c_acts = _critic_values(params, x)
    value_loss = float(((values - returns) ** 2).mean())
    d_values = VALUE_LOSS_WEIGHT * 2.0 * (values - returns) / n
    ch = c_acts[-1]
    grads["critic.value.w"] = ch.T @ d_values[:, None]
    grads["critic.value.b"] = np.array([d_values.sum()])
    d_h = d_values[:, None] @ data["critic.value.w"].T
    for i in range(params.layers - 1, -1, -1):
        d_pre = d_h * (1.0 - c_acts[i + 1] ** 2)
        grads[f"critic.w{i}"] = c_acts[i].T @ d_pre
        grads[f"critic.b{i}"] = d_pre.sum(axis=0)
        d_h = d_pre @ data[f"critic.w{i}"].T

    total = policy_loss + VALUE_LOSS_WEIGHT * value_loss - beta * entropy
    return grads, {"loss": total, "policy_loss": policy_loss,
                   "value_loss": value_loss, "entropy": entropy}


def adam_step(params: PolicyParams, grads: dict, lr: float) -> None:
    """In-place adaptive-moment update; lr=0 leaves every parameter
    bit-identical while the moments keep tracking."""
    params.t += 1
    correct1 = 1.0 - ADAM_BETA1 ** params.t
    correct2 = 1.0 - ADAM_BETA2 ** params.t
    for name, g in grads.items():
        m = params.m[name]
        v = params.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params.data[name] -= lr * (m / correct1) \
            / (np.sqrt(v / correct2) + ADAM_EPS)


def ppo_update(params: PolicyParams, buffer: RolloutBuffer,
               hyper: PpoHyper, lr: float,
               rng: np.random.Generator) -> dict:
    """Run `epochs` shuffled passes of minibatch updates over the
    buffer contents, then drain the buffer. Advantages are normalized
    per minibatch. Empty buffer is a no-op."""
    if buffer.size == 0:
        return {"updates": 0}
    batch = buffer.drain()
    count = len(batch["logp"])
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    updates = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(count)
        for start in range(0, count, hyper.batch):
            idx = order[start:start + hyper.batch]
            adv = batch["advantages"][idx]
            adv = (adv - adv.mean()) / (adv.std() + ADV_NORM_EPS)
            grads, parts = gradients(
                params, batch["obs"][idx], batch["actions"][idx],
                batch["logp"][idx], adv, batch["returns"][idx],
                hyper.epsilon_clip, hyper.beta)
            if not math.isfinite(parts["loss"]):
                raise FloatingPointError(
                    f"non-finite loss {parts['loss']} during update")
            adam_step(params, grads, lr)
            for key in totals:
                totals[key] += parts[key]
            updates += 1
    return {"updates": updates,
            **{key: val / updates for key, val in totals.items()}}


def lr_schedule(step: int, total_steps: int, lr0: float,
                train_fraction: float = 0.8) -> float:
    """Linear decay from lr0 to 0 over the training phase, then exactly
    0 for the evaluation phase."""
    cut = train_fraction * total_steps
    if step >= cut or cut <= 0.0:
        return 0.0
    return lr0 * (1.0 - step / cut)


@dataclass
class PpoTrainResult:
    params: PolicyParams
    rewards: list[float]  # cumulative reward per finished episode
    total_steps: int
    train_boundary_step: int
    out_dir: str | None


def _check_params_dims(params: PolicyParams, env: ParkingEnv,
                       obs_dim: int) -> None:
    branches = tuple(env.action_schema.branches)
    if params.obs_dim != obs_dim or params.branches != branches:
        raise ValueError(
            f"policy was built for {params.obs_dim} observation features "
            f"and action branches {params.branches}, but the environment "
            f"produces {obs_dim} and {branches}")


def _sample_branches(logps: list[np.ndarray], offsets,
                     rng: np.random.Generator):
    """Sample one action index per branch; returns the index tuple, the
    env-facing action values, and the joint log-probability."""
    idx = []
    logp = 0.0
    for lp in logps:
        p = np.exp(lp[0])
        u = rng.random() * p.sum()  # guard against rounding below 1.0
        j = min(int(np.searchsorted(np.cumsum(p), u, side="right")),
                len(p) - 1)
        idx.append(j)
        logp += float(lp[0, j])
    values = tuple(j - off for j, off in zip(idx, offsets))
    return tuple(idx), ActionTuple(*values), logp


def train_ppo(cfg: EnvironmentConfig, hyper: PpoHyper,
              out_dir: str | None = None, *, env: ParkingEnv | None = None,
              params: PolicyParams | None = None, seed: int | None = None,
              summary_freq: int = DEFAULT_SUMMARY_FREQ,
              dump_interval: int = 0, run_id: str | None = None,
              experiment: dict | None = None, log=None) -> PpoTrainResult:
    """Collect rollouts from all agents into one buffer and optimize a
    single shared policy for total_steps agent-steps.

    With an output directory the run persists the checkpoint, the
    per-episode reward series, the metric store, and run metadata
    carrying the recorded training boundary.
    """
    rng = random.Random(seed)
    np_rng = np.random.default_rng(seed)
    if env is None:
        env = ParkingEnv(cfg, rng=rng)
    if env.obs_mode != "normalized":
        raise ValueError(
            "policy-gradient training requires the normalized observation "
            "mode; set _normalizeObs")
    obs_dim = len(env.observe(0))
    if params is None:
        params = PolicyParams(obs_dim, env.action_schema.branches,
                              hyper.hidden, hyper.layers, rng=np_rng)
    else:
        _check_params_dims(params, env, obs_dim)
    if cfg.carScaleTrain != 1.0 and env.car_scale != cfg.carScaleTrain:
        env.set_car_scale(cfg.carScaleTrain)

    if experiment is None:
        experiment = {
            "trainer": "ppo",
            "environment_parameters": cfg.to_mapping(),
            "hyperparameters": asdict(hyper),
        }
    store = None
    recorder = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if run_id is None:
            run_id = os.path.basename(os.path.normpath(out_dir))
        write_run_meta(out_dir, {
            "kind": "ppo", "run_id": run_id, "finished": False, "seed": seed,
            "experiment": experiment,
        })
        store = MetricStore(os.path.join(out_dir, STORE_BASENAME),
                            summary_freq)
        recorder = TrainingRecorder(store, env)

    n = len(env.agents)
    offsets = env.action_schema.offsets
    buffer = RolloutBuffer(hyper.buffer, hyper.horizon)
    pending: list[dict] = [
        {"obs": [], "actions": [], "logp": [], "rewards": [], "values": [],
         "terminals": []} for _ in range(n)]
    rewards: list[float] = []
    episodes_done = 0
    gstep = 0
    boundary = None
    cut = hyper.train_fraction * hyper.total_steps

    def flush_segment(i: int, bootstrap: float) -> None:
        seg = pending[i]
        buffer.add_segment(seg["obs"], seg["actions"], seg["logp"],
                           seg["rewards"], seg["values"], seg["terminals"],
                           hyper.gamma, hyper.lam, bootstrap)
        for series in seg.values():
            series.clear()

    while gstep < hyper.total_steps:
        step_obs = []
        step_idx = []
        step_logp = []
        step_values = []
        acts = []
        for i in range(n):
            x = np.asarray(env.observe(i), dtype=np.float64)
            logps, _ = _actor_logps(params, x.reshape(1, -1))
            values, _ = _critic_values(params, x.reshape(1, -1))
            idx, action, logp = _sample_branches(logps, offsets, np_rng)
            step_obs.append(x)
            step_idx.append(idx)
            step_logp.append(logp)
            step_values.append(float(values[0]))
            acts.append(action)
        outs = env.step_all(acts)
        gstep += n
        if boundary is None and gstep >= cut:
            boundary = gstep
        if recorder is not None:
            recorder.after_step(gstep, outs)
        for i, out in enumerate(outs):
            seg = pending[i]
            terminal = out.terminal is not None
            seg["obs"].append(step_obs[i])
            seg["actions"].append(step_idx[i])
            seg["logp"].append(step_logp[i])
            seg["rewards"].append(out.reward)
            seg["values"].append(step_values[i])
            seg["terminals"].append(terminal)
            if terminal:
                flush_segment(i, 0.0)
                episodes_done += 1
                rewards.append(out.events.episode_reward)
                if (log is not None and dump_interval > 0
                        and episodes_done % dump_interval == 0):
                    recent = rewards[-dump_interval:]
                    log(f"episode {episodes_done}  step "
                        f"{gstep}/{hyper.total_steps}  mean reward "
                        f"{sum(recent) / len(recent):.3f}  lr "
                        f"{lr_schedule(gstep, hyper.total_steps, hyper.lr, hyper.train_fraction):.2e}")
            elif len(seg["rewards"]) >= hyper.horizon:
                x_next = np.asarray(env.observe(i), dtype=np.float64)
                values, _ = _critic_values(params, x_next.reshape(1, -1))
                flush_segment(i, float(values[0]))
        if buffer.full:
            lr = lr_schedule(gstep, hyper.total_steps, hyper.lr,
                             hyper.train_fraction)
            diag = ppo_update(params, buffer, hyper, lr, np_rng)
            if store is not None and diag["updates"]:
                store.record("Losses/Policy Loss", diag["policy_loss"],
                             gstep, "mean")
                store.record("Losses/Value Loss", diag["value_loss"],
                             gstep, "mean")
                store.record("Policy/Entropy", diag["entropy"],
                             gstep, "mean")

    if buffer.size > 0:  # final flush of the leftover tail
        lr = lr_schedule(gstep, hyper.total_steps, hyper.lr,
                         hyper.train_fraction)
        ppo_update(params, buffer, hyper, lr, np_rng)
    if boundary is None:
        boundary = gstep
    result = PpoTrainResult(params, rewards, gstep, boundary, out_dir)
    if out_dir is not None:
        params.save(os.path.join(out_dir, PPO_MODEL_BASENAME))
        with open(os.path.join(out_dir, REWARDS_BASENAME), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "reward"])
            for episode, reward in enumerate(rewards):
                writer.writerow([episode, reward])
        store.close()
        write_run_meta(out_dir, {
            "kind": "ppo", "run_id": run_id, "finished": True, "seed": seed,
            "total_steps": gstep, "total_episodes": episodes_done,
            "train_boundary_step": boundary,
            "experiment": experiment,
        })
    return result


def evaluate_ppo(params: PolicyParams, env: ParkingEnv, episodes: int,
                 store: MetricStore | None = None) -> dict:
    """Greedy rollouts (argmax per branch, no learning); returns
    outcome rates and the per-episode rewards."""
    if env.obs_mode != "normalized":
        raise ValueError("policy evaluation requires the normalized "
                         "observation mode; set _normalizeObs")
    _check_params_dims(params, env, len(env.observe(0)))
    if episodes <= 0:
        return {"episodes": 0, "park_rate": None, "crash_rate": None,
                "halt_rate": None, "mean_reward": None,
                "mean_length": None, "rewards": []}
    recorder = TrainingRecorder(store, env) if store is not None else None
    before = dict(env.stats)
    n = len(env.agents)
    offsets = env.action_schema.offsets
    rewards: list[float] = []
    lengths: list[int] = []
    gstep = 0
    while len(rewards) < episodes:
        acts = []
        for i in range(n):
            x = np.asarray(env.observe(i), dtype=np.float64).reshape(1, -1)
            logps, _ = _actor_logps(params, x)
            values = tuple(int(lp[0].argmax()) - off
                           for lp, off in zip(logps, offsets))
            acts.append(ActionTuple(*values))
        outs = env.step_all(acts)
        gstep += n
        if recorder is not None:
            recorder.after_step(gstep, outs)
        for out in outs:
            if out.terminal is not None:
                rewards.append(out.events.episode_reward)
                lengths.append(out.events.episode_steps)
    done = len(rewards)
    return {
        "episodes": done,
        "park_rate": (env.stats["parked"] - before["parked"]) / done,
        "crash_rate": (env.stats["crashed"] - before["crashed"]) / done,
        "halt_rate": (env.stats["halted"] - before["halted"]) / done,
        "mean_reward": sum(rewards) / done,
        "mean_length": sum(lengths) / done,
        "rewards": rewards,
        "total_steps": gstep,
    }
