"""Load balancing inside the frozen world model: a PPO agent adjusts the
four antenna channels by bounded per-step deltas to steer predicted traffic
toward a target profile. Training touches only world-model transitions; a
guard asserts the physics simulator is never called."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import physics
from .data import PreparedMap
from .fstcore import ModelInputs, WorldModel
from .netcore import NormalizationSpec, day_of_week, slot_of_day


@dataclass
class LoadBalanceTask:
    """Target traffic trajectory plus the oscillation penalty weight."""

    s_star: np.ndarray            # [N, T] raw traffic units
    lambda_delta: float = 0.01
    delta_bound: float = 0.1      # per-step |delta| cap per channel, normalized units

    def __post_init__(self):
        self.s_star = np.asarray(self.s_star, dtype=np.float64)
        if np.any(self.s_star < 0):
            raise ValueError("target trajectory must be non-negative")
        if self.lambda_delta < 0:
            raise ValueError("lambda_delta must be >= 0")
        self.s_bar_star = float(self.s_star.mean())


def make_balance_task(
    traffic_no_action: np.ndarray,
    neighbor_lists: dict[int, list[int]],
    shift_fraction: float = 0.35,
    smooth_window: int = 4,
    lambda_delta: float = 0.01,
) -> LoadBalanceTask:
    """Feasible-by-construction target: smooth the no-action trajectory and
    shift load from the most-loaded cell onto its graph neighbors."""
    s = np.asarray(traffic_no_action, dtype=np.float64).copy()
    if smooth_window > 1:
        kernel = np.ones(smooth_window) / smooth_window
        s = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, s)
    hot = int(np.argmax(s.mean(axis=1)))
    nbrs = neighbor_lists.get(hot, [])
    moved = shift_fraction * s[hot]
    s_star = s.copy()
    s_star[hot] -= moved
    if nbrs:
        for nb in nbrs:
            s_star[nb] += moved / len(nbrs)
    return LoadBalanceTask(np.clip(s_star, 0.0, None), lambda_delta=lambda_delta)


class WorldModelEnv:
    """One prediction round per step: the current per-cell action vector is
    held over the next P traffic steps, the model predicts them, and the
    reward tracks the target block at 1/s_bar_star scale minus the
    oscillation penalty.

    observation = [current normalized traffic state (N),
                   next-block normalized target mean (N),
                   current normalized actions (N*4)]
    action      = per-channel deltas in normalized units, clipped to the
                  per-step bound and to the physical range.
    """

    def __init__(
        self,
        model: WorldModel,
        spec: NormalizationSpec,
        map_data: PreparedMap,
        task: LoadBalanceTask,
        episode_len: int = 96,
        disable_action_conditioning: bool = False,
    ):
        self.model = model.with_flags(no_action=True) if disable_action_conditioning else model
        self.model.eval()
        self.spec = spec
        self.pm = map_data
        self.task = task
        self.p = self.model.cfg.p_horizon
        self.h = self.model.cfg.h_hist
        if episode_len % self.p != 0:
            raise ValueError(f"episode_len {episode_len} must be a multiple of P={self.p}")
        self.episode_len = episode_len
        self.n_env_steps = episode_len // self.p
        self.n = map_data.n_cells
        self.obs_dim = self.n * 6
        self.act_dim = self.n * 4
        self._rng = np.random.default_rng(0)
        self._t = None

    def seed(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def _target_block(self, t0: int) -> np.ndarray:
        idx = (t0 + np.arange(self.p)) % self.task.s_star.shape[1]
        return self.task.s_star[:, idx]

    def _obs(self) -> np.ndarray:
        tgt = self._target_block(self._t)
        tgt_norm = self.spec.normalize_traffic(tgt.mean(axis=1))
        state = self._buffer[:, -1].numpy()
        return np.concatenate([state, tgt_norm, self._act_norm.ravel()]).astype(np.float32)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.seed(seed)
        hi = self.pm.n_steps - self.h - self.episode_len
        if hi < 0:
            raise ValueError("map too short for the configured episode")
        self._t0 = int(self._rng.integers(0, hi + 1))
        self._t = self._t0 + self.h
        self._buffer = self.pm.traffic_norm[:, self._t0 : self._t0 + self.h].clone()
        self._act_hist = self.pm.actions_norm[:, self._t0 : self._t0 + self.h].clone()  # [N, H, 4]
        self._act_norm = self._act_hist[:, -1].numpy().copy()                            # [N, 4]
        self._steps_done = 0
        return self._obs()

    def step(self, delta: np.ndarray):
        if self._t is None:
            raise RuntimeError("call reset() first")
        delta = np.asarray(delta, dtype=np.float64).reshape(self.n, 4)
        delta = np.clip(delta, -self.task.delta_bound, self.task.delta_bound)
        applied = np.clip(self._act_norm + delta, -1.0, 1.0)
        osc = float(np.abs(applied - self._act_norm).mean())
        self._act_norm = applied

        future_act = torch.as_tensor(
            np.repeat(applied[:, None, :], self.p, axis=1), dtype=torch.float32
        )
        actions = torch.cat([self._act_hist, future_act], dim=1)       # [N, H+P, 4]
        ts = int(self.pm.timestamps[0]) + self._t - self.h + np.arange(self.h + self.p)
        ones_h = torch.ones(1, self.n, self.h)
        ones_p = torch.ones(1, self.n, self.p)
        inputs = ModelInputs(
            traffic_hist=self._buffer[None],
            actions=actions[None],
            mask_hist=ones_h,
            mask_future=ones_p,
            coords=self.pm.coords_norm[None],
            slots=torch.as_tensor(slot_of_day(ts), dtype=torch.int64)[None],
            dows=torch.as_tensor(day_of_week(ts), dtype=torch.int64)[None],
            poi=self.pm.poi[None],
            od=self.pm.od[None],
            fac=self.pm.fac[None],
            grid_coords=self.pm.grid_coords[None],
            fine_coords=self.pm.fine_coords[None],
        )
        with torch.no_grad():
            pred_norm = self.model(inputs)[0]                          # [N, P]
        if not torch.isfinite(pred_norm).all():
            return self._obs(), -100.0, True, {"error": "non-finite model output"}
        pred_raw = np.clip(self.spec.denormalize_traffic(pred_norm.numpy()), 0.0, None)
        tgt = self._target_block(self._t)
        track = float(np.abs(pred_raw - tgt).sum(axis=0).mean())       # mean over block of L1 norms
        reward = -track / self.task.s_bar_star - self.task.lambda_delta * osc

        self._buffer = torch.cat([self._buffer, pred_norm], dim=1)[:, -self.h :]
        self._act_hist = torch.cat([self._act_hist, future_act], dim=1)[:, -self.h :]
        self._t += self.p
        self._steps_done += 1
        done = self._steps_done >= self.n_env_steps
        info = {"pred_raw": pred_raw, "target": tgt, "track_l1": track, "osc": osc}
        return self._obs(), float(reward), done, info


def episode_objective(rewards: list[float]) -> float:
    """The optimization objective this reward decomposes: sum of per-step
    scaled tracking error plus the weighted oscillation terms. Numerically,
    sum(rewards) == -episode_objective."""
    return -float(np.sum(rewards))


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PolicyConfig:
    actor_hidden: int = 128
    critic_hidden: int = 128
    rollout_horizon: int = 240     # env steps gathered per update
    clip_ratio: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 1e-3
    epochs: int = 8
    minibatch: int = 120
    lr: float = 3e-4
    updates: int = 30
    seed: int = 0
    init_log_std: float = -1.2

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0, 1)")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")


class ActorCritic(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, cfg: PolicyConfig):
        super().__init__()
        self.actor = nn.Sequential(
            nn.Linear(obs_dim, cfg.actor_hidden),
            nn.Tanh(),
            nn.Linear(cfg.actor_hidden, cfg.actor_hidden),
            nn.Tanh(),
            nn.Linear(cfg.actor_hidden, act_dim),
        )
        # zero-init mean head: the policy starts at the zero-action baseline
        nn.init.zeros_(self.actor[-1].weight)
        nn.init.zeros_(self.actor[-1].bias)
        self.log_std = nn.Parameter(torch.full((act_dim,), cfg.init_log_std))
        self.critic = nn.Sequential(
            nn.Linear(obs_dim, cfg.critic_hidden),
            nn.Tanh(),
            nn.Linear(cfg.critic_hidden, cfg.critic_hidden),
            nn.Tanh(),
            nn.Linear(cfg.critic_hidden, 1),
        )

    def dist(self, obs: torch.Tensor) -> torch.distributions.Normal:
        return torch.distributions.Normal(self.actor(obs), self.log_std.exp())

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(obs).squeeze(-1)

    @torch.no_grad()
    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        t = torch.as_tensor(obs, dtype=torch.float32)
        mean = self.actor(t)
        if deterministic:
            return mean.numpy()
        return self.dist(t).sample().numpy()


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor, eps: float) -> torch.Tensor:
    """Negative PPO objective: -mean(min(r*A, clip(r, 1-eps, 1+eps)*A)).
    When the clipped branch is the active minimum, the gradient through the
    ratio is exactly zero."""
    unclipped = ratio * advantage
    clipped = torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage
    return -torch.minimum(unclipped, clipped).mean()


def compute_gae(rewards, values, dones, last_value, gamma, lam):
    n = len(rewards)
    adv = np.zeros(n)
    gae = 0.0
    for t in reversed(range(n)):
        nxt = last_value if t == n - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nxt * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + np.asarray(values)


@dataclass
class PPOResult:
    policy: ActorCritic
    curve: list = field(default_factory=list)   # mean episodic return per update


def ppo_train(env: WorldModelEnv, cfg: PolicyConfig) -> PPOResult:
    """Clipped-surrogate PPO with GAE over world-model transitions only."""
    physics_before = physics.call_count()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    env.seed(cfg.seed)
    policy = ActorCritic(env.obs_dim, env.act_dim, cfg)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    curve = []
    obs = env.reset(seed=cfg.seed)
    ep_returns: list[float] = []
    ep_ret = 0.0
    for update in range(cfg.updates):
        obs_buf, act_buf, rew_buf, done_buf, logp_buf, val_buf = [], [], [], [], [], []
        for _ in range(cfg.rollout_horizon):
            t_obs = torch.as_tensor(obs, dtype=torch.float32)
            with torch.no_grad():
                dist = policy.dist(t_obs)
                action = dist.sample()
                logp = dist.log_prob(action).sum()
                value = policy.value(t_obs)
            nxt, reward, done, _ = env.step(action.numpy())
            obs_buf.append(obs)
            act_buf.append(action.numpy())
            rew_buf.append(reward)
            done_buf.append(done)
            logp_buf.append(float(logp))
            val_buf.append(float(value))
            ep_ret += reward
            obs = nxt
            if done:
                ep_returns.append(ep_ret)
                ep_ret = 0.0
                obs = env.reset()
        with torch.no_grad():
            last_value = float(policy.value(torch.as_tensor(obs, dtype=torch.float32)))
        adv, ret = compute_gae(rew_buf, val_buf, done_buf, last_value, cfg.discount, cfg.gae_lambda)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        obs_t = torch.as_tensor(np.array(obs_buf), dtype=torch.float32)
        act_t = torch.as_tensor(np.array(act_buf), dtype=torch.float32)
        adv_t = torch.as_tensor(adv, dtype=torch.float32)
        ret_t = torch.as_tensor(ret, dtype=torch.float32)
        logp_old = torch.as_tensor(np.array(logp_buf), dtype=torch.float32)
        n = len(obs_buf)
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for i in range(0, n, cfg.minibatch):
                sel = torch.as_tensor(order[i : i + cfg.minibatch])
                dist = policy.dist(obs_t[sel])
                logp = dist.log_prob(act_t[sel]).sum(-1)
                ratio = torch.exp(logp - logp_old[sel])
                pg_loss = clipped_surrogate(ratio, adv_t[sel], cfg.clip_ratio)
                v_loss = ((policy.value(obs_t[sel]) - ret_t[sel]) ** 2).mean()
                ent = dist.entropy().sum(-1).mean()
                loss = pg_loss + 0.5 * v_loss - cfg.entropy_coef * ent
                if not torch.isfinite(loss):
                    raise RuntimeError(f"PPO diverged at update {update}")
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(policy.parameters(), 0.5)
                opt.step()
        mean_ret = float(np.mean(ep_returns[-8:])) if ep_returns else float("nan")
        curve.append({"update": update, "mean_return": mean_ret})
    if physics.call_count() != physics_before:
        raise RuntimeError("physics simulator was called during PPO training")
    return PPOResult(policy, curve)


# ---------------------------------------------------------------------------
# Evaluation and baselines


class ZeroPolicy:
    def __init__(self, act_dim: int):
        self.act_dim = act_dim

    def act(self, obs, deterministic=True):
        return np.zeros(self.act_dim)


class RandomPolicy:
    def __init__(self, act_dim: int, bound: float, seed: int = 0):
        self.act_dim = act_dim
        self.bound = bound
        self.rng = np.random.default_rng(seed)

    def act(self, obs, deterministic=False):
        return self.rng.uniform(-self.bound, self.bound, size=self.act_dim)


def run_episode(policy, env: WorldModelEnv, seed: int, deterministic: bool = True):
    obs = env.reset(seed=seed)
    preds, tgts, rewards = [], [], []
    done = False
    while not done:
        action = policy.act(obs, deterministic=deterministic)
        obs, reward, done, info = env.step(action)
        rewards.append(reward)
        if "pred_raw" in info:
            preds.append(info["pred_raw"])
            tgts.append(info["target"])
    pred = np.concatenate(preds, axis=1)
    tgt = np.concatenate(tgts, axis=1)
    return pred, tgt, rewards


def steady_state_rmse(pred: np.ndarray, tgt: np.ndarray) -> float:
    """Tracking RMSE over the final quarter of the episode's traffic steps."""
    t = pred.shape[1]
    q = max(1, t // 4)
    d = pred[:, -q:] - tgt[:, -q:]
    return float(np.sqrt(np.mean(d**2)))


def evaluate_policy(policies: dict, env: WorldModelEnv, seeds: list[int]) -> dict:
    """Steady-state tracking RMSE per policy over the given seeds; all
    policies see identical episode starts."""
    out: dict[str, dict] = {}
    for name, policy in policies.items():
        vals = []
        for s in seeds:
            pred, tgt, _ = run_episode(policy, env, seed=s)
            vals.append(steady_state_rmse(pred, tgt))
        out[name] = {
            "mean_rmse": float(np.mean(vals)),
            "std_rmse": float(np.std(vals)),
            "per_seed": [float(v) for v in vals],
        }
    return out
