"""Reward-weighted interactive finetuning.

Planner rollouts are scored by realized return, windowed, and pushed into
a replay buffer; batches mixing fresh and replayed segments train the
denoiser with exponentially tilted weights exp(R/T), top-K filtered and
normalized to unit mean.  Equal returns with a full keep count reduce the
update to the plain denoising loss, gradient for gradient.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import simrobot as sim
from .diffusion import weighted_denoising_loss, respace
from .executor import warm_start
from .nets import AdamState, adam_step, NonFiniteGradientError
from .planner import PlannerConfig, guided_sample
from .trajectory import window_rollout

# plain exp below this argument, log-space shift above; keeps the small
# literal weight values exact while staying finite for extreme returns
OVERFLOW_ARG = 500.0


def compute_weights(returns, temperature: float) -> np.ndarray:
    """w_i = exp(R_i / T), overflow-guarded by a max shift when any
    argument is extreme (a pure rescaling the normalization cancels)."""
    if temperature <= 0.0:
        raise ValueError("temperature must be > 0")
    args = np.asarray(returns, dtype=np.float64) / temperature
    if args.size and np.max(args) > OVERFLOW_ARG:
        args = args - np.max(args)
    return np.exp(args)


def topk_normalize(weights, k_keep: int) -> np.ndarray:
    """Zero all but the K largest weights (ties keep the earliest index),
    then divide by the mean over the full batch, zeros included."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    if not (1 <= k_keep <= n):
        raise ValueError(f"k_keep {k_keep} outside 1..{n}")
    if k_keep >= n and n > 0 and np.all(w == w[0]):
        # uniform case must come out exactly 1 so the weighted update
        # reduces bitwise to the unweighted loss
        return np.ones(n)
    kept = np.zeros(n)
    # stable sort on (-w) keeps the earliest of tied weights
    order = np.argsort(-w, kind="stable")[:k_keep]
    kept[order] = w[order]
    return kept / np.mean(kept)


def adaptive_temperature(returns, floor: float = 0.05) -> float:
    """Interquartile range of recent returns, floored away from zero."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        return floor
    q1, q3 = np.percentile(r, [25.0, 75.0])
    return float(max(q3 - q1, floor))


@dataclass(frozen=True)
class WeightingConfig:
    temperature: float = 1.0
    k_keep: int = 8
    batch_size: int = 32
    mix_fresh: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if not (1 <= self.k_keep <= self.batch_size):
            raise ValueError("need 1 <= k_keep <= batch_size")
        if not (0.0 <= self.mix_fresh <= 1.0):
            raise ValueError("mix_fresh must lie in [0, 1]")


class ReplayBuffer:
    """Ring buffer of (segment, return, tag) triples, oldest-out."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._segments: list = []
        self._returns: list = []
        self._tags: list = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._segments)

    def push(self, segment: np.ndarray, ret: float, tag: int = 0) -> None:
        ret = float(ret)
        if not math.isfinite(ret):
            raise ValueError("buffer entries need a finite return")
        seg = np.asarray(segment, dtype=np.float32)
        if len(self._segments) < self.capacity:
            self._segments.append(seg)
            self._returns.append(ret)
            self._tags.append(tag)
        else:
            self._segments[self._next] = seg
            self._returns[self._next] = ret
            self._tags[self._next] = tag
            self._next = (self._next + 1) % self.capacity

    def sample_mixed(self, rng: np.random.Generator, n: int,
                     mix_fresh: float, fresh_tag: int,
                     replay_temp: float = 0.0):
        """Draw ~mix_fresh*n segments tagged fresh, the rest from anywhere
        else in the buffer; either pool falls back to the other when
        empty.  Returns (batch (n,rows,H) float64, returns (n,)).

        replay_temp > 0 tilts the replay draws toward high-return entries
        (probability ∝ exp(R/replay_temp)); low-return failure windows
        stay stored but rarely resurface once better material exists."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        tags = np.asarray(self._tags)
        fresh_idx = np.nonzero(tags == fresh_tag)[0]
        old_idx = np.nonzero(tags != fresh_tag)[0]
        n_fresh = int(round(mix_fresh * n))
        if fresh_idx.size == 0:
            n_fresh = 0
        if old_idx.size == 0:
            n_fresh = n
        picks = []
        if n_fresh > 0:
            picks.append(rng.choice(fresh_idx, size=n_fresh, replace=True))
        if n - n_fresh > 0:
            p = None
            if replay_temp > 0 and old_idx.size > 1:
                r = np.array([self._returns[i] for i in old_idx])
                w = np.exp((r - np.max(r)) / replay_temp)
                p = w / np.sum(w)
            picks.append(rng.choice(old_idx, size=n - n_fresh,
                                    replace=True, p=p))
        idx = np.concatenate(picks)
        batch = np.stack([self._segments[i] for i in idx]).astype(np.float64)
        rets = np.array([self._returns[i] for i in idx])
        return batch, rets


def rwd_update(denoiser, tau0_norm: np.ndarray, returns, schedule,
               config: WeightingConfig, opt: AdamState,
               rng: np.random.Generator, anchor: np.ndarray | None = None):
    """One reward-weighted denoising step on a normalized (B, rows, H)
    batch; returns (loss, new optimizer state).

    `anchor` appends already-normalized segments at fixed weight 1 (the
    plain denoising objective).  The exponential tilt then competes only
    among the interaction batch while the anchors hold the model on the
    demonstration manifold; without them a few hundred narrow on-policy
    batches erase the pretrained gait."""
    tau0 = np.asarray(tau0_norm, dtype=np.float64)
    b = tau0.shape[0]
    w = compute_weights(returns, config.temperature)
    wbar = topk_normalize(w, min(config.k_keep, b))
    if anchor is not None and len(anchor):
        anc = np.asarray(anchor, dtype=np.float64)
        tau0 = np.concatenate([tau0, anc], axis=0)
        wbar = np.concatenate([wbar, np.ones(anc.shape[0])])
    ks = rng.integers(1, schedule.n_levels + 1, size=tau0.shape[0])
    eps = rng.standard_normal(tau0.shape)
    loss, grads = weighted_denoising_loss(denoiser, tau0, ks, eps,
                                          schedule, wbar)
    if not math.isfinite(loss):
        raise NonFiniteGradientError(f"finetune loss diverged: {loss}")
    denoiser.mlp.params = adam_step(denoiser.mlp.params, grads, opt)
    return loss, opt


@dataclass(frozen=True)
class InteractiveConfig:
    """Knobs for the online loop; defaults are the desk-scale run."""

    iterations: int = 200
    episodes_per_iter: int = 4
    episode_steps: int = 160
    stride: int = 5
    batch_size: int = 32
    mix_fresh: float = 0.5
    k_keep: int | None = None          # None: ceil(batch/4)
    temperature: float | None = None   # None: adaptive IQR
    temp_floor: float = 0.05
    recent_window: int = 50
    buffer_capacity: int = 10_000
    clip_z: float = 8.0                # 0 disables
    anchor_batch: int = 32             # demo segments per update, 0 disables
    anchor_pool: int = 4096
    lr: float = 3e-4
    speed_limit: float = 1.0
    speed_floor: float = 0.3
    yaw_limit: float = 1.0
    randomize: bool = True
    use_planner: bool = True
    uniform_weights: bool = False
    plan_every: int = 8
    warm_margin: int = 3               # cached levels on replans, 0 = cold
    replay_temp: float = 20.0          # return tilt of replay draws, 0 uniform
    seed: int = 0


def _episode(denoiser, schedule, stats, layout, planner_cfg, cfg, seed, cmd):
    """One environment rollout driven by the receding-horizon planner.

    Replans warm-start from the shifted previous plan (same trick the
    deployment executor uses); cold replans every plan_every ticks put a
    seam through every training window and the model gets visibly worse
    when trained on that jitter."""
    params, state = sim.reset(seed, cfg.randomize, v_cmd=cmd)
    horizon = denoiser.horizon
    sched_inf = respace(schedule, planner_cfg.n_inference)
    cache = {"plan": None, "at": 0}

    def policy(st, pr):
        idx = cache["at"]
        if cache["plan"] is None or idx >= min(cfg.plan_every, horizon):
            obs = sim.observation(st, pr)
            init, start = (None, None)
            if cfg.warm_margin > 0 and cache["plan"] is not None:
                init, start = warm_start(cache["plan"].data, idx,
                                         sched_inf, cfg.warm_margin)
            res = guided_sample(denoiser, schedule, planner_cfg, obs,
                                seed * 100003 + st.t, stats=stats,
                                layout=layout, init_clean=init,
                                start_level=start)
            cache["plan"] = res.best
            cache["at"] = 0
            idx = 0
        cache["at"] = idx + 1
        return cache["plan"].actions[:, idx]

    rec = sim.rollout(policy, params, state, cfg.episode_steps, seed=seed)
    return rec


def train_interactive(denoiser, schedule, stats, layout, task,
                      cfg: InteractiveConfig,
                      planner_cfg: PlannerConfig | None = None,
                      buffer: ReplayBuffer | None = None,
                      demos: np.ndarray | None = None):
    """Run the interactive loop and return the learning curve.

    Each iteration rolls out a few randomized-environment episodes,
    scores them with ``task``, windows them into segments inheriting the
    episode return, and applies one tilted denoising update on a mixed
    fresh/replay batch.  Failure episodes stay in the data; their low
    returns are what the filter keys on.

    ``demos`` (raw physical segments, usually the pretraining corpus)
    feeds the per-update anchor block; see rwd_update.
    """
    if planner_cfg is None:
        # ranking needs a reward spec, so the bare default is single-sample
        planner_cfg = PlannerConfig(n_candidates=1, n_inference=10)
    if buffer is None:
        buffer = ReplayBuffer(cfg.buffer_capacity)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.for_params(denoiser.mlp.params, lr=cfg.lr)
    k_keep = cfg.k_keep if cfg.k_keep is not None \
        else max(1, math.ceil(cfg.batch_size / 4))
    anchor_pool = None
    if demos is not None and cfg.anchor_batch > 0 and len(demos):
        pool = np.asarray(demos, dtype=np.float64)
        if pool.shape[0] > cfg.anchor_pool:
            sel = rng.choice(pool.shape[0], size=cfg.anchor_pool,
                             replace=False)
            pool = pool[sel]
        anchor_pool = stats.normalize(pool)
    recent: list = []
    curve = []

    for it in range(cfg.iterations):
        # one command per iteration so tilted weights compare episodes
        # attempting the same thing; the band starts where the model
        # already walks and ramps toward speed_limit, never dipping to
        # near-zero commands where standing is return-competitive
        frac = it / max(cfg.iterations - 1, 1)
        hi = cfg.speed_floor + (cfg.speed_limit - cfg.speed_floor) \
            * min(1.0, frac / 0.6)
        lo = max(cfg.speed_floor - 0.05, hi - 0.15)
        mag = float(rng.uniform(lo, hi))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if cfg.yaw_limit > 0 and rng.random() < 0.25:
            yaw = float(rng.uniform(-cfg.yaw_limit, cfg.yaw_limit))
        else:
            yaw = 0.0
        cmd = (sign * mag, 0.0, yaw)
        rets, tracks, fails = [], [], 0
        for e in range(cfg.episodes_per_iter):
            ep_seed = cfg.seed * 1_000_000 + it * 1000 + e
            if cfg.use_planner:
                rec = _episode(denoiser, schedule, stats, layout,
                               planner_cfg, cfg, ep_seed, cmd)
            else:
                rec = _prior_episode(denoiser, schedule, stats, layout,
                                     cfg, ep_seed, cmd)
            ret = sim.realized_return(rec, task)
            rets.append(ret)
            recent.append(ret)
            fails += int(rec.terminated)
            if rec.n_steps:
                tracks.append(float(np.mean(
                    np.sqrt(rec.components["verr2"]))))
            for seg in window_rollout(rec.pairs(), denoiser.horizon,
                                      cfg.stride):
                buffer.push(seg.data, ret, tag=it)
        recent = recent[-cfg.recent_window:]

        if cfg.uniform_weights:
            temp, kk = 1.0, cfg.batch_size
            batch_returns_zero = True
        else:
            temp = cfg.temperature if cfg.temperature is not None \
                else adaptive_temperature(recent, cfg.temp_floor)
            kk = k_keep
            batch_returns_zero = False
        wcfg = WeightingConfig(temperature=temp, k_keep=kk,
                               batch_size=cfg.batch_size,
                               mix_fresh=cfg.mix_fresh)
        batch, brets = buffer.sample_mixed(rng, cfg.batch_size,
                                           cfg.mix_fresh, fresh_tag=it,
                                           replay_temp=cfg.replay_temp)
        if batch_returns_zero:
            brets = np.zeros_like(brets)
        batch_n = stats.normalize(batch)
        if cfg.clip_z > 0:
            # body-tilt channels are near-constant in the demo corpus, so
            # their tiny scales blow pre-fall flailing up to z ~ 250; one
            # such target wrecks the net, clip keeps the update sane
            np.clip(batch_n, -cfg.clip_z, cfg.clip_z, out=batch_n)
        anchor = None
        if anchor_pool is not None:
            ai = rng.choice(anchor_pool.shape[0],
                            size=min(cfg.anchor_batch, anchor_pool.shape[0]),
                            replace=False)
            anchor = anchor_pool[ai]
        loss, opt = rwd_update(denoiser, batch_n, brets,
                               schedule, wcfg, opt, rng, anchor=anchor)
        curve.append({
            "iteration": it,
            "mean_return": float(np.mean(rets)),
            "stability": 1.0 - fails / cfg.episodes_per_iter,
            "tracking_error": float(np.mean(tracks)) if tracks else float("nan"),
            "loss": float(loss),
            "temperature": float(temp),
        })
    return curve


def _prior_episode(denoiser, schedule, stats, layout, cfg, seed, cmd):
    """Null-control rollout: unguided single-sample plans."""
    null_cfg = PlannerConfig(n_candidates=1, n_inference=10)
    return _episode(denoiser, schedule, stats, layout, null_cfg, cfg,
                    seed, cmd)
