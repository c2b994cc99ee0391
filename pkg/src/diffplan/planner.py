"""Guided reverse-diffusion planning.

Samples N trajectory candidates in parallel, steering each reverse step
with reward gradients, clamping onto the constraint set, and pinning the
current state into the first column.  The best candidate by composite
reward is returned.  With guidance off, no constraints and one candidate
the sampler reduces bit-for-bit to the unconditional prior.
"""

from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintSet, project, violation
from .diffusion import NoiseSchedule, candidate_streams, respace, _draw, \
    reverse_chain
from .rewards import RewardSpec, composite, composite_grad
from .trajectory import Trajectory, TrajectoryLayout, NormStats


class PlanningFailureError(RuntimeError):
    """Every candidate diverged to non-finite values."""


@dataclass(frozen=True)
class PlannerConfig:
    """Sampler knobs.

    ``guide_scale`` is the overall reward-planning gain; ``eta`` optionally
    modulates it per level (entry i applies to the update made right after
    stepping out of level i+1, so it is listed clean-to-noisy and must
    match the respaced level count).  ``physical_guidance`` switches the
    gradient update into physical units (the default); the normalized
    variant chain-rules the same physical gradient through the stats.
    """

    n_candidates: int = 1
    guide_scale: float = 0.0
    eta: tuple | None = None
    n_inference: int | None = None
    reward: RewardSpec = field(default_factory=RewardSpec)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    physical_guidance: bool = True
    deterministic: bool = False
    keep_candidates: bool = False

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate")
        if self.guide_scale < 0.0:
            raise ValueError("guide_scale must be >= 0")
        if self.n_inference is not None and self.n_inference < 1:
            raise ValueError("n_inference must be >= 1")


@dataclass
class PlanResult:
    best: Trajectory
    all_rewards: list
    selected_index: int
    diagnostics: dict


def rank_candidates(candidates, spec: RewardSpec):
    """Argmax of composite reward at the clean level; ties pick the
    lowest index (np.argmax keeps the first maximum)."""
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    rewards = np.array([composite(spec, np.asarray(c, dtype=np.float64))
                        for c in candidates])
    idx = int(np.argmax(rewards))
    return idx, float(rewards[idx])


def _eta_by_level(config: PlannerConfig, n_levels: int) -> np.ndarray:
    out = np.ones(n_levels + 1)
    if config.eta is not None:
        eta = np.asarray(config.eta, dtype=np.float64)
        if eta.shape != (n_levels,):
            raise ValueError(
                f"eta has {eta.shape[0] if eta.ndim == 1 else '?'} entries, "
                f"schedule has {n_levels} levels")
        out[1:] = eta
    return out


def guided_sample(denoiser, schedule: NoiseSchedule, config: PlannerConfig,
                  s0, seed: int, *, stats: NormStats,
                  layout: TrajectoryLayout, init_clean=None,
                  start_level: int | None = None) -> PlanResult:
    """Run the guided sampler and return the best candidate.

    ``init_clean`` warm-starts the chain: the clean (physical) plan is
    normalized, forward-noised per candidate to ``start_level`` and only
    the remaining levels are run.  Without it candidates start from
    standard normal noise at the top level.

    Per reverse level the order is: posterior step, reward update scaled
    by guide_scale * eta_k * sigma_k^2, constraint projection, first-state
    overwrite.  Candidates that go non-finite are dropped from ranking and
    listed in the diagnostics.
    """
    sched = schedule if config.n_inference is None \
        else respace(schedule, config.n_inference)
    levels = sched.n_levels
    eta = _eta_by_level(config, levels)

    s0 = np.asarray(s0, dtype=np.float64)
    if s0.shape != (layout.n_state,):
        raise ValueError(f"s0 must have shape ({layout.n_state},)")
    if not np.all(np.isfinite(s0)):
        raise ValueError("s0 must be finite")
    mean, scale = stats.mean, stats.scale
    s0_norm = (s0 - mean[:layout.n_state]) / scale[:layout.n_state]

    n = config.n_candidates
    streams = candidate_streams(seed, n)
    rows, horizon = denoiser.rows, denoiser.horizon

    if init_clean is None:
        start = levels
        x = _draw(streams, rows, horizon)
    else:
        start = levels if start_level is None else int(start_level)
        if not (1 <= start <= levels):
            raise ValueError(f"start_level {start} outside 1..{levels}")
        base = np.asarray(init_clean, dtype=np.float64)
        if base.shape != (rows, horizon):
            raise ValueError("init_clean shape mismatch")
        base_norm = stats.normalize(base)
        ab = sched.alpha_bar[start]
        noise = _draw(streams, rows, horizon)
        x = np.sqrt(ab) * base_norm[None] + np.sqrt(1.0 - ab) * noise

    alive = np.ones(n, dtype=bool)
    discard_level: dict = {}
    guidance_norm: list = []
    viol_pre: list = []
    viol_post: list = []
    steps = 0

    def hook(x, level):
        nonlocal steps
        steps += 1
        if config.guide_scale != 0.0 and config.reward:
            gain = config.guide_scale * eta[level] * sched.sigma2[level]
            norms = []
            if gain != 0.0:
                k_embed = int(sched.orig_index[level - 1])
                for i in range(n):
                    if not alive[i]:
                        continue
                    phys = stats.denormalize(x[i])
                    g = composite_grad(config.reward, phys, k_embed)
                    if config.physical_guidance:
                        phys = phys + gain * g
                        x[i] = stats.normalize(phys)
                    else:
                        x[i] = x[i] + gain * (g * scale[:, None])
                    norms.append(float(np.linalg.norm(gain * g)))
            guidance_norm.append(float(np.mean(norms)) if norms else 0.0)
        else:
            guidance_norm.append(0.0)
        if config.constraints:
            pre, post = 0.0, 0.0
            for i in range(n):
                if not alive[i]:
                    continue
                phys = stats.denormalize(x[i])
                pre = max(pre, max(violation(phys, config.constraints),
                                   default=0.0))
                phys = project(phys, config.constraints)
                post = max(post, max(violation(phys, config.constraints),
                                     default=0.0))
                x[i] = stats.normalize(phys)
            viol_pre.append(pre)
            viol_post.append(post)
        bad = ~np.isfinite(x).all(axis=(1, 2)) & alive
        for i in np.nonzero(bad)[0]:
            alive[i] = False
            discard_level[int(i)] = level
            x[i] = 0.0
        return x

    x = reverse_chain(denoiser, sched, x, streams, start,
                      s0_norm=s0_norm, n_state=layout.n_state, hook=hook,
                      deterministic=config.deterministic)

    if not alive.any():
        raise PlanningFailureError(
            f"all {n} candidates went non-finite (levels "
            f"{sorted(discard_level.values())})")

    phys_all = stats.denormalize(x)
    rewards = np.full(n, -np.inf)
    for i in range(n):
        if alive[i]:
            rewards[i] = composite(config.reward, phys_all[i])
    best_idx = int(np.argmax(rewards))
    best = Trajectory(phys_all[best_idx], layout.n_state, layout.n_action)

    diagnostics = {
        "n_reverse_steps": steps,
        "guidance_norm": guidance_norm,
        "violation_pre": viol_pre,
        "violation_post": viol_post,
        "discarded": sorted(discard_level),
        "discard_level": discard_level,
        "s0_violation": float(sum(violation(best.data, config.constraints))),
    }
    if config.keep_candidates:
        diagnostics["candidates"] = phys_all
        diagnostics["alive"] = alive.copy()
    return PlanResult(best=best, all_rewards=[float(r) for r in rewards],
                      selected_index=best_idx, diagnostics=diagnostics)
