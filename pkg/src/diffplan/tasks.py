"""Adaptation task presets pairing simulator scoring with planning objectives.

Each preset bundles three views of one behavioral goal: a Task that scores
episode records from the simulator (the ground-truth side), a RewardSpec
the planner ranks or steers samples with (the model side), and an optional
ConstraintSet for hard enforcement.  Presets also carry default guidance
gains and the evaluation command, so the eval harness and the CLI can
reference a task purely by name.

Every planning spec includes a command-consistency term so that reward
shaping cannot buy penalty reductions by giving up velocity tracking; the
evaluation harness separately enforces the tracking gate against the
no-adaptation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintSet, joint_range_box, rate_limit_box
from .rewards import (BalanceTerm, DriveTrackTerm, EnergyTerm, LearnedTerm,
                      PostureTerm, RangeTerm, RewardModel, RewardSpec,
                      SmoothnessTerm)
from .simrobot import EnvParams, Task
from .trajectory import TrajectoryLayout

HEIGHT_TARGET = 0.15

# tightened joint box for the range task: the lower bound cuts into the
# nominal gait's swing, the upper bound stays permissive, so feasibility
# requires biasing the wave upward rather than killing it
RANGE_Q_MIN = 0.65
RANGE_Q_MAX = 1.45

POSTURE_SHIFT = 0.25          # target offset for the posture tasks
RATE_LIMIT = 6.0              # rad/s box for the velocity tasks' hard mode

TASK_NAMES = (
    "joint_vel",
    "joint_acc",
    "joint_range",
    "posture_neg",
    "posture_pos",
    "balance",
    "energy",
    "height",
    "track",
)


@dataclass
class AdaptationTask:
    """A named adaptation objective with all three enforcement routes."""

    name: str
    task: Task                    # environment-side scoring
    reward: RewardSpec            # planner-side objective (incl. tracking)
    constraints: ConstraintSet    # hard projection version, may be empty
    guide_scale: float            # default guidance gain for this objective
    eval_command: tuple = (0.4, 0.0, 0.0)
    needs_model: bool = False


def _action_range_sq(q_min: float, q_max: float):
    """Per-step summed squared violation of the commanded joint targets.

    Measured on actions rather than realized positions because projection
    acts on the plan; this is the quantity constraint mode forces to zero.
    """
    def fn(record):
        a = record.actions
        over = np.maximum(a - q_max, 0.0)
        under = np.maximum(q_min - a, 0.0)
        return np.sum(over * over + under * under, axis=1)
    return fn


def _posture_dist_sq(layout: TrajectoryLayout, q_target: np.ndarray):
    def fn(record):
        q = record.observations[:, layout.q]
        d = q - q_target
        return np.sum(d * d, axis=1)
    return fn


def _height_err_sq(target: float):
    def fn(record):
        e = record.components["height"] - target
        return e * e
    return fn


def make_task(name: str, params: EnvParams | None = None,
              reward_model: RewardModel | None = None) -> AdaptationTask:
    """Build the named preset against the given environment parameters.

    ``reward_model`` is required for the learned-height task and ignored
    elsewhere.  Raises KeyError for unknown names.
    """
    if name not in TASK_NAMES:
        raise KeyError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    params = params or EnvParams()
    layout = params.layout
    qn = np.asarray(params.q_nominal, dtype=np.float64)
    track = DriveTrackTerm(layout, q_ref=qn, drive_gain=params.drive_gain)
    track_w = 25.0

    if name == "track":
        # pure tracking, used by the finetuning loop
        return AdaptationTask(
            name=name,
            task=Task("track"),
            reward=RewardSpec.of((track, track_w)),
            constraints=ConstraintSet(),
            guide_scale=0.0,
        )

    if name == "joint_vel":
        term = SmoothnessTerm(layout, lam_vel=1.0, lam_acc=0.0, dt=params.dt)
        return AdaptationTask(
            name=name,
            task=Task(name, penalties={"vel2": 0.01}),
            reward=RewardSpec.of((track, track_w), (term, 1e-3)),
            constraints=ConstraintSet.of(rate_limit_box(layout, RATE_LIMIT)),
            guide_scale=0.02,
        )

    if name == "joint_acc":
        term = SmoothnessTerm(layout, lam_vel=0.0, lam_acc=1.0, dt=params.dt)
        return AdaptationTask(
            name=name,
            task=Task(name, penalties={"acc2": 1e-4}),
            reward=RewardSpec.of((track, track_w), (term, 1e-6)),
            constraints=ConstraintSet.of(rate_limit_box(layout, RATE_LIMIT)),
            guide_scale=0.02,
        )

    if name == "joint_range":
        term = RangeTerm(layout, q_min=RANGE_Q_MIN, q_max=RANGE_Q_MAX)
        target_term = RangeTerm(layout, q_min=RANGE_Q_MIN, q_max=RANGE_Q_MAX,
                                on_actions=True)
        boxes = joint_range_box(layout, RANGE_Q_MIN, RANGE_Q_MAX)
        return AdaptationTask(
            name=name,
            task=Task(name, extra_penalties=(
                (5.0, _action_range_sq(RANGE_Q_MIN, RANGE_Q_MAX)),)),
            reward=RewardSpec.of((track, track_w), (term, 4.0),
                                 (target_term, 4.0)),
            constraints=ConstraintSet.of(*boxes),
            guide_scale=0.1,
            eval_command=(0.3, 0.0, 0.0),
        )

    if name in ("posture_neg", "posture_pos"):
        shift = -POSTURE_SHIFT if name == "posture_neg" else POSTURE_SHIFT
        q_tar = qn + shift
        term = PostureTerm(layout, q_target=q_tar)
        # posture boxes keep the plan within +-0.45 of the target
        boxes = joint_range_box(layout, q_tar - 0.45, q_tar + 0.45)
        return AdaptationTask(
            name=name,
            task=Task(name, extra_penalties=(
                (0.5, _posture_dist_sq(layout, q_tar)),)),
            reward=RewardSpec.of((track, track_w), (term, 0.5)),
            constraints=ConstraintSet.of(*boxes),
            guide_scale=0.1,
            eval_command=(0.3, 0.0, 0.0),
        )

    if name == "balance":
        term = BalanceTerm(layout, d_hat=(0.0, 0.0, -1.0), lam_tv=0.1)
        return AdaptationTask(
            name=name,
            task=Task(name, penalties={"tilt": 2.0}),
            reward=RewardSpec.of((track, track_w), (term, 5.0)),
            constraints=ConstraintSet(),
            guide_scale=0.05,
        )

    if name == "energy":
        term = EnergyTerm(layout, dt=params.dt)
        return AdaptationTask(
            name=name,
            task=Task(name, penalties={"energy": 0.1}),
            reward=RewardSpec.of((track, track_w), (term, 3e-3)),
            constraints=ConstraintSet(),
            guide_scale=0.02,
        )

    # learned height reward
    if reward_model is None:
        raise ValueError("the height task needs a trained reward model")
    term = LearnedTerm(reward_model)
    return AdaptationTask(
        name=name,
        task=Task(name, extra_penalties=(
            (10.0, _height_err_sq(HEIGHT_TARGET)),)),
        reward=RewardSpec.of((track, track_w), (term, 20.0)),
        constraints=ConstraintSet(),
        guide_scale=0.05,
        eval_command=(0.3, 0.0, 0.0),
        needs_model=True,
    )


def height_labels(segments: np.ndarray, layout: TrajectoryLayout,
                  params: EnvParams, target: float = HEIGHT_TARGET) -> np.ndarray:
    """Ground-truth labels for the height reward model.

    The base height is hidden from the observation, but the collector
    knows the simulator's height law, so labels are reconstructed from
    the joint-position rows of each clean segment: mean over the window
    of -(h - target)^2.
    """
    segs = np.asarray(segments, dtype=np.float64)
    q = segs[..., layout.q, :]
    h = params.h_base + params.h_coupling * q.mean(axis=-2)
    e = h - target
    return -(e * e).mean(axis=-1)


# deployment motion script: 3 s forward, 3 s turning, 3 s backward,
# mirroring the omni-directional transition stress test
SCRIPT_PHASES = (
    (150, (0.8, 0.0, 0.0)),
    (300, (0.5, 0.0, 1.0)),
    (450, (-0.8, 0.0, 0.0)),
)
SCRIPT_TICKS = SCRIPT_PHASES[-1][0]


def deploy_script(t: int) -> tuple:
    """Command for simulation tick t under the deployment script."""
    for end, cmd in SCRIPT_PHASES:
        if t < end:
            return cmd
    return SCRIPT_PHASES[-1][1]


def script_phase_slices() -> list[tuple[str, slice]]:
    names = ["forward", "turn", "backward"]
    out = []
    start = 0
    for (end, _), label in zip(SCRIPT_PHASES, names):
        out.append((label, slice(start, end)))
        start = end
    return out
