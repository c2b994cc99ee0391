"""Desk-scale articulated-robot surrogate.

Four PD-tracked joints drive a floating base through an antisymmetric
pair coupling: with joint deviations x = q - q_nominal, each leg pair
contributes w = x_i qd_j - x_j qd_i, which is constant for a steady
sinusoidal gait and signed by the phase lead, so commanded direction has
to be realized by the wave pattern rather than granted by the command.
Forward speed and yaw rate first-order-lag toward the paired drives.

Tilt dynamics lean the gravity direction toward lateral joint asymmetry
and an accumulated disturbance driven by joint-acceleration spikes and
velocity-tracking error, relaxing toward upright; an episode fails when
the tilt passes the fall threshold.  Base height is hidden from the
observation and follows the mean joint position, which is what the
learned height reward has to infer from observable channels.

Observations carry yaw rate, gravity, the command, latency-delayed
joint positions/velocities, and the previous action.  States are values;
``step`` is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .trajectory import TrajectoryLayout

DT = 0.02  # 50 Hz control rate


@dataclass(frozen=True)
class EnvParams:
    n_joints: int = 4
    dt: float = DT
    kp: float = 40.0
    kd: float = 1.0
    inertia: float = 0.05
    damping: float = 0.15
    drive_map: tuple = (1.0, 1.0, 1.0, 1.0)
    drive_gain: float = 0.36
    yaw_gain: float = 1.3
    tau_v: float = 0.25
    tau_yaw: float = 0.15
    tilt_relax: float = 2.5
    tilt_asym: float = 0.05
    dist_acc_gain: float = 0.03
    dist_verr_gain: float = 3.5
    dist_decay: float = 1.5
    accel_ref: float = 120.0
    verr_ref: float = 0.45
    h_base: float = 0.09
    h_coupling: float = 0.2
    q_nominal: tuple = (0.8, 0.8, 0.8, 0.8)
    mass: float = 2.0
    mass_offset: tuple = (0.0, 0.0, 0.0)
    mass_tilt_gain: float = 0.6
    friction: float = 1.0
    motor_strength: float = 1.0
    latency: int = 0
    fall_gz: float = -0.75

    @property
    def layout(self) -> TrajectoryLayout:
        return TrajectoryLayout(self.n_joints)


@dataclass(frozen=True)
class EnvState:
    t: int
    q: np.ndarray
    qd: np.ndarray
    gravity: np.ndarray
    v_cmd: np.ndarray
    v_yaw: float
    a_prev: np.ndarray
    v_x: float
    v_y: float
    height: float
    dist: float
    dist_dir: tuple
    qhist: tuple            # ((q, qd), ...) oldest first, length latency+1
    failed: bool = False
    fail_reason: str = ""


def _freeze(a) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64).copy()
    out.flags.writeable = False
    return out


def reset(seed: int, randomize: bool, base: EnvParams | None = None,
          v_cmd=(0.0, 0.0, 0.0)) -> tuple[EnvParams, EnvState]:
    """Build an episode's parameters and initial state.

    With randomize, draws friction in [0,2] x nominal, motor strength in
    [0.9,1.1], latency in {0,1,2} steps, initial joint positions in
    [0.5,1.5] x nominal, and mass/inertia offsets within +-20%.
    """
    base = base or EnvParams()
    rng = np.random.default_rng(seed)
    qn = np.asarray(base.q_nominal, dtype=np.float64)
    if randomize:
        friction = base.friction * rng.uniform(0.0, 2.0)
        strength = base.motor_strength * rng.uniform(0.9, 1.1)
        latency = int(rng.integers(0, 3))
        q0 = qn * rng.uniform(0.5, 1.5, size=base.n_joints)
        inertia = base.inertia * rng.uniform(0.8, 1.2)
        mass = base.mass * rng.uniform(0.8, 1.2)
        mass_offset = (rng.uniform(-0.1, 0.1), rng.uniform(-0.05, 0.05),
                       rng.uniform(-0.02, 0.02))
        ang = rng.uniform(0.0, 2.0 * math.pi)
        dist_dir = (math.cos(ang), math.sin(ang))
    else:
        friction = base.friction
        strength = base.motor_strength
        latency = base.latency
        q0 = qn.copy()
        inertia = base.inertia
        mass = base.mass
        mass_offset = base.mass_offset
        dist_dir = (1.0, 0.0)
    params = replace(base, friction=friction, motor_strength=strength,
                     latency=latency, inertia=inertia, mass=mass,
                     mass_offset=tuple(mass_offset))
    qd0 = np.zeros(base.n_joints)
    state = EnvState(
        t=0, q=_freeze(q0), qd=_freeze(qd0),
        gravity=_freeze([0.0, 0.0, -1.0]),
        v_cmd=_freeze(v_cmd), v_yaw=0.0, a_prev=_freeze(qd0),
        v_x=0.0, v_y=0.0,
        height=base.h_base + base.h_coupling * float(q0.mean()) + mass_offset[2],
        dist=0.0, dist_dir=dist_dir,
        qhist=tuple(((_freeze(q0), _freeze(qd0)),) * (latency + 1)),
    )
    return params, state


def observation(state: EnvState, params: EnvParams) -> np.ndarray:
    """Stack (v_yaw, gravity, v_cmd, delayed q, delayed qd, a_prev)."""
    q_obs, qd_obs = state.qhist[0]
    return np.concatenate([
        [state.v_yaw], state.gravity, state.v_cmd, q_obs, qd_obs, state.a_prev,
    ])


def _pair_drives(x: np.ndarray, qd: np.ndarray) -> tuple[float, float]:
    w_left = x[0] * qd[1] - x[1] * qd[0]
    w_right = x[2] * qd[3] - x[3] * qd[2]
    return float(w_left), float(w_right)


def step(state: EnvState, params: EnvParams,
         action: np.ndarray) -> tuple[EnvState, dict]:
    """Advance one control period; returns the new state and per-step
    reward components (true, un-delayed quantities)."""
    if state.failed:
        raise RuntimeError("stepping a failed episode")
    a = np.asarray(action, dtype=np.float64).ravel()
    if a.shape != (params.n_joints,):
        raise ValueError(f"action shape {a.shape} != ({params.n_joints},)")
    dt = params.dt
    q, qd = state.q, state.qd

    torque = params.motor_strength * (params.kp * (a - q) - params.kd * qd)
    qdd = (torque - params.damping * qd) / params.inertia
    qd_new = qd + dt * qdd
    q_new = q + dt * qd_new          # semi-implicit Euler

    qn = np.asarray(params.q_nominal)
    x = q_new - qn
    g = np.asarray(params.drive_map, dtype=np.float64)
    w_l, w_r = _pair_drives(x, qd_new)
    d_lin = params.drive_gain * params.friction * (g[0] * w_l + g[2] * w_r)
    d_yaw = params.yaw_gain * params.friction * (g[1] * w_l - g[3] * w_r)

    tau_v = params.tau_v * params.mass / 2.0
    v_x = state.v_x + dt * (d_lin - state.v_x) / tau_v
    v_y = state.v_y * (1.0 - dt / tau_v)
    v_yaw = state.v_yaw + dt * (d_yaw - state.v_yaw) / params.tau_yaw

    verr_x = v_x - state.v_cmd[0]
    verr_yaw = v_yaw - state.v_cmd[2]
    verr2 = verr_x * verr_x + verr_yaw * verr_yaw

    acc_norm = float(np.linalg.norm(qdd)) / math.sqrt(params.n_joints)
    # deadzoned channels: clean gaits feed nothing, sustained tracking
    # failure or violent flailing integrates toward a tip-over
    excite = (params.dist_acc_gain * max(0.0, acc_norm - params.accel_ref)
              + params.dist_verr_gain * max(0.0, abs(verr_x) - params.verr_ref))
    dist = state.dist * (1.0 - dt / params.dist_decay) + dt * excite

    pitch_asym = float(x.mean())
    roll_asym = float(x[0] + x[1] - x[2] - x[3]) / 2.0
    push = np.array([
        params.tilt_asym * pitch_asym
        + dist * state.dist_dir[0]
        + params.mass_tilt_gain * params.mass_offset[0],
        params.tilt_asym * roll_asym
        + dist * state.dist_dir[1]
        + params.mass_tilt_gain * params.mass_offset[1],
        0.0,
    ])
    upright = np.array([0.0, 0.0, -1.0])
    g_raw = state.gravity + dt * (push + params.tilt_relax * (upright - state.gravity))
    g_norm = float(np.linalg.norm(g_raw))
    gravity = g_raw / g_norm if g_norm > 0 else upright

    height = params.h_base + params.h_coupling * float(q_new.mean()) \
        + params.mass_offset[2]

    energy = float(np.sum(np.abs(torque * qd_new))) * dt
    components = {
        "verr2": verr2,
        "vx": v_x,
        "vyaw": v_yaw,
        "energy": energy,
        "vel2": float(np.sum(qd_new * qd_new)),
        "acc2": float(np.sum(qdd * qdd)),
        "tilt": 1.0 + float(gravity[2]),
        "height": height,
    }

    failed = False
    reason = ""
    finite = (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))
              and np.isfinite(v_x) and np.isfinite(v_yaw))
    if not finite:
        failed, reason = True, "non-finite state"
    elif gravity[2] >= params.fall_gz:
        failed, reason = True, "fell"

    hist = state.qhist[1:] + ((_freeze(q_new), _freeze(qd_new)),)
    new_state = EnvState(
        t=state.t + 1, q=_freeze(q_new), qd=_freeze(qd_new),
        gravity=_freeze(gravity), v_cmd=state.v_cmd, v_yaw=v_yaw,
        a_prev=_freeze(a), v_x=v_x, v_y=v_y, height=height,
        dist=dist, dist_dir=state.dist_dir, qhist=hist,
        failed=failed, fail_reason=reason,
    )
    return new_state, components


@dataclass
class EpisodeRecord:
    """Per-step log of one rollout: what a policy saw and did, plus the
    true components needed for returns and stability accounting."""

    observations: np.ndarray      # (T, n_s), the obs each action was based on
    actions: np.ndarray           # (T, n_a)
    components: dict              # name -> (T,) arrays
    terminated: bool
    fail_reason: str
    seed: int = -1
    command: tuple = (0.0, 0.0, 0.0)

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    def pairs(self):
        return list(zip(self.observations, self.actions))


def rollout(policy, params: EnvParams, state: EnvState, n_steps: int,
            command_fn=None, seed: int = -1) -> EpisodeRecord:
    """Run ``policy(state, params) -> action`` for up to n_steps.

    ``command_fn(t) -> v_cmd`` switches the command mid-episode (used by
    the deployment script); episodes stop early on failure and keep what
    they have.
    """
    obs_list, act_list = [], []
    comp_lists: dict[str, list] = {}
    cmd0 = tuple(state.v_cmd)
    for t in range(n_steps):
        if command_fn is not None:
            state = replace(state, v_cmd=_freeze(command_fn(t)))
        obs_list.append(observation(state, params))
        a = np.asarray(policy(state, params), dtype=np.float64)
        act_list.append(a)
        state, comps = step(state, params, a)
        for name, val in comps.items():
            comp_lists.setdefault(name, []).append(val)
        if state.failed:
            break
    return EpisodeRecord(
        observations=np.asarray(obs_list),
        actions=np.asarray(act_list),
        components={k: np.asarray(v) for k, v in comp_lists.items()},
        terminated=state.failed,
        fail_reason=state.fail_reason,
        seed=seed,
        command=cmd0,
    )


@dataclass
class Task:
    """Scoring recipe: tracking metric minus weighted penalty series.

    ``penalties`` maps component names to weights; ``extra_penalties``
    holds (weight, fn(record) -> (T,) array) pairs for penalties that are
    not plain components (range violation, posture distance).
    """

    name: str
    sigma: float = 0.25
    penalties: dict = field(default_factory=dict)
    extra_penalties: tuple = ()

    def tracking_series(self, record: EpisodeRecord) -> np.ndarray:
        return np.exp(-record.components["verr2"] / self.sigma)

    def penalty_series(self, record: EpisodeRecord) -> np.ndarray:
        total = np.zeros(record.n_steps)
        for name, w in self.penalties.items():
            total += w * record.components[name]
        for w, fn in self.extra_penalties:
            total += w * fn(record)
        return total


def realized_return(record: EpisodeRecord, task: Task) -> float:
    """Sum over executed steps of tracking reward minus penalties.

    Failed episodes simply have fewer steps, which is what makes their
    returns low; they are kept so the finetuning filter can see them.
    """
    if record.n_steps == 0:
        return 0.0
    return float(np.sum(task.tracking_series(record) - task.penalty_series(record)))


class Demonstrator:
    """Scripted sinusoidal gait with PI speed and yaw feedback.

    Joint targets follow a(t) = q_nominal + posture_offset + A *
    sin(2 pi f t + phi_j).  Each leg pair carries an internal phase lag
    whose sign sets that pair's drive direction; the base lag follows the
    commanded direction and a steering offset skews the two pairs in
    opposite directions, so yaw control works identically forward,
    backward, and in place.  Both loops read the hidden base velocity
    (the demonstrator is a privileged teacher).  The steering command is
    low-passed: stepping the pair phases discontinuously excites the
    drive coupling and destabilises the yaw loop.

    The gait clock re-zeroes at every command change, so gait initiation
    is stereotyped: from a stand, the first few action vectors are a
    deterministic function of (command, posture).  A generative model
    cannot learn to launch from data in which every launch starts at an
    arbitrary phase of the cycle.

    Integrator state resets whenever an episode restarts (state.t falls),
    so one instance can be reused across rollouts.
    """

    def __init__(self, params: EnvParams, seed: int = 0, gait_freq: float = 1.5,
                 phase_lag: float = math.pi / 4, amp_ff: float = 0.40,
                 k_amp: float = 0.5, ki_amp: float = 1.2,
                 k_yaw: float = 1.0, ki_yaw: float = 2.5,
                 steer_tau: float = 0.1, posture_offset: float = 0.0,
                 amp_max: float = 0.85):
        rng = np.random.default_rng(seed)
        self.jitter = rng.uniform(0.97, 1.03, size=params.n_joints)
        self.freq = gait_freq
        self.phase_lag = phase_lag
        self.amp_ff = amp_ff
        self.k_amp = k_amp
        self.ki_amp = ki_amp
        self.k_yaw = k_yaw
        self.ki_yaw = ki_yaw
        self.steer_tau = steer_tau
        self.posture_offset = posture_offset
        self.amp_max = amp_max
        self.reset()

    def reset(self) -> None:
        self._amp_i = 0.0
        self._yaw_i = 0.0
        self._steer = 0.0
        self._last_t = -1
        self._cmd_key = None
        self._t_onset = 0

    def __call__(self, state: EnvState, params: EnvParams,
                 v_cmd=None) -> np.ndarray:
        if state.t <= self._last_t:
            self.reset()
        self._last_t = state.t
        dt = params.dt

        cmd = np.asarray(v_cmd if v_cmd is not None else state.v_cmd,
                         dtype=np.float64)
        key = (float(cmd[0]), float(cmd[2]))
        if key != self._cmd_key:
            self._cmd_key = key
            self._t_onset = state.t
        vx_cmd, vyaw_cmd = cmd[0], cmd[2]
        sgn = 0.0 if vx_cmd == 0.0 else math.copysign(1.0, vx_cmd)

        if vx_cmd == 0.0 and vyaw_cmd == 0.0:
            # stand: bleed the integrators so a later command starts clean
            self._amp_i *= 0.98
            self._yaw_i *= 0.98
            self._steer *= 0.9
            qn = np.asarray(params.q_nominal)
            return qn + self.posture_offset + np.zeros(params.n_joints)

        # signed forward effort from a PI loop on the hidden base speed
        verr = vx_cmd - state.v_x
        self._amp_i = min(max(self._amp_i + self.ki_amp * verr * dt, -0.45),
                          0.45)
        effort = self.amp_ff * math.sqrt(abs(vx_cmd)) * sgn \
            + self.k_amp * verr + self._amp_i
        floor = 0.30 + 0.10 * abs(vyaw_cmd) if vyaw_cmd != 0.0 else 0.0
        amp = min(max(abs(effort), floor), self.amp_max)

        yaw_err = vyaw_cmd - state.v_yaw
        self._yaw_i = min(max(self._yaw_i + self.ki_yaw * yaw_err * dt, -0.8),
                          0.8)
        steer_raw = min(max(self.k_yaw * yaw_err + self._yaw_i, -1.0), 1.0)
        blend = min(1.0, dt / self.steer_tau)
        self._steer += (steer_raw - self._steer) * blend

        # when the turning floor forces more oscillation than the speed
        # loop wants, shrink the base lag instead so forward drive still
        # follows the effort signal
        ratio = 0.0 if amp == 0.0 else min(max(effort / amp, -1.0), 1.0)
        lag_base = self.phase_lag * ratio
        lag_left = lag_base + self._steer
        lag_right = lag_base - self._steer

        phases = np.array([0.0, -lag_left, math.pi, math.pi - lag_right])
        amps = amp * self.jitter
        theta = 2.0 * math.pi * self.freq * (state.t - self._t_onset) \
            * params.dt
        qn = np.asarray(params.q_nominal)
        return qn + self.posture_offset + amps * np.sin(theta + phases)
