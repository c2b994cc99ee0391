"""Reward terms over trajectory matrices, with exact input gradients.

Every term maps a physical-space (rows, H) matrix to a scalar that is <= 0
and equals 0 in its ideal configuration, and exposes the exact gradient
with respect to the full matrix (zeros outside the rows it reads).
Composites are weighted sums; gradients are linear in the weights.

The learned height term wraps a small regression net trained on noised
trajectories; it normalizes its input internally and chain-rules the
gradient back to physical space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .diffusion import NoiseSchedule
from .nets import (AdamState, Mlp, MlpSpec, adam_step, mlp_arrays,
                   mlp_from_record, mlp_meta, step_embedding)
from .trajectory import NormStats, TrajectoryLayout

PD_KP = 40.0
PD_KD = 1.0


class UntrainedModelError(RuntimeError):
    """A learned reward term was used before training."""


class RewardTerm:
    """Interface: value(traj, k) and value_and_grad(traj, k).

    ``traj`` is a physical-space (rows, H) float array; ``k`` is the
    diffusion level in the training schedule (0 for clean trajectories).
    """

    kind = "abstract"

    def value(self, traj: np.ndarray, k: int = 0) -> float:
        return self.value_and_grad(traj, k)[0]

    def value_and_grad(self, traj: np.ndarray, k: int = 0):
        raise NotImplementedError


def _empty_grad(traj: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(traj, dtype=np.float64))


@dataclass
class PostureTerm(RewardTerm):
    """Mean squared distance of joint positions from a target posture."""

    layout: TrajectoryLayout
    q_target: np.ndarray
    kind: str = field(default="posture", init=False)

    def __post_init__(self):
        self.q_target = np.broadcast_to(
            np.asarray(self.q_target, dtype=np.float64),
            (self.layout.n_joints,)).copy()

    def value_and_grad(self, traj, k=0):
        traj = np.asarray(traj, dtype=np.float64)
        h = traj.shape[1]
        dq = traj[self.layout.q] - self.q_target[:, None]
        val = -float(np.sum(dq * dq)) / h
        grad = _empty_grad(traj)
        grad[self.layout.q] = -2.0 * dq / h
        return val, grad


@dataclass
class RangeTerm(RewardTerm):
    """Quadratic penalty outside a joint-position box, zero inside.

    With on_actions the same box is scored on the action rows instead;
    actions are position targets here, so the tightened range applies to
    both the predicted positions and the commands that produce them.
    """

    layout: TrajectoryLayout
    q_min: np.ndarray
    q_max: np.ndarray
    on_actions: bool = False
    kind: str = field(default="range", init=False)

    def __post_init__(self):
        j = self.layout.n_joints
        self.q_min = np.broadcast_to(np.asarray(self.q_min, np.float64), (j,)).copy()
        self.q_max = np.broadcast_to(np.asarray(self.q_max, np.float64), (j,)).copy()
        if np.any(self.q_min > self.q_max):
            raise ValueError("q_min exceeds q_max")

    def value_and_grad(self, traj, k=0):
        traj = np.asarray(traj, dtype=np.float64)
        h = traj.shape[1]
        rows = self.layout.action if self.on_actions else self.layout.q
        q = traj[rows]
        over = np.maximum(q - self.q_max[:, None], 0.0)
        under = np.maximum(self.q_min[:, None] - q, 0.0)
        val = -float(np.sum(over * over) + np.sum(under * under)) / h
        grad = _empty_grad(traj)
        grad[rows] = -2.0 * (over - under) / h
        return val, grad


@dataclass
class EnergyTerm(RewardTerm):
    """Absolute mechanical work of the PD-reconstructed torques.

    tau_j = Kp (a_j - q_j) - Kd qd_j with the nominal gains; the planner
    does not see the simulator's randomized strength factor.
    """

    layout: TrajectoryLayout
    dt: float
    kp: float = PD_KP
    kd: float = PD_KD
    kind: str = field(default="energy", init=False)

    def value_and_grad(self, traj, k=0):
        traj = np.asarray(traj, dtype=np.float64)
        q = traj[self.layout.q]
        qd = traj[self.layout.qd]
        a = traj[self.layout.action]
        torque = self.kp * (a - q) - self.kd * qd
        p = torque * qd
        val = -float(np.sum(np.abs(p))) * self.dt
        s = np.sign(p) * self.dt
        grad = _empty_grad(traj)
        grad[self.layout.action] = -s * self.kp * qd
        grad[self.layout.q] = s * self.kp * qd
        grad[self.layout.qd] = -s * (torque - self.kd * qd)
        return val, grad


@dataclass
class SmoothnessTerm(RewardTerm):
    """Velocity magnitude plus finite-difference acceleration penalty."""

    layout: TrajectoryLayout
    lam_vel: float
    lam_acc: float
    dt: float
    kind: str = field(default="velacc", init=False)

    def value_and_grad(self, traj, k=0):
        traj = np.asarray(traj, dtype=np.float64)
        qd = traj[self.layout.qd]
        acc = np.diff(qd, axis=1) / self.dt
        val = -self.lam_vel * float(np.sum(qd * qd)) \
            - self.lam_acc * float(np.sum(acc * acc))
        grad = _empty_grad(traj)
        g = -2.0 * self.lam_vel * qd
        if qd.shape[1] > 1:
            ga = -2.0 * self.lam_acc * acc / self.dt
            g[:, 1:] += ga
            g[:, :-1] -= ga
        grad[self.layout.qd] = g
        return val, grad


@dataclass
class BalanceTerm(RewardTerm):
    """Alignment of the gravity direction with a desired axis, plus a
    total-variation penalty on its drift.

    The gravity rows are renormalized inside the term and the gradient is
    taken exactly through the normalization.
    """

    layout: TrajectoryLayout
    d_hat: np.ndarray
    lam_tv: float = 0.0
    kind: str = field(default="balance", init=False)

    def __post_init__(self):
        d = np.asarray(self.d_hat, dtype=np.float64).ravel()
        if d.shape != (3,):
            raise ValueError("d_hat must be a 3-vector")
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("d_hat must be nonzero")
        self.d_hat = d / n

    def value_and_grad(self, traj, k=0):
        traj = np.asarray(traj, dtype=np.float64)
        h = traj.shape[1]
        g = traj[self.layout.gravity]
        norms = np.linalg.norm(g, axis=0)
        if np.any(norms == 0):
            raise ValueError("gravity column with zero norm")
        ghat = g / norms
        align = ghat.T @ self.d_hat
        val = -float(np.sum(1.0 - align)) / h

        # d ghat / dg = (I - ghat ghat^T) / ||g||, applied to each column
        gg = _empty_grad(traj)
        dv = np.broadcast_to(self.d_hat[:, None], ghat.shape)
        grad_ghat = dv / h  # from the alignment sum
        if self.lam_tv > 0.0 and h > 1:
            dg = np.diff(ghat, axis=1)
            val -= self.lam_tv * float(np.sum(np.abs(dg)))
            s = np.sign(dg)
            tv = np.zeros_like(ghat)
            tv[:, 1:] += s
            tv[:, :-1] -= s
            grad_ghat = grad_ghat - self.lam_tv * tv
        proj = grad_ghat - ghat * np.sum(ghat * grad_ghat, axis=0)
        gg[self.layout.gravity] = proj / norms
        return val, gg


@dataclass
class DriveTrackTerm(RewardTerm):
    """Command-consistency surrogate: the planned joint wave should produce
    the commanded forward speed under the nominal drive model.

    The simulator's base speed follows the antisymmetric pair coupling of
    (q - q_ref, qd); this term penalizes the squared gap between that
    drive estimate and the commanded forward speed, per column.
    """

    layout: TrajectoryLayout
    q_ref: np.ndarray
    drive_gain: float
    weight_cols: bool = True
    kind: str = field(default="track", init=False)

    def __post_init__(self):
        self.q_ref = np.broadcast_to(np.asarray(self.q_ref, np.float64),
                                     (self.layout.n_joints,)).copy()

    def _pairs(self):
        j = self.layout.n_joints
        return [(0, 1), (2, 3)] if j >= 4 else [(0, 1)]

    def value_and_grad(self, traj, k=0):
        traj = np.asarray(traj, dtype=np.float64)
        h = traj.shape[1]
        q = traj[self.layout.q] - self.q_ref[:, None]
        qd = traj[self.layout.qd]
        cmd = traj[self.layout.command][0]  # commanded forward speed row
        drive = np.zeros(h)
        for (i, j) in self._pairs():
            drive += q[i] * qd[j] - q[j] * qd[i]
        drive *= self.drive_gain
        err = drive - cmd
        val = -float(np.sum(err * err)) / h
        grad = _empty_grad(traj)
        ge = -2.0 * err / h
        gq = np.zeros_like(q)
        gqd = np.zeros_like(qd)
        for (i, j) in self._pairs():
            gq[i] += ge * self.drive_gain * qd[j]
            gq[j] -= ge * self.drive_gain * qd[i]
            gqd[j] += ge * self.drive_gain * q[i]
            gqd[i] -= ge * self.drive_gain * q[j]
        grad[self.layout.q] = gq
        grad[self.layout.qd] = gqd
        grad[self.layout.command.start] = -ge  # cmd row also in the matrix
        return val, grad


@dataclass
class CustomTerm(RewardTerm):
    """Escape hatch for user-supplied callables (used heavily in tests)."""

    fn: object  # callable(traj, k) -> (value, grad)
    name: str = "custom"
    kind: str = field(default="custom", init=False)

    def value_and_grad(self, traj, k=0):
        return self.fn(np.asarray(traj, dtype=np.float64), k)


class RewardModel:
    """Small regression net scoring noised trajectories at a given level."""

    def __init__(self, mlp: Mlp, rows: int, horizon: int, stats: NormStats,
                 embed_dim: int = 16, trained: bool = False):
        self.mlp = mlp
        self.rows = rows
        self.horizon = horizon
        self.stats = stats
        self.embed_dim = embed_dim
        self.trained = trained

    def _features(self, tau_norm: np.ndarray, k) -> np.ndarray:
        flat = np.asarray(tau_norm, dtype=np.float64).reshape(-1)
        return np.concatenate([flat, step_embedding(float(k), self.embed_dim)])

    def score_normalized(self, tau_norm: np.ndarray, k: int) -> float:
        out, _ = self.mlp.forward(self._features(tau_norm, k))
        return float(out[0])

    def score_and_grad_normalized(self, tau_norm: np.ndarray, k: int):
        out, tape = self.mlp.forward(self._features(tau_norm, k))
        _, gin = self.mlp.backward(tape, np.ones(1))
        grad = gin[: self.rows * self.horizon].reshape(self.rows, self.horizon)
        return float(out[0]), grad


@dataclass
class LearnedTerm(RewardTerm):
    """Wraps a RewardModel as a reward term over physical trajectories."""

    model: RewardModel
    kind: str = field(default="height_nn", init=False)

    def value_and_grad(self, traj, k=0):
        if not self.model.trained:
            raise UntrainedModelError("reward model used before training")
        tau_norm = self.model.stats.normalize(np.asarray(traj, dtype=np.float64))
        val, gnorm = self.model.score_and_grad_normalized(tau_norm, k)
        # x_norm = (x - mean) / scale, so d/dx = (1/scale) d/dx_norm
        return val, gnorm / self.model.stats.scale[:, None]


@dataclass
class RewardSpec:
    """Weighted list of terms; values and gradients are weighted sums."""

    terms: tuple = ()

    @classmethod
    def of(cls, *pairs) -> "RewardSpec":
        return cls(tuple((t, float(w)) for t, w in pairs))

    def __bool__(self) -> bool:
        return len(self.terms) > 0

    def scaled(self, c: float) -> "RewardSpec":
        return RewardSpec(tuple((t, w * c) for t, w in self.terms))


def composite(spec: RewardSpec, traj: np.ndarray, k: int = 0) -> float:
    return float(sum(w * t.value(traj, k) for t, w in spec.terms))


def composite_value_and_grad(spec: RewardSpec, traj: np.ndarray, k: int = 0):
    total = 0.0
    grad = _empty_grad(traj)
    for term, w in spec.terms:
        v, g = term.value_and_grad(traj, k)
        total += w * v
        grad += w * g
    return total, grad


def composite_grad(spec: RewardSpec, traj: np.ndarray, k: int = 0) -> np.ndarray:
    return composite_value_and_grad(spec, traj, k)[1]


def train_reward_model(segments: np.ndarray, labels: np.ndarray,
                       stats: NormStats, schedule: NoiseSchedule,
                       *, hidden=(64, 64), steps: int = 2000,
                       batch_size: int = 64, lr: float = 1e-3,
                       seed: int = 0, embed_dim: int = 16,
                       divergence_factor: float = 10.0):
    """Fit a reward regressor on noised trajectory segments.

    ``segments`` is a (M, rows, H) physical stack; ``labels`` the scalar
    reward per segment.  Each step draws a batch, a level k ~ U(1..K) per
    sample, noises the normalized segment to that level, and regresses the
    label.  Aborts if the smoothed loss exceeds divergence_factor times
    the initial smoothed loss.  Returns (model, history).
    """
    segs = np.asarray(segments, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if segs.ndim != 3 or len(labels) != segs.shape[0]:
        raise ValueError("segments must be (M, rows, H) with one label each")
    m, rows, horizon = segs.shape
    rng = np.random.default_rng(seed)
    spec = MlpSpec.dense((rows * horizon + embed_dim, *hidden, 1), "tanh")
    mlp = Mlp.init(spec, rng)
    opt = AdamState.for_params(mlp.params, lr=lr)
    norm = stats.normalize(segs)
    history = []
    smoothed = None
    first = None
    for it in range(steps):
        idx = rng.integers(0, m, size=min(batch_size, m))
        ks = rng.integers(1, schedule.n_levels + 1, size=len(idx))
        ab = schedule.alpha_bar[ks]
        eps = rng.standard_normal((len(idx), rows, horizon))
        noised = (np.sqrt(ab)[:, None, None] * norm[idx]
                  + np.sqrt(1.0 - ab)[:, None, None] * eps)
        feats = np.concatenate(
            [noised.reshape(len(idx), -1),
             step_embedding(ks.astype(np.float64), embed_dim)], axis=1)
        out, tape = mlp.forward(feats)
        resid = out[:, 0] - labels[idx]
        loss = float(np.mean(resid * resid))
        gy = (2.0 / len(idx)) * resid[:, None]
        grads, _ = mlp.backward(tape, gy)
        mlp.params = adam_step(mlp.params, grads, opt)
        smoothed = loss if smoothed is None else 0.95 * smoothed + 0.05 * loss
        if first is None:
            first = smoothed
        history.append((it, loss, smoothed))
        if smoothed > divergence_factor * max(first, 1e-12):
            raise RuntimeError(
                f"reward model diverged at step {it}: smoothed loss "
                f"{smoothed:.3g} vs initial {first:.3g}"
            )
    model = RewardModel(mlp, rows, horizon, stats, embed_dim, trained=True)
    return model, history


def save_reward_model(path, model: RewardModel) -> None:
    meta = {
        "kind": "reward-model",
        "rows": str(model.rows),
        "horizon": str(model.horizon),
        "embed_dim": str(model.embed_dim),
        "trained": str(int(model.trained)),
        "stats_mean": fileio.encode_floats(model.stats.mean),
        "stats_scale": fileio.encode_floats(model.stats.scale),
        **mlp_meta(model.mlp),
    }
    fileio.write_record(path, meta, mlp_arrays(model.mlp, "rm_"))


def load_reward_model(path) -> RewardModel:
    meta, arrays = fileio.read_record(path)
    if meta.get("kind") != "reward-model":
        raise fileio.FileFormatError(f"{path}: not a reward model checkpoint")
    mlp = mlp_from_record(meta, arrays, "rm_")
    stats = NormStats(fileio.decode_floats(meta["stats_mean"]),
                      fileio.decode_floats(meta["stats_scale"]))
    return RewardModel(mlp, int(meta["rows"]), int(meta["horizon"]), stats,
                       int(meta["embed_dim"]), trained=bool(int(meta["trained"])))
