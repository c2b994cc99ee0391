"""Denoising diffusion over trajectory matrices.

Schedules keep index 0 as the clean level (beta[0] = 0, abar[0] = 1) and
levels 1..K as noising steps, so posterior formulas can index k-1 without
special cases.  The final reverse step's variance is the posterior
beta-tilde, which is exactly zero into level 0.  The denoising network
predicts the clean trajectory directly; the reverse-step mean is the
standard posterior mean evaluated at that prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio
from .nets import (AdamState, Mlp, MlpSpec, adam_step, mlp_arrays,
                   mlp_from_record, mlp_meta, step_embedding)
from .trajectory import NormStats


@dataclass
class NoiseSchedule:
    """Variance bookkeeping, length K+1 arrays indexed by level 0..K."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray          # posterior beta-tilde per level
    orig_index: np.ndarray      # conditioning index in the training schedule

    def __post_init__(self):
        k = len(self.beta) - 1
        for name in ("alpha", "alpha_bar", "sigma2", "orig_index"):
            if len(getattr(self, name)) != k + 1:
                raise ValueError(f"{name} length mismatch")
        if k < 1:
            raise ValueError("schedule needs at least one level")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(self.alpha[1:] <= 0) or np.any(self.alpha[1:] > 1):
            raise ValueError("alpha entries must lie in (0, 1]")

    @property
    def n_levels(self) -> int:
        return len(self.beta) - 1

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def posterior_coefs(self, k: int) -> tuple[float, float]:
        """Coefficients (on tau0_hat, on tau_k) of the reverse-step mean."""
        ab, ab_prev = self.alpha_bar[k], self.alpha_bar[k - 1]
        c0 = np.sqrt(ab_prev) * self.beta[k] / (1.0 - ab)
        ck = np.sqrt(self.alpha[k]) * (1.0 - ab_prev) / (1.0 - ab)
        return c0, ck


def make_schedule(k_steps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta ramp over k_steps levels."""
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, k_steps)])
    alpha = 1.0 - beta
    abar = np.cumprod(alpha)
    sigma2 = np.zeros(k_steps + 1)
    sigma2[1:] = (1.0 - abar[:-1]) / (1.0 - abar[1:]) * beta[1:]
    return NoiseSchedule(beta, alpha, abar, sigma2,
                         np.arange(k_steps + 1, dtype=np.int64))


def respace(schedule: NoiseSchedule, n_inference: int) -> NoiseSchedule:
    """Evenly strided sub-schedule, always retaining the top level.

    Alphas are recomputed from the retained alpha_bar values so the
    sub-schedule stays self-consistent; n_inference == K returns the
    original schedule unchanged.
    """
    k = schedule.n_levels
    if not (1 <= n_inference <= k):
        raise ValueError(f"n_inference must lie in [1, {k}]")
    if n_inference == k:
        return schedule
    # half-up rounding keeps the indices strictly increasing for stride >= 1
    idx = np.array([int(np.floor((j + 1) * k / n_inference + 0.5))
                    for j in range(n_inference)], dtype=np.int64)
    idx[-1] = k
    abar = np.concatenate([[1.0], schedule.alpha_bar[idx]])
    alpha = np.empty(n_inference + 1)
    alpha[0] = 1.0
    alpha[1:] = abar[1:] / abar[:-1]
    beta = 1.0 - alpha
    sigma2 = np.zeros(n_inference + 1)
    sigma2[1:] = (1.0 - abar[:-1]) / (1.0 - abar[1:]) * beta[1:]
    orig = np.concatenate([[0], schedule.orig_index[idx]])
    return NoiseSchedule(beta, alpha, abar, sigma2, orig)


def forward_noise(tau0: np.ndarray, k: int, schedule: NoiseSchedule,
                  noise: np.ndarray) -> np.ndarray:
    """Closed-form marginal: sqrt(abar_k) tau0 + sqrt(1 - abar_k) eps."""
    if not (0 <= k <= schedule.n_levels):
        raise ValueError(f"level {k} outside schedule")
    if k == 0:
        return np.array(tau0, dtype=np.float64, copy=True)
    ab = schedule.alpha_bar[k]
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * noise


class MlpDenoiser:
    """Clean-trajectory predictor: flattened iterate plus step embedding in.

    Operates on normalized-space matrices of shape (rows, H); batched
    calls take (N, rows, H).  The conditioning index is the level in the
    *training* schedule (use NoiseSchedule.orig_index when respaced).
    """

    def __init__(self, mlp: Mlp, rows: int, horizon: int, embed_dim: int = 16):
        self.mlp = mlp
        self.rows = rows
        self.horizon = horizon
        self.embed_dim = embed_dim
        want = rows * horizon + embed_dim
        if mlp.spec.sizes[0] != want or mlp.spec.sizes[-1] != rows * horizon:
            raise ValueError(
                f"denoiser MLP must map {want} -> {rows * horizon}, "
                f"got {mlp.spec.sizes[0]} -> {mlp.spec.sizes[-1]}"
            )

    def _features(self, tau_k: np.ndarray, k) -> tuple[np.ndarray, bool]:
        x = np.asarray(tau_k, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (self.rows, self.horizon):
            raise ValueError(f"iterate shape {x.shape[1:]} != "
                             f"({self.rows}, {self.horizon})")
        flat = x.reshape(x.shape[0], -1)
        ks = np.broadcast_to(np.asarray(k, dtype=np.float64), (x.shape[0],))
        emb = step_embedding(ks, self.embed_dim)
        return np.concatenate([flat, emb], axis=1), single

    def predict(self, tau_k: np.ndarray, k) -> np.ndarray:
        feats, single = self._features(tau_k, k)
        out = self.mlp(feats).reshape(-1, self.rows, self.horizon)
        return out[0] if single else out

    def predict_with_tape(self, tau_k: np.ndarray, k):
        feats, single = self._features(tau_k, k)
        out, tape = self.mlp.forward(feats)
        return out.reshape(-1, self.rows, self.horizon), tape, single

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(self.mlp.copy(), self.rows, self.horizon, self.embed_dim)


def weighted_denoising_loss(denoiser: MlpDenoiser, tau0: np.ndarray,
                            ks: np.ndarray, eps: np.ndarray,
                            schedule: NoiseSchedule,
                            weights: np.ndarray):
    """Weighted clean-prediction MSE and its exact parameter gradients.

    loss = sum_i w_i ||tau0_i - tau0_hat_i||^2 / (B * rows * H).  Unit
    weights give the plain denoising objective; zero weights contribute
    exactly zero gradient.  Returns (loss, grads).
    """
    tau0 = np.asarray(tau0, dtype=np.float64)
    b = tau0.shape[0]
    dims = denoiser.rows * denoiser.horizon
    ab = schedule.alpha_bar[np.asarray(ks, dtype=np.int64)]
    tk = (np.sqrt(ab)[:, None, None] * tau0
          + np.sqrt(1.0 - ab)[:, None, None] * np.asarray(eps, dtype=np.float64))
    pred, tape, _ = denoiser.predict_with_tape(tk, np.asarray(ks, dtype=np.float64))
    resid = (pred - tau0).reshape(b, dims)
    w = np.asarray(weights, dtype=np.float64)
    loss = float(np.sum(w * np.sum(resid * resid, axis=1)) / (b * dims))
    gy = (2.0 / (b * dims)) * w[:, None] * resid
    grads, _ = denoiser.mlp.backward(tape, gy)
    return loss, grads


def training_loss(denoiser: MlpDenoiser, batch, schedule: NoiseSchedule):
    """Plain denoising objective on a batch of (tau0, k, eps) triples."""
    tau0 = np.stack([np.asarray(t, dtype=np.float64) for t, _, _ in batch])
    ks = np.array([k for _, k, _ in batch], dtype=np.int64)
    eps = np.stack([np.asarray(e, dtype=np.float64) for _, _, e in batch])
    return weighted_denoising_loss(denoiser, tau0, ks, eps, schedule,
                                   np.ones(len(batch)))


def reverse_step(denoiser, tau_k: np.ndarray, k: int, schedule: NoiseSchedule,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """One posterior step k -> k-1; noise is skipped on the final step."""
    if not (1 <= k <= schedule.n_levels):
        raise ValueError(f"level {k} outside schedule")
    t0 = denoiser.predict(tau_k, int(schedule.orig_index[k]))
    c0, ck = schedule.posterior_coefs(k)
    mu = c0 * t0 + ck * np.asarray(tau_k, dtype=np.float64)
    if k > 1:
        if noise is None:
            raise ValueError("noise required except at the final step")
        return mu + schedule.sigma[k] * noise
    return mu


def ddim_step(denoiser, tau_k: np.ndarray, k: int, k_next: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic step k -> k_next (k_next < k, may be 0)."""
    if not (1 <= k <= schedule.n_levels) or not (0 <= k_next < k):
        raise ValueError(f"bad level pair ({k}, {k_next})")
    x = np.asarray(tau_k, dtype=np.float64)
    t0 = denoiser.predict(x, int(schedule.orig_index[k]))
    ab = schedule.alpha_bar[k]
    eps_hat = (x - np.sqrt(ab) * t0) / np.sqrt(1.0 - ab)
    ab2 = schedule.alpha_bar[k_next]
    return np.sqrt(ab2) * t0 + np.sqrt(1.0 - ab2) * eps_hat


def candidate_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-candidate generators; results do not depend on
    candidate evaluation order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _draw(streams, rows: int, horizon: int) -> np.ndarray:
    return np.stack([st.standard_normal((rows, horizon)) for st in streams])


def reverse_chain(denoiser, schedule: NoiseSchedule, x: np.ndarray,
                  streams, start_level: int, *, s0_norm: np.ndarray | None = None,
                  n_state: int = 0, hook=None, deterministic: bool = False) -> np.ndarray:
    """Run reverse levels start_level..1 on a (N, rows, H) batch.

    ``hook(x, level)`` runs after each reverse step (guidance, projection);
    the first-column state rows are pinned to s0_norm after every step.
    ``deterministic`` switches the step rule to DDIM.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    if s0_norm is not None and n_state > 0:
        x[:, :n_state, 0] = s0_norm[:n_state]
    for level in range(start_level, 0, -1):
        if deterministic:
            x = ddim_step(denoiser, x, level, level - 1, schedule)
        else:
            t0 = denoiser.predict(x, int(schedule.orig_index[level]))
            c0, ck = schedule.posterior_coefs(level)
            mu = c0 * t0 + ck * x
            if level > 1:
                x = mu + schedule.sigma[level] * _draw(streams, x.shape[1], x.shape[2])
            else:
                x = mu
        if hook is not None:
            x = hook(x, level)
        if s0_norm is not None and n_state > 0:
            x[:, :n_state, 0] = s0_norm[:n_state]
    return x


def ddpm_sample(denoiser, schedule: NoiseSchedule, n_samples: int, seed: int,
                *, s0_norm: np.ndarray | None = None, n_state: int = 0,
                deterministic: bool = False) -> np.ndarray:
    """Unconditional (optionally first-state-pinned) sampling of the prior."""
    streams = candidate_streams(seed, n_samples)
    x = _draw(streams, denoiser.rows, denoiser.horizon)
    return reverse_chain(denoiser, schedule, x, streams, schedule.n_levels,
                         s0_norm=s0_norm, n_state=n_state,
                         deterministic=deterministic)


def fit_denoiser(segments_norm: np.ndarray, schedule: NoiseSchedule,
                 *, hidden=(256, 256), steps: int = 6000,
                 batch_size: int = 128, lr: float = 1e-3, seed: int = 0,
                 embed_dim: int = 16, divergence_factor: float = 10.0):
    """Fit the clean-trajectory predictor on a normalized segment stack.

    Each step draws a batch, a level per sample, and Gaussian noise, then
    takes one Adam step on the denoising regression.  Aborts if the
    smoothed loss grows past divergence_factor times its initial value.
    Returns (denoiser, history of (step, loss, smoothed)).
    """
    segs = np.asarray(segments_norm, dtype=np.float64)
    if segs.ndim != 3:
        raise ValueError(f"segments must be (M, rows, H), got {segs.shape}")
    m, rows, horizon = segs.shape
    rng = np.random.default_rng(seed)
    spec = MlpSpec.dense(
        (rows * horizon + embed_dim, *hidden, rows * horizon), "tanh")
    den = MlpDenoiser(Mlp.init(spec, rng), rows, horizon, embed_dim)
    opt = AdamState.for_params(den.mlp.params, lr=lr)
    history = []
    smoothed = None
    first = None
    for it in range(steps):
        idx = rng.integers(0, m, size=min(batch_size, m))
        ks = rng.integers(1, schedule.n_levels + 1, size=len(idx))
        eps = rng.standard_normal((len(idx), rows, horizon))
        loss, grads = weighted_denoising_loss(
            den, segs[idx], ks, eps, schedule, np.ones(len(idx)))
        den.mlp.params = adam_step(den.mlp.params, grads, opt)
        smoothed = loss if smoothed is None else 0.95 * smoothed + 0.05 * loss
        if first is None:
            first = smoothed
        history.append((it, loss, smoothed))
        if smoothed > divergence_factor * max(first, 1e-12):
            raise RuntimeError(
                f"denoiser training diverged at step {it}: smoothed loss "
                f"{smoothed:.3g} vs initial {first:.3g}"
            )
    return den, history


def save_denoiser(path, denoiser: MlpDenoiser, schedule: NoiseSchedule,
                  stats: NormStats, extra_meta: dict | None = None) -> None:
    """Checkpoint the denoiser with its schedule and normalization stats."""
    meta = {
        "kind": "denoiser",
        "rows": str(denoiser.rows),
        "horizon": str(denoiser.horizon),
        "embed_dim": str(denoiser.embed_dim),
        "levels": str(schedule.n_levels),
        "beta_start": repr(float(schedule.beta[1])),
        "beta_end": repr(float(schedule.beta[-1])),
        "stats_mean": fileio.encode_floats(stats.mean),
        "stats_scale": fileio.encode_floats(stats.scale),
        **mlp_meta(denoiser.mlp),
    }
    for key, val in (extra_meta or {}).items():
        meta[f"x_{key}"] = str(val)
    fileio.write_record(path, meta, mlp_arrays(denoiser.mlp, "dn_"))


def load_denoiser(path):
    """Load a checkpoint; returns (denoiser, schedule, stats, extra_meta)."""
    meta, arrays = fileio.read_record(path)
    if meta.get("kind") != "denoiser":
        raise fileio.FileFormatError(f"{path}: not a denoiser checkpoint")
    mlp = mlp_from_record(meta, arrays, "dn_")
    den = MlpDenoiser(mlp, int(meta["rows"]), int(meta["horizon"]),
                      int(meta["embed_dim"]))
    schedule = make_schedule(int(meta["levels"]), float(meta["beta_start"]),
                             float(meta["beta_end"]))
    stats = NormStats(fileio.decode_floats(meta["stats_mean"]),
                      fileio.decode_floats(meta["stats_scale"]))
    extra = {k[2:]: v for k, v in meta.items() if k.startswith("x_")}
    return den, schedule, stats, extra
