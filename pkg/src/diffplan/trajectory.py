"""Trajectory containers, channel layout, normalization, windowing, persistence.

A trajectory is a dense (n_s + n_a) x H matrix whose column t stacks the
state observed at step t on top of the action applied at step t.  All
planning and learning code shares this one representation.  Diffusion
training and sampling run in normalized space; rewards and constraint
projection run in physical space, with NormStats mediating the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio

SCALE_FLOOR = 1e-6  # per-dimension std clamp so flat channels stay finite


class ShapeError(ValueError):
    """Trajectory data does not match the declared dimensions."""


@dataclass(frozen=True)
class TrajectoryLayout:
    """Row bookkeeping for the articulated-robot observation/action stack.

    Observation rows: yaw rate (1), gravity direction (3), commanded
    velocity (3), joint positions (J), joint velocities (J), previous
    action (J).  Action rows follow the observation block.
    """

    n_joints: int

    @property
    def n_state(self) -> int:
        return 3 * self.n_joints + 7

    @property
    def n_action(self) -> int:
        return self.n_joints

    @property
    def rows(self) -> int:
        return self.n_state + self.n_action

    @property
    def vyaw(self) -> int:
        return 0

    @property
    def gravity(self) -> slice:
        return slice(1, 4)

    @property
    def command(self) -> slice:
        return slice(4, 7)

    @property
    def q(self) -> slice:
        return slice(7, 7 + self.n_joints)

    @property
    def qd(self) -> slice:
        return slice(7 + self.n_joints, 7 + 2 * self.n_joints)

    @property
    def a_prev(self) -> slice:
        return slice(7 + 2 * self.n_joints, 7 + 3 * self.n_joints)

    @property
    def action(self) -> slice:
        return slice(self.n_state, self.n_state + self.n_action)


@dataclass
class Trajectory:
    """One (n_s + n_a) x H matrix plus its split point."""

    data: np.ndarray
    n_state: int
    n_action: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"trajectory data must be 2-D, got {self.data.shape}")
        if self.data.shape[0] != self.n_state + self.n_action:
            raise ShapeError(
                f"trajectory has {self.data.shape[0]} rows, expected "
                f"{self.n_state}+{self.n_action}"
            )
        if self.data.shape[1] < 1:
            raise ShapeError("trajectory needs at least one column")

    @property
    def horizon(self) -> int:
        return self.data.shape[1]

    @property
    def states(self) -> np.ndarray:
        return self.data[: self.n_state]

    @property
    def actions(self) -> np.ndarray:
        return self.data[self.n_state :]

    def copy(self) -> "Trajectory":
        return Trajectory(self.data.copy(), self.n_state, self.n_action)


@dataclass
class NormStats:
    """Per-row affine normalization: x_norm = (x - mean) / scale."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.scale = np.asarray(self.scale, dtype=np.float64).ravel()
        if self.mean.shape != self.scale.shape:
            raise ShapeError("mean and scale must have matching length")
        if np.any(self.scale < SCALE_FLOOR):
            raise ValueError(f"scale entries must be >= {SCALE_FLOOR}")

    @classmethod
    def identity(cls, rows: int) -> "NormStats":
        return cls(np.zeros(rows), np.ones(rows))

    @classmethod
    def from_data(cls, stacked: np.ndarray) -> "NormStats":
        """Stats over a (count, rows, H) stack: per-row mean/std, std clamped."""
        if stacked.ndim != 3:
            raise ShapeError(f"expected (count, rows, H) stack, got {stacked.shape}")
        flat = stacked.astype(np.float64).transpose(1, 0, 2).reshape(stacked.shape[1], -1)
        mean = flat.mean(axis=1)
        scale = np.maximum(flat.std(axis=1), SCALE_FLOOR)
        return cls(mean, scale)

    def normalize(self, data: np.ndarray) -> np.ndarray:
        """Rows-first arrays of shape (rows, H) or (N, rows, H) or (rows,)."""
        data = np.asarray(data, dtype=np.float64)
        if data.shape[-2 if data.ndim > 1 else 0] != self.mean.shape[0] and data.ndim == 1:
            raise ShapeError("vector length does not match stats")
        if data.ndim == 1:
            return (data - self.mean) / self.scale
        if data.shape[-2] != self.mean.shape[0]:
            raise ShapeError(
                f"data has {data.shape[-2]} rows, stats have {self.mean.shape[0]}"
            )
        return (data - self.mean[:, None]) / self.scale[:, None]

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1:
            if data.shape[0] != self.mean.shape[0]:
                raise ShapeError("vector length does not match stats")
            return data * self.scale + self.mean
        if data.shape[-2] != self.mean.shape[0]:
            raise ShapeError(
                f"data has {data.shape[-2]} rows, stats have {self.mean.shape[0]}"
            )
        return data * self.scale[:, None] + self.mean[:, None]


@dataclass
class DatasetMeta:
    n_state: int
    n_action: int
    horizon: int
    dt: float
    source: str = ""


@dataclass
class TrajectoryDataset:
    """A stack of fixed-horizon segments plus shared normalization stats.

    ``data`` is (count, rows, H) float32; ``segments`` materializes
    Trajectory views on demand.  Auxiliary per-segment arrays (labels,
    episode indices) ride along in ``aux``.
    """

    data: np.ndarray
    stats: NormStats
    meta: DatasetMeta
    aux: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        rows = self.meta.n_state + self.meta.n_action
        if self.data.ndim != 3 or self.data.shape[1:] != (rows, self.meta.horizon):
            raise ShapeError(
                f"dataset data shape {self.data.shape} does not match meta "
                f"(rows={rows}, H={self.meta.horizon})"
            )

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def segments(self) -> list[Trajectory]:
        return [
            Trajectory(self.data[i], self.meta.n_state, self.meta.n_action)
            for i in range(len(self))
        ]

    @classmethod
    def from_segments(cls, segments, meta: DatasetMeta, aux=None) -> "TrajectoryDataset":
        arrs = []
        for seg in segments:
            d = seg.data if isinstance(seg, Trajectory) else np.asarray(seg)
            arrs.append(np.asarray(d, dtype=np.float32))
        data = np.stack(arrs) if arrs else np.zeros(
            (0, meta.n_state + meta.n_action, meta.horizon), dtype=np.float32
        )
        if len(arrs) == 0:
            raise ValueError("cannot build a dataset from zero segments")
        stats = NormStats.from_data(data)
        return cls(data, stats, meta, dict(aux or {}))

    def normalized(self) -> np.ndarray:
        """(count, rows, H) float64 stack in normalized space."""
        return self.stats.normalize(self.data.astype(np.float64))


def window_rollout(rollout, horizon: int, stride: int) -> list[Trajectory]:
    """Slice a rollout of (state, action) pairs into overlapping windows.

    Returns floor((T - H) / stride) + 1 segments for T >= H, else [].
    """
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be positive")
    pairs = list(rollout)
    if not pairs:
        return []
    cols = [np.concatenate([np.asarray(s, dtype=np.float64).ravel(),
                            np.asarray(a, dtype=np.float64).ravel()]) for s, a in pairs]
    n_state = np.asarray(pairs[0][0]).size
    n_action = np.asarray(pairs[0][1]).size
    mat = np.stack(cols, axis=1)
    T = mat.shape[1]
    if T < horizon:
        return []
    out = []
    for start in range(0, T - horizon + 1, stride):
        out.append(Trajectory(mat[:, start : start + horizon].copy(), n_state, n_action))
    return out


def save_dataset(path, ds: TrajectoryDataset) -> None:
    meta = {
        "kind": "trajectory-dataset",
        "n_state": str(ds.meta.n_state),
        "n_action": str(ds.meta.n_action),
        "horizon": str(ds.meta.horizon),
        "dt": repr(float(ds.meta.dt)),
        "source": ds.meta.source,
        "count": str(len(ds)),
        "stats_mean": fileio.encode_floats(ds.stats.mean),
        "stats_scale": fileio.encode_floats(ds.stats.scale),
        "aux_names": ",".join(sorted(ds.aux)),
    }
    arrays = {"segments": ds.data}
    for name in sorted(ds.aux):
        arrays[f"aux_{name}"] = np.asarray(ds.aux[name], dtype=np.float32)
    fileio.write_record(path, meta, arrays)


def load_dataset(path) -> TrajectoryDataset:
    meta, arrays = fileio.read_record(path)
    if meta.get("kind") != "trajectory-dataset":
        raise fileio.FileFormatError(f"{path}: not a trajectory dataset")
    dmeta = DatasetMeta(
        n_state=int(meta["n_state"]),
        n_action=int(meta["n_action"]),
        horizon=int(meta["horizon"]),
        dt=float(meta["dt"]),
        source=meta.get("source", ""),
    )
    data = arrays["segments"]
    if data.shape[0] != int(meta["count"]):
        raise fileio.FileFormatError(
            f"{path}: header count {meta['count']} != payload count {data.shape[0]}"
        )
    stats = NormStats(fileio.decode_floats(meta["stats_mean"]),
                      fileio.decode_floats(meta["stats_scale"]))
    aux = {}
    names = [n for n in meta.get("aux_names", "").split(",") if n]
    for name in names:
        aux[name] = arrays[f"aux_{name}"]
    return TrajectoryDataset(data, stats, dmeta, aux)
