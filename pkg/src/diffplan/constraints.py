"""Elementwise box constraints on trajectory channels and their projection.

Projection is an exact elementwise clamp in physical space.  Rate limits
are boxes on the joint-velocity rows, so every constraint here shares one
code path; the projection is idempotent and non-expansive by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trajectory import TrajectoryLayout


@dataclass(frozen=True)
class BoxConstraint:
    """Clamp rows (and optionally a column range) of a trajectory matrix.

    ``lo``/``hi`` broadcast against the selected (len(rows), n_cols) block.
    """

    rows: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray
    cols: slice | None = None
    label: str = "box"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        object.__setattr__(self, "rows", tuple(int(r) for r in self.rows))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if np.any(lo > hi):
            raise ValueError(f"{self.label}: lower bound exceeds upper bound")
        if len(self.rows) == 0:
            raise ValueError(f"{self.label}: empty row selection")

    def _check(self, data: np.ndarray) -> None:
        if max(self.rows) >= data.shape[-2] or min(self.rows) < 0:
            raise IndexError(
                f"{self.label}: rows {self.rows} out of range for "
                f"{data.shape[-2]} trajectory rows"
            )


@dataclass(frozen=True)
class ConstraintSet:
    boxes: tuple[BoxConstraint, ...] = ()

    def __bool__(self) -> bool:
        return len(self.boxes) > 0

    @classmethod
    def of(cls, *boxes: BoxConstraint) -> "ConstraintSet":
        return cls(tuple(boxes))


def project(data: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """Clamp every constrained entry into its box; untouched elsewhere.

    Operates on (rows, H) or batched (N, rows, H) physical-space arrays.
    """
    out = np.array(data, dtype=np.float64, copy=True)
    for box in cset.boxes:
        box._check(out)
        rows = list(box.rows)
        cols = box.cols if box.cols is not None else slice(None)
        lo = box.lo[..., None] if box.lo.ndim == 1 else box.lo
        hi = box.hi[..., None] if box.hi.ndim == 1 else box.hi
        out[..., rows, cols] = np.clip(out[..., rows, cols], lo, hi)
    return out


def violation(data: np.ndarray, cset: ConstraintSet) -> list[float]:
    """Max bound violation per constraint (0 when satisfied)."""
    out = []
    data = np.asarray(data, dtype=np.float64)
    for box in cset.boxes:
        box._check(data)
        rows = list(box.rows)
        cols = box.cols if box.cols is not None else slice(None)
        block = data[..., rows, cols]
        lo = box.lo[..., None] if box.lo.ndim == 1 else box.lo
        hi = box.hi[..., None] if box.hi.ndim == 1 else box.hi
        over = np.maximum(block - hi, 0.0)
        under = np.maximum(lo - block, 0.0)
        val = max(float(over.max(initial=0.0)), float(under.max(initial=0.0)))
        out.append(val)
    return out


def is_feasible(data: np.ndarray, cset: ConstraintSet,
                tol: float = 1e-9) -> tuple[bool, list[float]]:
    v = violation(data, cset)
    return all(x <= tol for x in v), v


def joint_range_box(layout: TrajectoryLayout, q_min, q_max,
                    include_actions: bool = True) -> list[BoxConstraint]:
    """Range boxes on joint-position rows and, by default, on the action
    rows too (actions are position targets for the PD-tracked robot)."""
    q_min = np.broadcast_to(np.asarray(q_min, dtype=np.float64), (layout.n_joints,))
    q_max = np.broadcast_to(np.asarray(q_max, dtype=np.float64), (layout.n_joints,))
    rows_q = tuple(range(layout.q.start, layout.q.stop))
    boxes = [BoxConstraint(rows_q, q_min.copy(), q_max.copy(), label="q-range")]
    if include_actions:
        rows_a = tuple(range(layout.action.start, layout.action.stop))
        boxes.append(BoxConstraint(rows_a, q_min.copy(), q_max.copy(),
                                   label="target-range"))
    return boxes


def rate_limit_box(layout: TrajectoryLayout, qd_max) -> BoxConstraint:
    """Velocity rate limit as a symmetric box on the qd rows."""
    qd_max = np.broadcast_to(np.asarray(qd_max, dtype=np.float64), (layout.n_joints,))
    if np.any(qd_max < 0):
        raise ValueError("rate limit must be non-negative")
    rows = tuple(range(layout.qd.start, layout.qd.stop))
    return BoxConstraint(rows, -qd_max, qd_max.copy(), label="qd-rate")
