"""Poincare-ball geometry used as a hierarchy distance signal.

Only three pieces are needed: the exponential map from the origin, the
closed-form ball distance (with analytic gradients), and the sigmoid
transform turning a distance into a same-subtree similarity.  Points live in
the open ball c * ||u||^2 < 1 for curvature c > 0; all functions broadcast
over leading axes with coordinates on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

BALL_EPS = 1e-7       # points are kept off the boundary by this margin
COINCIDENT_EPS = 1e-12  # below this separation the distance is defined as 0

DEFAULT_DIM = 16
DEFAULT_CURVATURE = 1.0
DEFAULT_D_THRESH = 4.0
DEFAULT_TAU = 1.0


def _check_curvature(c: float) -> float:
    if not c > 0:
        raise ValueError("curvature must be positive")
    return float(c)


def clamp_to_ball(u: np.ndarray, c: float) -> np.ndarray:
    """Radially rescale any point with c*||u||^2 >= 1 - BALL_EPS onto that shell."""
    c = _check_curvature(c)
    u = np.asarray(u, dtype=float)
    sq = c * np.sum(u * u, axis=-1, keepdims=True)
    limit = 1.0 - BALL_EPS
    scale = np.where(sq >= limit, np.sqrt(limit / np.maximum(sq, limit)), 1.0)
    return u * scale


def exp_map_origin(v: np.ndarray, c: float = DEFAULT_CURVATURE) -> np.ndarray:
    """Map a tangent vector at the origin into the ball.

    u = tanh(sqrt(c)*||v||) / (sqrt(c)*||v||) * v, with the v -> 0 limit
    handled analytically.  Output is strictly inside the ball.
    """
    c = _check_curvature(c)
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("tangent vector must be finite")
    sqrt_c = np.sqrt(c)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    arg = sqrt_c * norm
    # tanh(x)/x -> 1 as x -> 0
    factor = np.where(arg > 0, np.tanh(arg) / np.where(arg > 0, arg, 1.0), 1.0)
    return clamp_to_ball(factor * v, c)


def _check_inside(u: np.ndarray, c: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(c * np.sum(u * u, axis=-1) >= 1.0):
        raise ValueError("point on or outside the ball boundary")
    return u


def poincare_distance(u: np.ndarray, v: np.ndarray, c: float = DEFAULT_CURVATURE) -> np.ndarray:
    """Geodesic distance under the ball metric of curvature c.

    d = arcosh(1 + 2c||u-v||^2 / ((1-c||u||^2)(1-c||v||^2))) / sqrt(c).
    Near-coincident points (separation < 1e-12) return exactly 0.
    """
    c = _check_curvature(c)
    u = _check_inside(u, c)
    v = _check_inside(v, c)
    diff_sq = np.sum((u - v) ** 2, axis=-1)
    bu = 1.0 - c * np.sum(u * u, axis=-1)
    bv = 1.0 - c * np.sum(v * v, axis=-1)
    x = 1.0 + 2.0 * c * diff_sq / (bu * bv)
    d = np.arccosh(np.maximum(x, 1.0)) / np.sqrt(c)
    return np.where(diff_sq < COINCIDENT_EPS ** 2, 0.0, d)


def poincare_distance_grads(u: np.ndarray, v: np.ndarray,
                            c: float = DEFAULT_CURVATURE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance plus analytic gradients with respect to both points.

    At near-coincident points the arcosh derivative is singular; there the
    distance is defined as 0 with zero gradient (it only ever feeds smooth
    similarities, never raw metric derivatives).
    """
    c = _check_curvature(c)
    u = _check_inside(u, c)
    v = _check_inside(v, c)
    diff = u - v
    diff_sq = np.sum(diff * diff, axis=-1, keepdims=True)
    bu = 1.0 - c * np.sum(u * u, axis=-1, keepdims=True)
    bv = 1.0 - c * np.sum(v * v, axis=-1, keepdims=True)
    x = 1.0 + 2.0 * c * diff_sq / (bu * bv)
    coincident = diff_sq < COINCIDENT_EPS ** 2
    # d(arcosh x)/dx = 1/sqrt(x^2-1); guard the argument for masked entries
    denom = np.sqrt(np.maximum(x * x - 1.0, COINCIDENT_EPS ** 2))
    dd_dx = np.where(coincident, 0.0, 1.0 / (np.sqrt(c) * denom))
    dx_du = (4.0 * c / (bu * bv)) * (diff + (c * diff_sq / bu) * u)
    dx_dv = (4.0 * c / (bu * bv)) * (-diff + (c * diff_sq / bv) * v)
    d = np.where(coincident[..., 0], 0.0, np.arccosh(np.maximum(x[..., 0], 1.0)) / np.sqrt(c))
    return d, dd_dx * dx_du, dd_dx * dx_dv


def origin_distance(u: np.ndarray, c: float = DEFAULT_CURVATURE) -> np.ndarray:
    """Closed-form distance from the origin: 2/sqrt(c) * artanh(sqrt(c)*||u||)."""
    c = _check_curvature(c)
    u = _check_inside(u, c)
    norm = np.linalg.norm(u, axis=-1)
    return 2.0 / np.sqrt(c) * np.arctanh(np.sqrt(c) * norm)


def hierarchy_similarity(d: np.ndarray, d_thresh: float = DEFAULT_D_THRESH,
                         tau: float = DEFAULT_TAU) -> np.ndarray:
    """Sigmoid((d_thresh - d) / tau): near 1 inside a subtree, near 0 across."""
    if not tau > 0:
        raise ValueError("similarity temperature must be positive")
    return expit((d_thresh - np.asarray(d, dtype=float)) / tau)


def pairwise_distances(points: np.ndarray, c: float = DEFAULT_CURVATURE) -> np.ndarray:
    """(M, M) distance matrix for a stack of ball points."""
    return poincare_distance(points[:, None, :], points[None, :, :], c)


@dataclass(frozen=True)
class BallPoint:
    """A single validated point inside the ball of curvature c."""

    u: np.ndarray
    c: float = DEFAULT_CURVATURE

    def __post_init__(self):
        c = _check_curvature(self.c)
        u = np.asarray(self.u, dtype=float)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "c", c)
        if c * float(u @ u) >= 1.0:
            raise ValueError("point on or outside the ball boundary")

    @classmethod
    def from_tangent(cls, v: np.ndarray, c: float = DEFAULT_CURVATURE) -> "BallPoint":
        return cls(exp_map_origin(v, c), c)

    def distance_to(self, other: "BallPoint") -> float:
        if other.c != self.c:
            raise ValueError("points live on balls of different curvature")
        return float(poincare_distance(self.u, other.u, self.c))
