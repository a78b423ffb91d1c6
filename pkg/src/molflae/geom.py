"""Rigid motions, weighted Kabsch superposition and RMSD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def random_rotation(rng: np.random.Generator) -> RigidTransform:
    # normalised Gaussian quaternion is uniform on S^3 -> Haar measure on SO(3)
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return RigidTransform(r, np.zeros(3))


def apply(t: RigidTransform, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ t.rotation.T + t.translation


def weighted_kabsch(src, dst, weights=None) -> RigidTransform:
    """Proper rigid motion ``T`` minimising ``sum_i w_i |T(src_i) - dst_i|^2``.

    Raises
    ------
    DegenerateGeometryError
        If the weighted covariance has rank < 2 (collinear or coincident points)
        or all weights are zero.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"shape mismatch: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateGeometryError("weights must be nonnegative and not all zero")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    a = src - cs
    b = dst - cd
    cov = (a * w[:, None]).T @ b
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("weighted covariance has rank < 2")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def weighted_sq_residual(t: RigidTransform, src, dst, weights=None) -> float:
    diff = apply(t, src) - np.asarray(dst, dtype=np.float64)
    w = np.ones(len(diff)) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(w @ (diff**2).sum(axis=1))


def rmsd(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=1).mean()))


def rotation_angle_between(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic distance on SO(3), in degrees."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
