"""Batched SE(3) helpers.

Twists are ordered ``(linear, angular)``. Every function accepts stacked
inputs with arbitrary leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-8


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rot_z(theta):
    """Active rotation matrices about +z, shape ``theta.shape + (3, 3)``."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(theta.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    flat = phi.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(phi.shape[:-1] + (3, 3))


def so3_log(R):
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    return Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))


def _jacobian_coeffs(theta):
    # coefficients of hat(phi) and hat(phi)^2 in the SO(3) left Jacobian
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / th**3)
    return a, b


def _inv_jacobian_coeff(theta):
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),
    )
    return c


def se3_exp(xi):
    """Exponential map; returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _jacobian_coeffs(theta)
    pxr = np.cross(phi, rho)
    t = rho + a[..., None] * pxr + b[..., None] * np.cross(phi, pxr)
    return so3_exp(phi), t


def se3_log(R, t):
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    phi = so3_log(R)
    theta = np.linalg.norm(phi, axis=-1)
    c = _inv_jacobian_coeff(theta)
    pxt = np.cross(phi, t)
    rho = t - 0.5 * pxt + c[..., None] * np.cross(phi, pxt)
    return np.concatenate([rho, phi], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``.

    May hold a stack of poses (leading dimensions on both fields).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[..., :3, :3], T[..., :3, 3]).check()

    def check(self, tol=1e-9) -> Pose:
        """Raise ValueError unless every rotation is orthonormal with det +1."""
        R = self.rotation
        err = np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3)).max(initial=0.0)
        if err > tol or np.any(np.abs(np.linalg.det(R) - 1.0) > tol):
            raise ValueError("rotation is not orthonormal with determinant +1")
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")
        return self

    @classmethod
    def from_quaternion(cls, q_wxyz, translation) -> Pose:
        q = np.asarray(q_wxyz, dtype=float)
        R = Rotation.from_quat(q[..., [1, 2, 3, 0]].reshape(-1, 4)).as_matrix()
        return cls(R.reshape(q.shape[:-1] + (3, 3)), translation)

    @classmethod
    def exp(cls, xi) -> Pose:
        return cls(*se3_exp(xi))

    def log(self) -> np.ndarray:
        return se3_log(self.rotation, self.translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
        q = Rotation.from_matrix(self.rotation.reshape(-1, 3, 3)).as_quat()
        q = q[:, [3, 0, 1, 2]]
        q *= np.where(q[:, :1] < 0, -1.0, 1.0)
        return q.reshape(self.rotation.shape[:-2] + (4,))

    def matrix(self) -> np.ndarray:
        out = np.zeros(self.rotation.shape[:-2] + (4, 4))
        out[..., :3, :3] = self.rotation
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out

    def inverse(self) -> Pose:
        Rt = np.swapaxes(self.rotation, -1, -2)
        return Pose(Rt, -np.einsum("...ij,...j->...i", Rt, self.translation))

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other`` (apply ``other`` first)."""
        R = self.rotation @ other.rotation
        t = np.einsum("...ij,...j->...i", self.rotation, other.translation) + self.translation
        return Pose(R, t)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.einsum("...ij,...j->...i", self.rotation, points) + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.einsum("...ji,...j->...i", self.rotation, points - self.translation)

    def __getitem__(self, idx) -> Pose:
        return Pose(self.rotation[idx], self.translation[idx])

    def __len__(self) -> int:
        return len(self.rotation)
