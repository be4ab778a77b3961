"""SO(3)/SE(3) group operations on explicit matrices.

Rotations are plain ``(3, 3)`` float arrays.  A :class:`Pose` pairs a rotation
with a translation and a group tag; SO(3) poses always carry ``t == 0``.
Twists are flat arrays: ``omega`` (3,) for so(3), ``[v; omega]`` (6,) for se(3).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Below this angle the Rodrigues / V coefficients switch to Taylor expansions.
SMALL_ANGLE = 1e-8
# (theta - sin theta) / theta^3 cancels catastrophically long before 1e-8.
SERIES_ANGLE_V = 1e-2
ORTHO_TOL = 1e-9
# Largest squashed rotation magnitude; keeps it strictly below pi in floating point.
SQUASH_MAX = math.pi - 1e-12


class Group(str, enum.Enum):
    SO3 = "SO3"
    SE3 = "SE3"

    @property
    def twist_dim(self) -> int:
        return 3 if self is Group.SO3 else 6

    @property
    def pose_cols(self) -> int:
        return 3 if self is Group.SO3 else 4

    @classmethod
    def parse(cls, value: "str | Group") -> "Group":
        if isinstance(value, Group):
            return value
        return cls(str(value).upper())


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid motion ``x -> R x + t`` (``t`` is zero for SO(3) poses)."""

    R: np.ndarray
    t: np.ndarray
    group: Group = Group.SE3

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        group = Group.parse(self.group)
        if group is Group.SO3:
            t = np.zeros(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "group", group)

    @classmethod
    def identity(cls, group: "Group | str" = Group.SE3) -> "Pose":
        return cls(np.eye(3), np.zeros(3), Group.parse(group))

    @classmethod
    def from_matrix(cls, m: np.ndarray, group: "Group | str | None" = None) -> "Pose":
        """Build from a 3x3, 3x4 or 4x4 matrix."""
        m = np.asarray(m, dtype=float)
        if group is None:
            group = Group.SO3 if m.shape == (3, 3) else Group.SE3
        group = Group.parse(group)
        t = m[:3, 3] if m.shape[1] >= 4 else np.zeros(3)
        return cls(m[:3, :3], t, group)

    def matrix(self) -> np.ndarray:
        """3x3 (SO3) or 3x4 (SE3) matrix, the on-disk/network representation."""
        if self.group is Group.SO3:
            return self.R.copy()
        return np.hstack([self.R, self.t[:, None]])

    def homogeneous(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.t
        return out

    def allclose(self, other: "Pose", atol: float = 1e-12) -> bool:
        return (
            self.group is other.group
            and np.allclose(self.R, other.R, rtol=0, atol=atol)
            and np.allclose(self.t, other.t, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"Pose({self.group.value}, R={self.R.tolist()}, t={self.t.tolist()})"


def hat(omega) -> np.ndarray:
    x, y, z = np.asarray(omega, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """Coefficients ``sin t / t``, ``(1 - cos t) / t^2``, ``(t - sin t) / t^3``."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = math.sin(theta) / theta
        half = 0.5 * theta
        # 2 sin^2(t/2) avoids the cancellation in 1 - cos t
        b = 0.5 * (math.sin(half) / half) ** 2
    if theta < SERIES_ANGLE_V:
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - math.sin(theta)) / (theta * t2)
    return a, b, c


def exp_so3(omega) -> np.ndarray:
    """Rodrigues formula."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rodrigues_coeffs(theta)
    W = hat(omega)
    return np.eye(3) + a * W + b * (W @ W)


def left_jacobian_so3(omega) -> np.ndarray:
    """The ``V`` matrix mapping the se(3) translation part to ``t``."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(omega))
    _, b, c = _rodrigues_coeffs(theta)
    W = hat(omega)
    return np.eye(3) + b * W + c * (W @ W)


def exp_se3(eps) -> Pose:
    eps = np.asarray(eps, dtype=float).reshape(6)
    v, omega = eps[:3], eps[3:]
    return Pose(exp_so3(omega), left_jacobian_so3(omega) @ v, Group.SE3)


def exp_twist(eps, group: "Group | str") -> Pose:
    group = Group.parse(group)
    eps = np.asarray(eps, dtype=float)
    if group is Group.SO3:
        return Pose(exp_so3(eps), np.zeros(3), Group.SO3)
    return exp_se3(eps)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar factor with det +1)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def orthonormality_error(R: np.ndarray) -> float:
    R = np.asarray(R, dtype=float)
    return float(
        max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    )


def _check_groups(*poses: Pose) -> Group:
    group = poses[0].group
    for p in poses[1:]:
        if p.group is not group:
            raise ValueError(f"group mismatch: {group.value} vs {p.group.value}")
    return group


def compose(A: Pose, B: Pose) -> Pose:
    group = _check_groups(A, B)
    return Pose(A.R @ B.R, A.R @ B.t + A.t, group)


def inverse(T: Pose) -> Pose:
    Rt = T.R.T
    return Pose(Rt, -Rt @ T.t, T.group)


def boxplus(T: Pose, eps) -> Pose:
    """Body-frame update ``T exp(eps^)``."""
    out = compose(T, exp_twist(eps, T.group))
    if orthonormality_error(out.R) > ORTHO_TOL:
        out = Pose(project_to_so3(out.R), out.t, out.group)
    return out


def relative(Ti: Pose, Tj: Pose) -> Pose:
    """``T_i^-1 T_j``, the relative motion implied by two absolute (camera-to-world) poses.

    A global ``T_k -> G T_k`` leaves every relative pose unchanged.
    """
    return compose(inverse(Ti), Tj)


def relative_arrays(Ri, ti, Rj, tj):
    """Vectorised :func:`relative` on ``(E,3,3)`` / ``(E,3)`` stacks."""
    RiT = np.swapaxes(Ri, -1, -2)
    return RiT @ Rj, np.einsum("eab,eb->ea", RiT, tj - ti)


def residual(Ti: Pose, Tj: Pose, Tij_meas: Pose) -> Pose:
    """``T_i^-1 T_j T_ij^-1``; identity when estimates agree with the measurement."""
    return compose(relative(Ti, Tj), inverse(Tij_meas))


def rotation_angle(R: np.ndarray) -> float:
    return float(rotation_angles(R))


def rotation_angles(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of each rotation in a ``(..., 3, 3)`` stack.

    ``atan2(|skew part|, trace - 1)`` stays accurate near 0 and pi, where
    ``arccos`` of the trace loses half the digits.
    """
    R = np.asarray(R, dtype=float)
    cos2 = np.trace(R, axis1=-2, axis2=-1) - 1.0
    axis = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    return np.arctan2(np.linalg.norm(axis, axis=-1), cos2)


def translation_error(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def squash(omega) -> np.ndarray:
    """Rescale ``omega`` to magnitude ``pi |w|^2 / (1 + |w|^2)``, keeping its direction.

    The magnitude is capped at :data:`SQUASH_MAX`, which only binds once the
    formula itself rounds to pi (``|w|`` above ~1e7).
    """
    omega = np.asarray(omega, dtype=float)
    n = np.linalg.norm(omega, axis=-1, keepdims=True)
    # pi |w|^2/(1+|w|^2) * w/|w| == c w with c = pi |w|/(1+|w|^2) = pi/(|w| + 1/|w|);
    # each branch only sees values where it cannot overflow
    lo, hi = np.minimum(n, 1.0), np.maximum(n, 1.0)
    coef = np.where(n <= 1.0, np.pi * lo / (1.0 + lo * lo), np.pi / (hi + 1.0 / hi))
    out = coef * omega
    mag = coef * n
    return np.where(mag > SQUASH_MAX, out * (SQUASH_MAX / np.where(mag > 0, mag, 1.0)), out)


def random_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-uniform rotations from normalised Gaussian quaternions."""
    shape = (1 if size is None else size, 4)
    q = rng.standard_normal(shape)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if size is None else R


def random_axis_angle(rng: np.random.Generator, angle: float) -> np.ndarray:
    """Rotation vector with the given angle about a uniformly random axis."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return angle * axis
