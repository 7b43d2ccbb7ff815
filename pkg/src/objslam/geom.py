"""Rigid-body algebra on SE(3).

Poses are stored as a unit quaternion ``q = (w, x, y, z)`` and a translation
``t``.  Twists are 6-vectors ``(rho, phi)``: translational part first,
rotational part (axis-angle) second.

Every scalar operation has a batched counterpart (``*_batch``) working on
``(n, 4)`` quaternion and ``(n, 3)`` translation arrays; the pose graph uses
those to evaluate thousands of residuals at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-9
LOG_ANGLE_LIMIT = np.pi - 1e-6


class DomainError(ValueError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class DegenerateInputError(ValueError):
    """Point sets that do not determine a unique rigid transform."""


# ---------------------------------------------------------------------------
# quaternion primitives (batched, w-first)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _cross(a, b):
    # np.cross carries heavy per-call overhead on small arrays
    a, b = np.broadcast_arrays(a, b)
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def quat_rotate(q, v):
    """Rotate vectors ``v`` by quaternions ``q`` (broadcasting over leading axes)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = _cross(u, v)
    return v + 2.0 * (w * uv + _cross(u, uv))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Rotation matrix to quaternion (Shepperd's method, single matrix)."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# exp / log (batched)


def _exp_coefficients(theta):
    """Coefficients (B, C) of V = I + B*phi^ + C*phi^^2."""
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    half = 0.5 * th
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(half) ** 2 / th**2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / th**3)
    return b, c


def exp_batch(twists):
    """Map ``(n, 6)`` twists to ``(q, t)`` arrays."""
    twists = np.atleast_2d(np.asarray(twists, dtype=float))
    rho = twists[:, :3]
    phi = twists[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    # sin(theta/2)/theta
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * th) / th)
    q = np.concatenate([np.cos(0.5 * theta)[:, None], k[:, None] * phi], axis=1)
    q = quat_normalize(q)
    b, c = _exp_coefficients(theta)
    pxr = np.cross(phi, rho)
    t = rho + b[:, None] * pxr + c[:, None] * np.cross(phi, pxr)
    return q, t


def log_batch(q, t, check=True):
    """Map ``(q, t)`` arrays to ``(n, 6)`` twists."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    t = np.atleast_2d(np.asarray(t, dtype=float))
    q = np.where(q[:, :1] < 0, -q, q)
    w = q[:, 0]
    v = q[:, 1:]
    s = np.linalg.norm(v, axis=1)
    theta = 2.0 * np.arctan2(s, w)
    if check and np.any(theta >= LOG_ANGLE_LIMIT):
        raise DomainError("rotation angle at pi; SE(3) logarithm is ill-defined")
    small = theta < SMALL_ANGLE
    ss = np.where(small, 1.0, s)
    # theta / sin(theta/2), with sin(theta/2) = s
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), theta / ss)
    phi = k[:, None] * v
    # V^-1 = I - 0.5 phi^ + D phi^^2
    th = np.where(small, 1.0, theta)
    half = 0.5 * th
    d = np.where(small, 1.0 / 12.0 + theta**2 / 720.0, (1.0 - half * np.cos(half) / np.sin(half)) / th**2)
    pxt = np.cross(phi, t)
    rho = t - 0.5 * pxt + d[:, None] * np.cross(phi, pxt)
    return np.concatenate([rho, phi], axis=1)


def compose_batch(qa, ta, qb, tb):
    q = quat_normalize(quat_multiply(qa, qb))
    t = np.asarray(ta, dtype=float) + quat_rotate(qa, tb)
    return q, t


def inverse_batch(q, t):
    qi = quat_conjugate(q)
    return qi, -quat_rotate(qi, t)


def adjoint(pose: "Pose") -> np.ndarray:
    """6x6 adjoint acting on ``(rho, phi)`` twists."""
    r = pose.rotation_matrix
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[:3, 3:] = skew(pose.t) @ r
    out[3:, 3:] = r
    return out


def ad_twist(xi) -> np.ndarray:
    """6x6 small adjoint ``ad(xi)`` for a twist ``(rho, phi)``."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((6, 6))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3:] = skew(xi[:3])
    out[3:, 3:] = skew(xi[3:])
    return out


# ---------------------------------------------------------------------------
# Pose


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with unit-quaternion rotation ``q`` (w, x, y, z) and translation ``t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rotation_matrix(cls, r, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(matrix_to_quat(r), t)

    @classmethod
    def from_list(cls, values) -> "Pose":
        values = list(values)
        if len(values) != 7:
            raise ValueError(f"pose needs 7 numbers [qw,qx,qy,qz,tx,ty,tz], got {len(values)}")
        return cls(values[:4], values[4:])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.q] + [float(v) for v in self.t]

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.t
        return m

    @property
    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        w = abs(self.q[0])
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), w))

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        sign = 1.0 if np.dot(self.q, other.q) >= 0 else -1.0
        return bool(np.allclose(self.q, sign * other.q, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self):
        q = np.array2string(self.q, precision=6)
        t = np.array2string(self.t, precision=6)
        return f"Pose(q={q}, t={t})"


def se3_exp(twist) -> Pose:
    """Exponential map from a 6-vector ``(rho, phi)`` to a pose."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    q, t = exp_batch(twist[None])
    return Pose(q[0], t[0])


def se3_log(p: Pose) -> np.ndarray:
    """Logarithm of a pose as a ``(rho, phi)`` twist.

    Raises DomainError when the rotation angle is within 1e-6 of pi.
    """
    return log_batch(p.q[None], p.t[None])[0]


def compose(a: Pose, b: Pose) -> Pose:
    q, t = compose_batch(a.q, a.t, b.q, b.t)
    return Pose(q, t)


def inverse(a: Pose) -> Pose:
    q, t = inverse_batch(a.q, a.t)
    return Pose(q, t)


def transform_point(a: Pose, x) -> np.ndarray:
    """Apply ``a`` to a point (3,) or an (n, 3) array of points."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return a.rotation_matrix @ x + a.t
    return x @ a.rotation_matrix.T + a.t


def fit_rigid(src, dst) -> Pose:
    """Least-squares rigid transform (no scale) mapping ``src`` onto ``dst``.

    Closed-form SVD solution with a determinant sign correction so the result
    is a proper rotation.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateInputError(f"point sets must both be (n, 3); got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, s, vt = np.linalg.svd(h)
    scale = max(s[0], np.finfo(float).tiny)
    if s[1] <= 1e-10 * scale:
        raise DegenerateInputError("point set is collinear (rank-deficient covariance)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose.from_rotation_matrix(r, mu_d - r @ mu_s)


def rotation_angle_between(a: Pose, b: Pose) -> float:
    return compose(inverse(a), b).angle
