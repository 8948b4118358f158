"""Rotary position embedding and the rotation-commuting 2x2 matrices.

Conventions used throughout the package:

* Vectors are rows and rotations act on the right: ``v <- v @ R``.
* Sub-vectors are interleaved adjacent pairs ``(v[0], v[1]), (v[2], v[3]), ...``.
  Many transformer codebases rotate the two halves of the vector instead;
  the codebook algebra here is written for the interleaved layout.
* Frequency indices are 1-based (``theta(1, d) == 1``), token positions
  are 0-based.
"""

from dataclasses import dataclass, field

import numpy as np


def theta(i, d, base=10000.0):
    """Rotation frequency of the ``i``-th (1-based) 2-D subspace."""
    if d <= 0 or d % 2:
        raise ValueError(f"d must be a positive even number, got {d}")
    if not 1 <= i <= d // 2:
        raise ValueError(f"subspace index {i} out of range for d={d}")
    return float(base ** (-2.0 * (i - 1) / d))


@dataclass(frozen=True)
class RopeParams:
    d: int
    base: float = 10000.0
    thetas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"d must be a positive even number, got {self.d}")
        th = np.array([theta(i, self.d, self.base) for i in range(1, self.d // 2 + 1)])
        th.setflags(write=False)
        object.__setattr__(self, "thetas", th)

    def angles(self, positions):
        """Angle table of shape ``(len(positions), d/2)``."""
        return np.outer(np.asarray(positions, dtype=np.float64), self.thetas)


def rotation(angle):
    """2x2 rotation block ``[[cos, -sin], [sin, cos]]``."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rope_block(params, m, i):
    """RoPE block for position ``m`` and 1-based subspace ``i``."""
    if not 1 <= i <= params.d // 2:
        raise ValueError(f"subspace index {i} out of range for d={params.d}")
    if m < 0:
        raise ValueError("position must be non-negative")
    return rotation(m * params.thetas[i - 1])


def _rotate_pairs(x, cos, sin):
    # row-vector convention: (x0, x1) @ [[c, -s], [s, c]] = (x0 c + x1 s, -x0 s + x1 c)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos + x1 * sin
    out[..., 1::2] = -x0 * sin + x1 * cos
    return out


def apply_rope(params, v, m):
    """Rotate a single length-``d`` vector to position ``m``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.d,):
        raise ValueError(f"expected vector of length {params.d}, got shape {v.shape}")
    ang = m * params.thetas
    return _rotate_pairs(v, np.cos(ang), np.sin(ang))


def apply_rope_rows(params, X, positions=None):
    """Rotate each row of ``X``; row ``i`` goes to ``positions[i]`` (default ``i``)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ValueError(f"expected shape (n, {params.d}), got {X.shape}")
    if positions is None:
        positions = np.arange(X.shape[0])
    ang = params.angles(positions)
    return _rotate_pairs(X, np.cos(ang), np.sin(ang))


@dataclass(frozen=True)
class CommMat:
    """The 2x2 matrix ``[[x, y], [-y, x]]``; commutes with every 2-D rotation."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("CommMat entries must be finite")

    def as_array(self):
        return np.array([[self.x, self.y], [-self.y, self.x]])

    def __add__(self, other):
        return CommMat(self.x + other.x, self.y + other.y)

    @classmethod
    def from_array(cls, a, atol=1e-12):
        a = np.asarray(a, dtype=np.float64)
        if not is_comm_form(a, atol=atol):
            raise ValueError("matrix is not of the form [[x, y], [-y, x]]")
        return cls(float(a[0, 0]), float(a[0, 1]))


def comm_mat(x, y):
    return CommMat(float(x), float(y))


def is_comm_form(a, atol=1e-12):
    a = np.asarray(a, dtype=np.float64)
    return (
        a.shape == (2, 2)
        and abs(a[0, 0] - a[1, 1]) <= atol
        and abs(a[0, 1] + a[1, 0]) <= atol
    )


def commute_residual(c, r):
    """Frobenius norm of ``r @ c - c @ r``.

    ``r`` must be a proper rotation; ``c`` may be any 2x2 matrix or a
    :class:`CommMat`.
    """
    if isinstance(c, CommMat):
        c = c.as_array()
    c = np.asarray(c, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if not (np.allclose(r @ r.T, np.eye(2), atol=1e-9) and abs(np.linalg.det(r) - 1) <= 1e-9):
        raise ValueError("r is not a rotation matrix")
    return float(np.linalg.norm(r @ c - c @ r))
