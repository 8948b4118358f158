"""RoPE-commutative key codebook.

Each 2-D key subspace ``j`` owns ``n_levels`` atoms ``[[x, y], [-y, x]]``.
A pair of level indices ``(a, b)`` selects the cluster center

    (x_a - y_b, y_a + x_b)

i.e. row 0 of atom ``a`` plus row 1 of atom ``b``. ``g`` consecutive
subspaces share one index pair, and ``rounds`` residual codebooks are
stacked on top of each other.

Codes are int arrays of shape ``(n_tokens, rounds, n_groups, 2)``; atoms
are float arrays of shape ``(rounds, d // 2, n_levels, 2)`` holding
``(x, y)``.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import CorruptCodeError, TrainingError

logger = logging.getLogger(__name__)

_CHUNK = 1024


@dataclass(frozen=True)
class KeyQuantConfig:
    d: int
    group_size: int = 64
    n_levels: int = 64
    rounds: int = 11

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"d must be a positive even number, got {self.d}")
        if self.group_size < 1 or (self.d // 2) % self.group_size:
            raise ValueError(
                f"d/2={self.d // 2} is not divisible by group_size={self.group_size}"
            )
        if self.n_levels < 2 or self.n_levels & (self.n_levels - 1):
            raise ValueError(f"n_levels must be a power of two >= 2, got {self.n_levels}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @property
    def n_sub(self):
        return self.d // 2

    @property
    def n_groups(self):
        return self.n_sub // self.group_size

    @property
    def index_bits(self):
        return int(math.log2(self.n_levels))

    @property
    def bits_per_token(self):
        return self.rounds * self.n_groups * 2 * self.index_bits


@dataclass(frozen=True)
class EmConfig:
    """Schedule for codebook EM.

    ``t0=None`` picks the median of the first distance matrix; ``ridge=None``
    scales the M-step regularizer with the trace of the normal matrix.
    """

    soft_iters: int = 30
    hard_iters_max: int = 100
    t0: float | None = None
    decay: float = 0.9
    tol: float = 1e-6
    ridge: float | None = None
    seed: int = 0
    search: str = "factorized"
    n_init: int = 1

    def __post_init__(self):
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.t0 is not None and self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if self.search not in ("factorized", "brute"):
            raise ValueError(f"unknown search method {self.search!r}")


@dataclass(frozen=True)
class KeyCodebook:
    config: KeyQuantConfig
    atoms: np.ndarray = field(repr=False)

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        cfg = self.config
        expected = (cfg.rounds, cfg.n_sub, cfg.n_levels, 2)
        if atoms.shape != expected:
            raise ValueError(f"atoms must have shape {expected}, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    def group_atoms(self, round_, group):
        g = self.config.group_size
        return self.atoms[round_, group * g:(group + 1) * g]

    def centers(self, round_, group):
        """All ``n_levels**2`` centers of one group, shape ``(N'^2, 2g)``."""
        c = center_table(self.group_atoms(round_, group))
        n = self.config.n_levels
        return c.reshape(n * n, -1)


def build_T(n_levels):
    """Constant matrix mapping the stacked atoms to all stacked centers.

    Row ``2(a*N + b)`` picks ``x_a - y_b`` and row ``2(a*N + b) + 1`` picks
    ``x_b + y_a`` from ``phi = [x_0, y_0, x_1, y_1, ...]``.
    """
    n = int(n_levels)
    if n < 1:
        raise ValueError("n_levels must be >= 1")
    T = np.zeros((2 * n * n, 2 * n))
    for a in range(n):
        for b in range(n):
            r = 2 * (a * n + b)
            T[r, 2 * a] = 1.0
            T[r, 2 * b + 1] = -1.0
            T[r + 1, 2 * b] = 1.0
            T[r + 1, 2 * a + 1] = 1.0
    return T


def center_table(atoms):
    """Centers for atoms of shape ``(g, N', 2)``; returns ``(N', N', g, 2)``.

    Entry ``[a, b, j]`` is ``(x_a - y_b, y_a + x_b)`` in subspace ``j``.
    """
    x = atoms[..., 0].T  # (N', g)
    y = atoms[..., 1].T
    c0 = x[:, None, :] - y[None, :, :]
    c1 = y[:, None, :] + x[None, :, :]
    return np.stack([c0, c1], axis=-1)


def cluster_center(codebook, round_, group, a, b):
    cfg = codebook.config
    if not (0 <= a < cfg.n_levels and 0 <= b < cfg.n_levels):
        raise ValueError("level index out of range")
    atoms = codebook.group_atoms(round_, group)
    x, y = atoms[..., 0], atoms[..., 1]
    return np.stack([x[:, a] - y[:, b], y[:, a] + x[:, b]], axis=-1).reshape(-1)


def _as_groups(points, g):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 * g:
        raise ValueError(f"points must have shape (n, {2 * g}), got {points.shape}")
    return points


def group_sq_distances(points, atoms, method="factorized"):
    """Squared distances from ``points`` (n, 2g) to every center, (n, N'^2).

    ``brute`` materializes every center; ``factorized`` splits the inner
    product into a per-``a`` and a per-``b`` table plus an ``N' x N'``
    cross table, so each point costs ``O(N' g + N'^2)``.
    """
    g, n_lv, _ = atoms.shape
    points = _as_groups(points, g)
    pn = np.einsum("ij,ij->i", points, points)[:, None]
    if method == "brute":
        centers = center_table(atoms).reshape(n_lv * n_lv, 2 * g)
        cn = np.einsum("ij,ij->i", centers, centers)
        d = pn - 2.0 * points @ centers.T + cn[None, :]
    elif method == "factorized":
        # contiguous copies keep the products on the BLAS path
        x = np.ascontiguousarray(atoms[..., 0])  # (g, N')
        y = np.ascontiguousarray(atoms[..., 1])
        p0 = np.ascontiguousarray(points[:, 0::2])
        p1 = np.ascontiguousarray(points[:, 1::2])
        A = p0 @ x + p1 @ y
        B = p1 @ x - p0 @ y
        na = np.sum(x * x + y * y, axis=0)
        G = y.T @ x - x.T @ y
        const = na[:, None] + na[None, :] + 2.0 * G
        d = (
            pn[:, :, None]
            - 2.0 * (A[:, :, None] + B[:, None, :])
            + const[None]
        ).reshape(points.shape[0], -1)
    else:
        raise ValueError(f"unknown search method {method!r}")
    return np.maximum(d, 0.0)


def _assign(points, atoms, method):
    n = points.shape[0]
    n_lv = atoms.shape[1]
    flat = np.empty(n, dtype=np.int64)
    for s in range(0, n, _CHUNK):
        d = group_sq_distances(points[s:s + _CHUNK], atoms, method)
        flat[s:s + _CHUNK] = np.argmin(d, axis=1)
    return np.stack([flat // n_lv, flat % n_lv], axis=1)


def e_step_assign(points, codebook, round_, group, method="brute"):
    """Nearest-center index pairs ``(a, b)`` for each row of ``points``.

    Ties go to the smallest ``a * n_levels + b``.
    """
    atoms = codebook.group_atoms(round_, group)
    points = _as_groups(points, codebook.config.group_size)
    return _assign(points, atoms, method)


def soft_weights(dists, temperature):
    """Row-wise ``softmax(-dists / temperature)``."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = -np.asarray(dists, dtype=np.float64) / temperature
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def normal_matrix(wsum):
    """``T^T S T`` for per-center weights ``wsum`` of shape ``(N', N')``."""
    n = wsum.shape[0]
    usage = wsum.sum(axis=1) + wsum.sum(axis=0)
    H = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    H[2 * idx, 2 * idx] = usage
    H[2 * idx + 1, 2 * idx + 1] = usage
    cross = wsum.T - wsum  # [p, q] -> (x_p, y_q)
    H[0::2, 1::2] = cross
    H[1::2, 0::2] = cross.T
    return H


def normal_rhs(s0, s1):
    """``T^T S m`` for weighted coordinate sums of shape ``(N', N', g)``.

    Returns ``(2N', g)`` in ``phi`` order.
    """
    rx = s0.sum(axis=1) + s1.sum(axis=0)
    ry = s1.sum(axis=1) - s0.sum(axis=0)
    out = np.empty((2 * s0.shape[0], s0.shape[2]))
    out[0::2] = rx
    out[1::2] = ry
    return out


def default_ridge(H):
    return 1e-8 * np.trace(H) / H.shape[0]


def solve_atoms(wsum, s0, s1, ridge=None):
    """Closed-form atom update for one group.

    Args:
        wsum: total weight per center, ``(N', N')``.
        s0, s1: weighted sums of the two point coordinates per center and
            subspace, ``(N', N', g)``.
        ridge: diagonal regularizer; ``None`` uses the trace-scaled default.

    Returns:
        Atoms of shape ``(g, N', 2)``.
    """
    H = normal_matrix(wsum)
    lam = default_ridge(H) if ridge is None else float(ridge)
    H[np.diag_indices_from(H)] += lam
    rhs = normal_rhs(s0, s1)
    try:
        factor = sla.cho_factor(H, lower=True, check_finite=True)
        phi = sla.cho_solve(factor, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise TrainingError(
            "singular M-step system",
            diagnostics={
                "ridge": lam,
                "total_weight": float(wsum.sum()),
                "empty_centers": int(np.sum(wsum <= 0)),
                "reason": str(exc),
            },
        ) from exc
    n = wsum.shape[0]
    return phi.T.reshape(-1, n, 2)


def m_step(points, weights, T_matrix=None, ridge=None):
    """Closed-form update of one subspace's atoms.

    Args:
        points: ``(n, 2)`` data in a single subspace.
        weights: ``(n, N'^2)`` assignment weights (rows sum to one).
        T_matrix: if given, the normal equations are assembled literally as
            ``T^T S T`` and ``T^T S m``; otherwise the sparse structure of
            ``T`` is used directly.
        ridge: diagonal regularizer, ``None`` for the default.

    Returns:
        ``(N', 2)`` array of ``(x, y)`` pairs.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n_cc = weights.shape[1]
    n = math.isqrt(n_cc)
    if n * n != n_cc:
        raise ValueError("weights must have a square number of columns")
    wsum = weights.sum(axis=0)
    sums = weights.T @ points  # (N'^2, 2)
    if T_matrix is None:
        s0 = sums[:, 0].reshape(n, n, 1)
        s1 = sums[:, 1].reshape(n, n, 1)
        return solve_atoms(wsum.reshape(n, n), s0, s1, ridge)[0]
    T = np.asarray(T_matrix, dtype=np.float64)
    means = np.divide(sums, wsum[:, None], out=np.zeros_like(sums), where=wsum[:, None] > 0)
    m = means.reshape(-1)
    S = np.repeat(wsum, 2)
    H = T.T @ (S[:, None] * T)
    lam = default_ridge(H) if ridge is None else float(ridge)
    H[np.diag_indices_from(H)] += lam
    try:
        phi = sla.cho_solve(sla.cho_factor(H), T.T @ (S * m))
    except np.linalg.LinAlgError as exc:
        raise TrainingError("singular M-step system", diagnostics={"ridge": lam}) from exc
    return phi.reshape(n, 2)


def weighted_objective(points, atoms, weights):
    """``sum_i sum_c W_ic ||p_i - c||^2`` for one group."""
    d = group_sq_distances(points, atoms, "brute")
    return float(np.sum(weights * d))


def _hard_error(points, atoms, assign):
    n_lv = atoms.shape[1]
    centers = center_table(atoms).reshape(n_lv * n_lv, -1)
    recon = centers[assign[:, 0] * n_lv + assign[:, 1]]
    res = points - recon
    return np.einsum("ij,ij->i", res, res)


def _init_atoms(points, n_levels, rng):
    g = points.shape[1] // 2
    sub = points.reshape(-1, g, 2)
    sigma = np.sqrt(np.mean(sub ** 2, axis=(0, 2)) - np.mean(sub, axis=(0, 2)) ** 2)
    sigma = np.nan_to_num(np.maximum(sigma, 0.0))
    return rng.standard_normal((g, n_levels, 2)) * (sigma / np.sqrt(2.0))[:, None, None]


def _repair_dead(atoms, usage, points, point_err, threshold):
    dead = np.flatnonzero(usage < threshold)
    if dead.size == 0:
        return atoms, 0
    worst = np.argsort(-point_err, kind="stable")[: dead.size]
    atoms = atoms.copy()
    for level, i in zip(dead, worst):
        p = points[i].reshape(-1, 2)
        # center (level, level) lands exactly on p
        atoms[:, level, 0] = 0.5 * (p[:, 0] + p[:, 1])
        atoms[:, level, 1] = 0.5 * (p[:, 1] - p[:, 0])
    return atoms, int(min(dead.size, worst.size))


def train_group(points, n_levels, em, rng):
    """EM for the atoms of one group at one residual round.

    Args:
        points: ``(n, 2g)`` residual sub-vectors of the group.

    Returns:
        ``(atoms, history)`` with atoms ``(g, N', 2)`` and a dict holding
        the soft and hard objective traces (sum of squared errors).
    """
    n = points.shape[0]
    n_cc = n_levels * n_levels
    threshold = 1e-6 * n / n_cc
    atoms = _init_atoms(points, n_levels, rng)
    p0 = np.ascontiguousarray(points[:, 0::2])
    p1 = np.ascontiguousarray(points[:, 1::2])
    history = {"soft": [], "hard": [], "temperature": [], "repairs": 0}

    temp = em.t0
    for k in range(em.soft_iters):
        d = group_sq_distances(points, atoms, em.search)
        if temp is None:
            temp = float(np.median(d))
            if temp <= 0:
                temp = 1.0
        t_k = temp * em.decay ** k
        w = soft_weights(d, t_k)
        history["soft"].append(float(np.sum(w * d)))
        history["temperature"].append(t_k)
        wsum = w.sum(axis=0).reshape(n_levels, n_levels)
        s0 = (w.T @ p0).reshape(n_levels, n_levels, -1)
        s1 = (w.T @ p1).reshape(n_levels, n_levels, -1)
        atoms = solve_atoms(wsum, s0, s1, em.ridge)
        usage = wsum.sum(axis=0) + wsum.sum(axis=1)
        atoms, fixed = _repair_dead(atoms, usage, points, d.min(axis=1), threshold)
        history["repairs"] += fixed

    prev = None
    for _ in range(em.hard_iters_max):
        assign = _assign(points, atoms, em.search)
        err = _hard_error(points, atoms, assign)
        obj = float(err.sum())
        history["hard"].append(obj)
        if prev is not None and prev - obj <= em.tol * prev:
            break
        prev = obj
        flat = assign[:, 0] * n_levels + assign[:, 1]
        wsum = np.bincount(flat, minlength=n_cc).astype(np.float64).reshape(n_levels, n_levels)
        s0 = _scatter_sum(flat, p0, n_cc).reshape(n_levels, n_levels, -1)
        s1 = _scatter_sum(flat, p1, n_cc).reshape(n_levels, n_levels, -1)
        atoms = solve_atoms(wsum, s0, s1, em.ridge)
        usage = wsum.sum(axis=0) + wsum.sum(axis=1)
        atoms, fixed = _repair_dead(atoms, usage, points, err, threshold)
        history["repairs"] += fixed
    else:
        assign = _assign(points, atoms, em.search)
        history["hard"].append(float(_hard_error(points, atoms, assign).sum()))
    return atoms, history


def _scatter_sum(idx, values, n_bins):
    out = np.zeros((n_bins, values.shape[1]))
    np.add.at(out, idx, values)
    return out


def train_key_codebook(calib_keys, config, em=None, return_history=False):
    """Fit all residual rounds of a key codebook on pre-RoPE keys.

    Each round runs annealed soft EM followed by hard EM, independently per
    group, then moves on to the residual left after encoding with that
    round's atoms. With ``em.n_init > 1`` every group is trained from that
    many random starts and the lowest final objective is kept.
    """
    em = em or EmConfig()
    X = check_array(calib_keys, dtype=np.float64)
    if X.shape[1] != config.d:
        raise ValueError(f"calibration width {X.shape[1]} != d={config.d}")
    if X.shape[0] < config.n_levels ** 2:
        raise ValueError(
            f"need at least n_levels**2={config.n_levels ** 2} calibration rows, got {X.shape[0]}"
        )
    if not np.any(X):
        raise TrainingError("calibration set is all zeros", diagnostics={"n": X.shape[0]})

    rng = np.random.default_rng(em.seed)
    g = config.group_size
    atoms = np.zeros((config.rounds, config.n_sub, config.n_levels, 2))
    residual = X.copy()
    history = []
    for r in range(config.rounds):
        round_hist = []
        for grp in range(config.n_groups):
            cols = slice(2 * g * grp, 2 * g * (grp + 1))
            pts = residual[:, cols]
            a, h = None, None
            for _ in range(em.n_init):
                a_try, h_try = train_group(pts, config.n_levels, em, rng)
                if h is None or h_try["hard"][-1] < h["hard"][-1]:
                    a, h = a_try, h_try
            atoms[r, g * grp:g * (grp + 1)] = a
            assign = _assign(pts, a, em.search)
            centers = center_table(a).reshape(config.n_levels ** 2, -1)
            residual[:, cols] = pts - centers[assign[:, 0] * config.n_levels + assign[:, 1]]
            round_hist.append(h)
        mse_r = float(np.mean(residual ** 2))
        logger.info("round %d/%d residual mse %.6g", r + 1, config.rounds, mse_r)
        history.append({"groups": round_hist, "mse": mse_r})
    cb = KeyCodebook(config, atoms)
    if return_history:
        return cb, history
    return cb


def encode_keys(K, codebook, method="factorized"):
    """Residual nearest-center encoding; returns ``(N, R, G, 2)`` int codes."""
    cfg = codebook.config
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] != cfg.d:
        raise ValueError(f"keys must have shape (N, {cfg.d}), got {K.shape}")
    n = K.shape[0]
    g = cfg.group_size
    codes = np.empty((n, cfg.rounds, cfg.n_groups, 2), dtype=np.int64)
    residual = K.copy()
    for r in range(cfg.rounds):
        for grp in range(cfg.n_groups):
            cols = slice(2 * g * grp, 2 * g * (grp + 1))
            a = codebook.group_atoms(r, grp)
            assign = _assign(residual[:, cols], a, method)
            codes[:, r, grp] = assign
            centers = codebook.centers(r, grp)
            residual[:, cols] -= centers[assign[:, 0] * cfg.n_levels + assign[:, 1]]
    return codes


def check_key_codes(codes, config):
    codes = np.asarray(codes)
    expected = (config.rounds, config.n_groups, 2)
    if codes.ndim != 4 or codes.shape[1:] != expected:
        raise CorruptCodeError(f"key codes must have shape (N, {expected}), got {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() >= config.n_levels):
        raise CorruptCodeError("key code index out of range")
    return codes.astype(np.int64, copy=False)


def decode_keys(codes, codebook):
    """Sum of selected centers over rounds; output is pre-RoPE."""
    cfg = codebook.config
    codes = check_key_codes(codes, cfg)
    n = codes.shape[0]
    g = cfg.group_size
    out = np.zeros((n, cfg.d))
    for r in range(cfg.rounds):
        for grp in range(cfg.n_groups):
            atoms = codebook.group_atoms(r, grp)
            x, y = atoms[..., 0], atoms[..., 1]  # (g, N')
            a = codes[:, r, grp, 0]
            b = codes[:, r, grp, 1]
            cols = slice(2 * g * grp, 2 * g * (grp + 1))
            blk = out[:, cols]
            blk[:, 0::2] += x[:, a].T - y[:, b].T
            blk[:, 1::2] += y[:, a].T + x[:, b].T
    return out


def avg_bit_key(config):
    return config.rounds * math.log2(config.n_levels) / config.group_size


def key_codebook_bytes(n_levels, rounds, d):
    """16-bit-equivalent storage, counting all four entries of each atom."""
    return 2 * 2 * n_levels * rounds * (d // 2) * 2


class CommutativeKeyQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the commutative key codebook.

    ``transform`` returns integer codes ``(N, rounds, n_groups, 2)`` and
    ``inverse_transform`` decodes them back to pre-RoPE keys.

    Parameters
    ----------
    group_size, n_levels, n_rounds : int
        Grouping ``g``, levels per subspace and residual rounds.
    soft_iters, hard_iters_max, t0, decay, tol, ridge, search, n_init :
        EM schedule, see :class:`EmConfig`.
    random_state : int
        Seed for atom initialization.
    """

    def __init__(
        self,
        group_size=64,
        n_levels=64,
        n_rounds=11,
        soft_iters=30,
        hard_iters_max=100,
        t0=None,
        decay=0.9,
        tol=1e-6,
        ridge=None,
        search="factorized",
        n_init=1,
        random_state=0,
    ):
        self.group_size = group_size
        self.n_levels = n_levels
        self.n_rounds = n_rounds
        self.soft_iters = soft_iters
        self.hard_iters_max = hard_iters_max
        self.t0 = t0
        self.decay = decay
        self.tol = tol
        self.ridge = ridge
        self.search = search
        self.n_init = n_init
        self.random_state = random_state

    def _em_config(self):
        return EmConfig(
            soft_iters=self.soft_iters,
            hard_iters_max=self.hard_iters_max,
            t0=self.t0,
            decay=self.decay,
            tol=self.tol,
            ridge=self.ridge,
            seed=int(self.random_state or 0),
            search=self.search,
            n_init=self.n_init,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        config = KeyQuantConfig(X.shape[1], self.group_size, self.n_levels, self.n_rounds)
        self.codebook_, self.history_ = train_key_codebook(
            X, config, self._em_config(), return_history=True
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        X = check_array(X, dtype=np.float64)
        return encode_keys(X, self.codebook_, self.search)

    def inverse_transform(self, codes):
        check_is_fitted(self, "codebook_")
        return decode_keys(codes, self.codebook_)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Negative reconstruction MSE."""
        X = check_array(X, dtype=np.float64)
        return -float(np.mean((X - self.reconstruct(X)) ** 2))

    @property
    def avg_bit(self):
        check_is_fitted(self, "codebook_")
        return avg_bit_key(self.codebook_.config)
