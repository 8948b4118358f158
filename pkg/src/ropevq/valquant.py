"""Additive quantization of value vectors.

A token vector ``t`` is encoded into ``n_codes`` bits by a two-layer
network and decoded as the sum of the codebook rows whose bit is set,
``t_hat = s @ C``. Training is plain numpy with hand-written gradients:
bits are sampled with a two-class Gumbel-softmax per bit, passed forward
hard, and differentiated through the relaxed probability.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import CorruptCodeError, TrainingError

logger = logging.getLogger(__name__)


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ValueCodebook:
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        rows = _frozen(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("codebook rows must be a non-empty 2-D array")
        if not np.all(np.isfinite(rows)):
            raise ValueError("codebook rows must be finite")
        object.__setattr__(self, "rows", rows)

    @property
    def n_codes(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]


@dataclass(frozen=True)
class ValueEncoder:
    w1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    b2: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            arr = _frozen(getattr(self, name))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"encoder parameter {name} is not finite")
            object.__setattr__(self, name, arr)
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape[0] != h or self.b2.shape != (self.w2.shape[1],):
            raise ValueError("inconsistent encoder parameter shapes")

    @property
    def d(self):
        return self.w1.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[1]

    @property
    def n_codes(self):
        return self.w2.shape[1]

    @classmethod
    def init(cls, d, n_codes, hidden=None, rng=None):
        rng = np.random.default_rng(rng)
        h = 2 * n_codes if hidden is None else hidden
        return cls(
            w1=rng.standard_normal((d, h)) * np.sqrt(2.0 / d),
            b1=np.zeros(h),
            w2=rng.standard_normal((h, n_codes)) * np.sqrt(1.0 / h),
            b2=np.zeros(n_codes),
        )


@dataclass(frozen=True)
class ValTrainConfig:
    steps: int = 10_000
    batch: int = 256
    step_size: float = 1e-3
    gumbel_t_start: float = 1.0
    gumbel_t_end: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    hidden: int | None = None

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (self.gumbel_t_start > 0 and self.gumbel_t_end > 0):
            raise ValueError("temperatures must be positive")
        if self.gumbel_t_start < self.gumbel_t_end:
            raise ValueError("gumbel_t_start must be >= gumbel_t_end")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logits(t, enc):
    pre = t @ enc.w1 + enc.b1
    hid = np.maximum(pre, 0.0)
    return pre, hid, hid @ enc.w2 + enc.b2


def encoder_forward(t, enc, mode="infer", temperature=1.0, seed=None):
    """Encode one vector (or a batch of rows) into bits.

    Returns ``(bits, soft)``. In ``"train"`` mode each bit is a hard sample
    of a two-class Gumbel-softmax over ``(logit, 0)`` and ``soft`` is the
    relaxed probability; in ``"infer"`` mode ``bits = logit > 0`` and
    ``soft = sigmoid(logit / temperature)``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = np.asarray(t, dtype=np.float64)
    single = t.ndim == 1
    t2 = np.atleast_2d(t)
    if t2.shape[1] != enc.d:
        raise ValueError(f"expected width {enc.d}, got {t2.shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        _, _, logits = _logits(t2, enc)
    if not np.all(np.isfinite(logits)):
        raise TrainingError("non-finite encoder activations")
    if mode == "infer":
        bits = (logits > 0).astype(np.uint8)
        soft = _sigmoid(logits / temperature)
    elif mode == "train":
        rng = np.random.default_rng(seed)
        z = logits + _logistic_noise(rng, logits.shape)
        bits = (z > 0).astype(np.uint8)
        soft = _sigmoid(z / temperature)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if single:
        return bits[0], soft[0]
    return bits, soft


def _logistic_noise(rng, shape):
    # difference of two standard Gumbels
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return np.log(u) - np.log1p(-u)


def check_value_codes(S, n_codes):
    S = np.asarray(S)
    if S.ndim == 1:
        S = S[None, :]
    if S.ndim != 2 or S.shape[1] != n_codes:
        raise CorruptCodeError(f"value codes must have width {n_codes}, got shape {S.shape}")
    if S.size and not np.all((S == 0) | (S == 1)):
        raise CorruptCodeError("value codes must be binary")
    return S


def decode_values(S, cb):
    """``S @ C`` for a binary code matrix ``S``."""
    S = np.asarray(S)
    if S.ndim not in (1, 2) or S.shape[-1] != cb.n_codes:
        raise ValueError(f"code width {S.shape[-1]} != n_codes={cb.n_codes}")
    single = S.ndim == 1
    S = check_value_codes(S, cb.n_codes)
    out = S.astype(np.float64) @ cb.rows
    return out[0] if single else out


def greedy_encode(t, cb, return_trace=False):
    """Matching-pursuit encoder over binary codes.

    Repeatedly switches on the unused row that lowers the residual norm the
    most, stopping once no row helps. Deterministic; ties go to the lowest
    row index.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (cb.d,):
        raise ValueError(f"expected vector of length {cb.d}")
    C = cb.rows
    norms = np.einsum("ij,ij->i", C, C)
    bits = np.zeros(cb.n_codes, dtype=np.uint8)
    r = t.copy()
    trace = [float(r @ r)]
    while True:
        gain = 2.0 * (C @ r) - norms
        gain[bits == 1] = -np.inf
        j = int(np.argmax(gain))
        if not gain[j] > 0:
            break
        bits[j] = 1
        r -= C[j]
        trace.append(float(r @ r))
    if return_trace:
        return bits, trace
    return bits


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def _loss_and_grads(params, t, noise, temperature, train_codebook):
    pre = t @ params["w1"] + params["b1"]
    hid = np.maximum(pre, 0.0)
    logits = hid @ params["w2"] + params["b2"]
    z = logits + noise
    bits = (z > 0).astype(np.float64)
    p = _sigmoid(z / temperature)
    C = params["C"]
    resid = t - bits @ C
    n_el = resid.size
    loss = float(np.sum(resid * resid) / n_el)

    g_recon = (-2.0 / n_el) * resid
    g_bits = g_recon @ C.T
    # straight-through: d bits / d logits := d p / d logits
    g_logit = g_bits * p * (1.0 - p) / temperature
    g_hid = g_logit @ params["w2"].T
    g_pre = g_hid * (pre > 0)
    grads = {
        "w2": hid.T @ g_logit,
        "b2": g_logit.sum(axis=0),
        "w1": t.T @ g_pre,
        "b1": g_pre.sum(axis=0),
    }
    if train_codebook:
        grads["C"] = bits.T @ g_recon
    return loss, grads


def init_value_codebook(calib, n_codes, rng):
    idx = rng.choice(calib.shape[0], size=n_codes, replace=calib.shape[0] < n_codes)
    return calib[idx] * (2.0 / n_codes)


def train_value_quantizer(calib, n_codes, cfg=None, codebook=None, freeze_codebook=False):
    """Jointly fit the encoder and codebook by minibatch gradient descent.

    Args:
        calib: ``(N, d)`` calibration vectors.
        n_codes: code length ``N_c``.
        cfg: :class:`ValTrainConfig`.
        codebook: optional initial codebook rows ``(n_codes, d)``.
        freeze_codebook: keep ``codebook`` fixed and train only the encoder.

    Returns:
        ``(encoder, codebook, losses)`` where ``losses`` is the per-step
        training MSE.

    Raises:
        TrainingError: the loss became non-finite. ``diagnostics`` holds the
            step and the last finite encoder/codebook.
    """
    cfg = cfg or ValTrainConfig()
    X = check_array(calib, dtype=np.float64)
    n, d = X.shape
    if n < cfg.batch:
        raise ValueError(f"need at least batch={cfg.batch} calibration rows, got {n}")
    if freeze_codebook and codebook is None:
        raise ValueError("freeze_codebook requires an explicit codebook")
    rng = np.random.default_rng(cfg.seed)
    enc = ValueEncoder.init(d, n_codes, cfg.hidden, rng)
    C = init_value_codebook(X, n_codes, rng) if codebook is None else np.array(codebook, dtype=np.float64)
    if C.shape != (n_codes, d):
        raise ValueError(f"codebook must have shape ({n_codes}, {d})")
    params = {"w1": enc.w1.copy(), "b1": enc.b1.copy(), "w2": enc.w2.copy(),
              "b2": enc.b2.copy(), "C": C}
    opt = _Adam(cfg.step_size) if cfg.optimizer == "adam" else _Sgd(cfg.step_size)

    losses = np.empty(cfg.steps)
    last_good = {k: v.copy() for k, v in params.items()}
    for step in range(cfg.steps):
        frac = step / max(cfg.steps - 1, 1)
        temp = cfg.gumbel_t_start + (cfg.gumbel_t_end - cfg.gumbel_t_start) * frac
        idx = rng.integers(0, n, size=cfg.batch)
        noise = _logistic_noise(rng, (cfg.batch, n_codes))
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = _loss_and_grads(params, X[idx], noise, temp, not freeze_codebook)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(
                "value quantizer training diverged",
                diagnostics={
                    "step": step,
                    "encoder": ValueEncoder(last_good["w1"], last_good["b1"],
                                            last_good["w2"], last_good["b2"]),
                    "codebook": ValueCodebook(last_good["C"]),
                },
            )
        losses[step] = loss
        if step % 500 == 0:
            last_good = {k: v.copy() for k, v in params.items()}
            logger.debug("step %d loss %.6g temp %.3f", step, loss, temp)
        opt.step(params, grads)

    enc = ValueEncoder(params["w1"], params["b1"], params["w2"], params["b2"])
    return enc, ValueCodebook(params["C"]), losses


def avg_bit_value(n_codes, d):
    if n_codes <= 0 or d <= 0:
        raise ValueError("n_codes and d must be positive")
    return n_codes / d


def value_codebook_bytes(n_codes, d):
    """16-bit-equivalent storage of the value codebook."""
    return n_codes * d * 2


class AdditiveValueQuantizer(TransformerMixin, BaseEstimator):
    """Learned binary-code encoder plus additive codebook for value vectors.

    ``transform`` returns ``(N, n_codes)`` uint8 bit matrices,
    ``inverse_transform`` multiplies them back through the codebook.

    Parameters
    ----------
    n_codes : int or None
        Code length; ``None`` means one bit per dimension (``n_codes = d``).
    hidden : int or None
        Encoder hidden width; ``None`` means ``2 * n_codes``.
    """

    def __init__(
        self,
        n_codes=None,
        hidden=None,
        steps=10_000,
        batch_size=256,
        learning_rate=1e-3,
        optimizer="adam",
        gumbel_t_start=1.0,
        gumbel_t_end=0.1,
        random_state=0,
    ):
        self.n_codes = n_codes
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.gumbel_t_start = gumbel_t_start
        self.gumbel_t_end = gumbel_t_end
        self.random_state = random_state

    def _train_config(self):
        return ValTrainConfig(
            steps=self.steps,
            batch=self.batch_size,
            step_size=self.learning_rate,
            gumbel_t_start=self.gumbel_t_start,
            gumbel_t_end=self.gumbel_t_end,
            seed=int(self.random_state or 0),
            optimizer=self.optimizer,
            hidden=self.hidden,
        )

    def fit(self, X, y=None, codebook=None, freeze_codebook=False):
        X = check_array(X, dtype=np.float64)
        n_codes = X.shape[1] if self.n_codes is None else self.n_codes
        cfg = self._train_config()
        if X.shape[0] < cfg.batch:
            cfg = replace(cfg, batch=X.shape[0])
        self.encoder_, self.codebook_, self.loss_curve_ = train_value_quantizer(
            X, n_codes, cfg, codebook=codebook, freeze_codebook=freeze_codebook
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        bits, _ = encoder_forward(X, self.encoder_, mode="infer")
        return bits

    def inverse_transform(self, S):
        check_is_fitted(self, "codebook_")
        return decode_values(S, self.codebook_)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Negative reconstruction MSE."""
        X = check_array(X, dtype=np.float64)
        return -float(np.mean((X - self.reconstruct(X)) ** 2))

    @property
    def avg_bit(self):
        check_is_fitted(self, "codebook_")
        return avg_bit_value(self.codebook_.n_codes, self.codebook_.d)
