"""Per-pixel material probability maps and fully-connected CRF refinement."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_unit_interval
from .exceptions import ImageTooLarge, InvalidUnary
from .materials import N_CLASSES, UNKNOWN

MAX_CRF_PIXELS = 16384
PALETTE_LIMIT = 32      # max distinct guide colours for the per-colour message path
PMAP_MAGIC = b"PMAP"
_PMAP_HEADER = struct.Struct("<4sIII")


@dataclass
class ProbabilityMap:
    """``(H, W, 23)`` class probabilities with a validity mask.

    Invalid pixels carry all-zero vectors.
    """

    probs: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.probs.ndim != 3 or self.probs.shape[:2] != self.valid.shape:
            raise ValueError(f"probs {self.probs.shape} incompatible with mask {self.valid.shape}")

    @property
    def shape(self):
        return self.valid.shape

    @property
    def n_classes(self):
        return self.probs.shape[2]

    def check(self, tol: float = 1e-6) -> ProbabilityMap:
        """Raise InvalidUnary unless valid rows are finite, non-negative and sum to 1."""
        p = self.probs[self.valid]
        if not np.all(np.isfinite(p)):
            raise InvalidUnary("probability map contains non-finite values")
        if np.any(p < 0):
            raise InvalidUnary("probability map contains negative entries")
        if p.size and np.max(np.abs(p.sum(axis=1) - 1.0)) > tol:
            raise InvalidUnary("probability vectors do not sum to 1")
        return self


@dataclass
class SegmenterNoise:
    confusion_prob: float = 0.0
    leak_concentration: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confusion_prob < 1.0:
            raise ValueError("confusion_prob must lie in [0, 1)")
        if not 1 <= self.leak_concentration <= N_CLASSES - 1:
            raise ValueError(f"leak_concentration must lie in [1, {N_CLASSES - 1}]")


def _label_mask(true_labels, valid):
    labels = np.asarray(true_labels)
    mask = labels != UNKNOWN
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if np.any(labels[mask] >= N_CLASSES) or np.any(labels[mask] < 0):
        raise ValueError("labels must be material ids or 255")
    return labels.astype(np.intp), mask


def _wrong_class(true, idx):
    """Map an index in [0, 22) to a class id different from ``true``."""
    return idx + (idx >= true)


def oracle_segment(true_labels, noise: SegmenterNoise | None = None, valid=None) -> ProbabilityMap:
    """Ground-truth segmenter leaking ``confusion_prob`` onto random distractors.

    Each pixel gets ``1 - confusion_prob`` on its true class and the rest
    split evenly over ``leak_concentration`` distinct wrong classes drawn from
    ``noise.seed``. Pixels labelled 255 (or masked by ``valid``) are invalid.
    """
    noise = noise or SegmenterNoise()
    labels, mask = _label_mask(true_labels, valid)
    probs = np.zeros(labels.shape + (N_CLASSES,))
    true = labels[mask]
    rows = np.zeros((len(true), N_CLASSES))
    rows[np.arange(len(true)), true] = 1.0 - noise.confusion_prob
    if noise.confusion_prob > 0:
        rng = np.random.default_rng(noise.seed)
        keys = rng.random((len(true), N_CLASSES - 1))
        pick = np.argsort(keys, axis=1)[:, :noise.leak_concentration]
        cls = _wrong_class(true[:, None], pick)
        np.put_along_axis(rows, cls, noise.confusion_prob / noise.leak_concentration, axis=1)
    probs[mask] = rows
    return ProbabilityMap(probs, mask)


def flip_segment(true_labels, flip_prob: float, seed: int = 0, valid=None,
                 peak: float = 0.8) -> ProbabilityMap:
    """Segmenter with hard errors.

    With probability ``flip_prob`` a pixel's modal class is replaced by a
    uniformly drawn wrong class. The modal class gets ``peak`` and the other
    22 classes share ``1 - peak`` evenly.
    """
    check_unit_interval(flip_prob, "flip_prob")
    labels, mask = _label_mask(true_labels, valid)
    true = labels[mask]
    rng = np.random.default_rng(seed)
    flip = rng.random(len(true)) < flip_prob
    wrong = _wrong_class(true, rng.integers(0, N_CLASSES - 1, len(true)))
    modal = np.where(flip, wrong, true)
    rows = np.full((len(true), N_CLASSES), (1.0 - peak) / (N_CLASSES - 1))
    rows[np.arange(len(true)), modal] = peak
    probs = np.zeros(labels.shape + (N_CLASSES,))
    probs[mask] = rows
    return ProbabilityMap(probs, mask)


def argmax_labels(prob: ProbabilityMap) -> np.ndarray:
    """Per-pixel argmax as uint8, lowest class id on ties, 255 where invalid."""
    out = np.argmax(prob.probs, axis=-1).astype(np.uint8)
    out[~prob.valid] = UNKNOWN
    return out


# ----------------------------------------------------------------------------
# dense CRF


@dataclass
class CrfParams:
    w_appearance: float = 10.0
    w_smooth: float = 3.0
    theta_alpha: float = 60.0
    theta_beta: float = 20.0
    theta_gamma: float = 3.0
    iterations: int = 5

    def __post_init__(self):
        if self.w_appearance < 0 or self.w_smooth < 0:
            raise ValueError("CRF weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("CRF bandwidths must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self):
        return dict(self.__dict__)


def _gauss_matrix(n, theta):
    x = np.arange(n, dtype=float)
    return np.exp(-((x[:, None] - x[None, :]) ** 2) / (2.0 * theta ** 2))


class PairwiseKernel:
    """Message operator ``m_i = sum_{j != i} k(i, j) q_j`` over valid pixels.

    Two exact evaluation strategies:

    * ``"fast"``: the spatial Gaussians are separable on the pixel grid, so the
      smoothness term is ``Gy @ Q @ Gx``. The appearance kernel factorizes the
      same way once pixels are grouped by guide colour, which is exact when
      the guide has few distinct colours (flat-shaded synthetic frames).
    * ``"brute"``: explicit kernel rows, chunked. O(N^2); used as the oracle
      and for guides with many colours.
    """

    def __init__(self, valid, guide, params: CrfParams, method: str = "auto", chunk: int = 1024):
        self.valid = np.asarray(valid, dtype=bool)
        self.guide = np.asarray(guide, dtype=float)
        self.params = params
        self.chunk = chunk
        h, w = self.valid.shape
        colors = self.guide[self.valid]
        if method == "auto":
            n_colors = len(np.unique(colors, axis=0)) if len(colors) else 0
            method = "fast" if n_colors <= PALETTE_LIMIT else "brute"
        if method not in ("fast", "brute"):
            raise ValueError(f"unknown method {method!r}")
        self.method = method
        if method == "fast":
            self._gy = [_gauss_matrix(h, params.theta_gamma), _gauss_matrix(h, params.theta_alpha)]
            self._gx = [_gauss_matrix(w, params.theta_gamma), _gauss_matrix(w, params.theta_alpha)]
            palette, inv = np.unique(colors, axis=0, return_inverse=True)
            idx = np.full((h, w), -1)
            idx[self.valid] = inv.ravel()
            self._masks = [idx == c for c in range(len(palette))]
            d2 = ((self.guide[:, :, None, :] - palette[None, None]) ** 2).sum(-1)
            self._color_w = np.exp(-d2 / (2.0 * params.theta_beta ** 2))   # (h, w, K)
        else:
            r, c = np.nonzero(self.valid)
            self._pos = np.column_stack([r, c]).astype(float)
            self._col = colors

    def _blur(self, q, level):
        h, w, n = q.shape
        t = np.ascontiguousarray(q.transpose(0, 2, 1)).reshape(h * n, w) @ self._gx[level]
        t = self._gy[level] @ t.reshape(h, n * w)
        return t.reshape(h, n, w).transpose(0, 2, 1)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        """Messages for a ``(H, W, L)`` field (zero at invalid pixels)."""
        p = self.params
        q = np.where(self.valid[..., None], q, 0.0)
        if self.method == "fast":
            out = np.zeros_like(q)
            if p.w_smooth:
                out += p.w_smooth * self._blur(q, 0)
            if p.w_appearance:
                for c, m in enumerate(self._masks):
                    out += p.w_appearance * self._color_w[:, :, c, None] * self._blur(q * m[..., None], 1)
            out -= (p.w_smooth + p.w_appearance) * q
        else:
            flat = q[self.valid]
            msg = np.zeros_like(flat)
            pos, col = self._pos, self._col
            for s in range(0, len(flat), self.chunk):
                e = min(s + self.chunk, len(flat))
                dp = ((pos[s:e, None, :] - pos[None, :, :]) ** 2).sum(-1)
                dc = ((col[s:e, None, :] - col[None, :, :]) ** 2).sum(-1)
                k = (p.w_appearance * np.exp(-dp / (2 * p.theta_alpha ** 2) - dc / (2 * p.theta_beta ** 2))
                     + p.w_smooth * np.exp(-dp / (2 * p.theta_gamma ** 2)))
                k[np.arange(e - s), np.arange(s, e)] = 0.0
                msg[s:e] = k @ flat
            out = np.zeros_like(q)
            out[self.valid] = msg
        out[~self.valid] = 0.0
        return out


def _normalized(unary: ProbabilityMap) -> np.ndarray:
    q = np.where(unary.valid[..., None], unary.probs, 0.0)
    s = q.sum(-1, keepdims=True)
    return q / np.where(s > 0, s, 1.0)


def _log_unary(q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(q)


def _softmax(logits, valid):
    m = np.max(logits, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)
    out[~valid] = 0.0
    return out


def _free_energy(q, log_u, kernel_sum, msg):
    """Mean-field free energy ``<E>_Q - H(Q)`` given messages for ``q``."""
    pos = q > 0
    unary = -np.sum(q * np.where(pos, log_u, 0.0))
    entropy = -np.sum(np.where(pos, q * np.log(np.where(pos, q, 1.0)), 0.0))
    pair = 0.5 * (kernel_sum - np.sum(q * msg))
    return float(unary + pair - entropy)


def crf_free_energy(q: np.ndarray, unary: ProbabilityMap, kernel: PairwiseKernel) -> float:
    ones = np.zeros(q.shape[:2] + (1,))
    ones[unary.valid] = 1.0
    kernel_sum = float(np.sum(kernel(ones)))
    return _free_energy(q, _log_unary(_normalized(unary)), kernel_sum, kernel(q))


def _check_crf_inputs(unary: ProbabilityMap, guide):
    guide = np.asarray(guide, dtype=float)
    h, w = unary.shape
    if guide.shape[:2] != (h, w):
        raise ValueError(f"guide {guide.shape} does not match unary {unary.shape}")
    if h * w > MAX_CRF_PIXELS:
        raise ImageTooLarge(f"{h}x{w} = {h * w} px exceeds the {MAX_CRF_PIXELS} px limit")
    unary.check()
    if guide.ndim == 2:
        guide = guide[..., None]
    return guide


def dense_crf_refine(unary: ProbabilityMap, guide, params: CrfParams | None = None,
                     method: str = "auto", callback=None, return_history: bool = False):
    """Mean-field inference for a fully-connected Potts CRF.

    ``guide`` holds per-pixel colours (same units as ``theta_beta``, e.g.
    0..255). Each iteration computes the parallel mean-field update and moves
    towards it with a backtracking step so the free energy never increases;
    fixed points are those of plain mean field. ``callback(it, q)`` is called
    after every iteration. With ``return_history`` the free energy after
    initialization and after each iteration is also returned.
    """
    params = params or CrfParams()
    guide = _check_crf_inputs(unary, guide)
    valid = unary.valid
    q = _normalized(unary)
    history = []
    if params.iterations and (params.w_appearance or params.w_smooth) and valid.any():
        kernel = PairwiseKernel(valid, guide, params, method)
        log_u = _log_unary(q)
        ones = valid[..., None].astype(float)
        kernel_sum = float(np.sum(kernel(ones)))
        msg = kernel(q)
        f = _free_energy(q, log_u, kernel_sum, msg)
        history.append(f)
        for it in range(params.iterations):
            target = _softmax(log_u + msg, valid)
            step = 1.0
            while step > 1e-9:
                cand = q + step * (target - q)
                cand_msg = kernel(cand)
                cand_f = _free_energy(cand, log_u, kernel_sum, cand_msg)
                if cand_f <= f:
                    q, msg, f = cand, cand_msg, cand_f
                    break
                step *= 0.5
            history.append(f)
            if callback is not None:
                callback(it, q)
    elif callback is not None:
        for it in range(params.iterations):
            callback(it, q)
    out = ProbabilityMap(q, valid.copy())
    return (out, history) if return_history else out


def mean_field_update(q: np.ndarray, unary: ProbabilityMap, kernel: PairwiseKernel) -> np.ndarray:
    """One undamped parallel mean-field update (used to check fixed points)."""
    return _softmax(_log_unary(_normalized(unary)) + kernel(q), unary.valid)


class DenseCRF(BaseEstimator, TransformerMixin):
    """Estimator wrapper around ``dense_crf_refine``.

    ``transform`` takes ``(unary, guide)`` pairs, or a list of them.
    """

    def __init__(self, w_appearance=10.0, w_smooth=3.0, theta_alpha=60.0, theta_beta=20.0,
                 theta_gamma=3.0, iterations=5):
        self.w_appearance = w_appearance
        self.w_smooth = w_smooth
        self.theta_alpha = theta_alpha
        self.theta_beta = theta_beta
        self.theta_gamma = theta_gamma
        self.iterations = iterations

    def fit(self, X=None, y=None):
        self.params_ = CrfParams(**self.get_params())
        return self

    def transform(self, X):
        params = getattr(self, "params_", None) or CrfParams(**self.get_params())
        if isinstance(X, tuple):
            return dense_crf_refine(X[0], X[1], params)
        return [dense_crf_refine(u, g, params) for u, g in X]


# ----------------------------------------------------------------------------
# file formats


def save_probability_map(prob: ProbabilityMap, path):
    h, w = prob.shape
    data = np.where(prob.valid[..., None], prob.probs, 0.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_PMAP_HEADER.pack(PMAP_MAGIC, w, h, prob.n_classes))
        fh.write(data.tobytes())


def load_probability_map(path) -> ProbabilityMap:
    """Invalid pixels are stored as all-zero vectors and come back invalid."""
    raw = Path(path).read_bytes()
    if len(raw) < _PMAP_HEADER.size:
        raise ValueError(f"{path}: truncated probability map")
    magic, w, h, c = _PMAP_HEADER.unpack_from(raw)
    if magic != PMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if c != N_CLASSES:
        raise ValueError(f"{path}: expected {N_CLASSES} classes, got {c}")
    n = w * h * c
    if len(raw) != _PMAP_HEADER.size + 4 * n:
        raise ValueError(f"{path}: size does not match {w}x{h}x{c}")
    probs = np.frombuffer(raw, "<f4", n, _PMAP_HEADER.size).reshape(h, w, c).astype(float)
    return ProbabilityMap(probs, probs.sum(-1) > 0)


def save_label_pgm(labels: np.ndarray, path):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label grid must be 2-D")
    ok = (labels < N_CLASSES) | (labels == UNKNOWN)
    if np.any(~ok) or np.any(labels < 0):
        raise ValueError("labels must be material ids or 255")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(labels.astype(np.uint8).tobytes())


def load_label_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(data, np.uint8).reshape(h, w).copy()
