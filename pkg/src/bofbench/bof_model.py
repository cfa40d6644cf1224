"""Bag-of-frames model: diagonal-covariance GMM fitted by EM, compared by KL divergence."""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import logsumexp

from bofbench.errors import DataError
from bofbench.features import FeatureSequence

logger = logging.getLogger(__name__)

DEFAULT_COMPONENTS = 50
DEFAULT_MC_SAMPLES = 2000
VARIANCE_FLOOR_REL = 1e-4
VARIANCE_FLOOR_ABS = 1e-8
EMPTY_MASS = 1e-10
KMEANS_ITERS = 10
MAX_EM_ITERS = 200
EM_TOL = 1e-5

_LOG2PI = math.log(2.0 * math.pi)
_CHUNK = 2048
_MAGIC = b"BOFGMM"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Diagonal-covariance Gaussian mixture.

    Components are stored in a canonical order (lexicographic on means, then
    variances, then weights), so any relabeling of the same mixture yields an
    identical object and identical downstream numbers.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    seed: int = 0
    n_iter: int = 0
    loglik: float = float("nan")
    converged: bool = False
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64, ndmin=2)
        var = np.array(self.variances, dtype=np.float64, ndmin=2)
        if mu.ndim != 2 or mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}")
        if w.shape[0] < 1:
            raise ValueError("a mixture needs at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var)) and np.all(var > 0)):
            raise ValueError("means must be finite and variances finite and positive")
        keys = np.column_stack([mu, var, w])
        order = np.lexsort(keys.T[::-1])
        for name, arr in (("weights", w[order]), ("means", mu[order]), ("variances", var[order])):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "history", tuple(float(h) for h in self.history))

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.weights, self.means, self.variances):
            h.update(arr.astype("<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        header = _MAGIC + struct.pack(
            "<HQQqQdBQ",
            _VERSION,
            self.d,
            self.n_components,
            self.seed,
            self.n_iter,
            self.loglik,
            int(self.converged),
            len(self.history),
        )
        body = b"".join(
            np.asarray(a, dtype="<f8").tobytes()
            for a in (self.weights, self.means, self.variances, np.asarray(self.history, dtype=np.float64))
        )
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> GmmModel:
        head = len(_MAGIC) + struct.calcsize("<HQQqQdBQ")
        if raw[: len(_MAGIC)] != _MAGIC or len(raw) < head:
            raise DataError("not a serialized GMM")
        version, d, m, seed, n_iter, ll, conv, nh = struct.unpack("<HQQqQdBQ", raw[len(_MAGIC) : head])
        if version != _VERSION:
            raise DataError(f"unsupported GMM format version {version}")
        vals = np.frombuffer(raw[head:], dtype="<f8")
        if vals.size != m + 2 * m * d + nh:
            raise DataError("GMM payload size does not match header")
        w = vals[:m]
        mu = vals[m : m + m * d].reshape(m, d)
        var = vals[m + m * d : m + 2 * m * d].reshape(m, d)
        hist = tuple(vals[m + 2 * m * d :])
        return cls(w, mu, var, seed, n_iter, ll, bool(conv), hist)


@dataclass(frozen=True)
class DistanceConfig:
    method: Literal["monte_carlo", "marginalization", "euclidean_mean"] = "monte_carlo"
    mc_samples: int = DEFAULT_MC_SAMPLES
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in ("monte_carlo", "marginalization", "euclidean_mean"):
            raise ValueError(f"unknown distance method {self.method!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


def _component_logpdf(X, means, variances):
    """(N, M) log N(x_n; mu_m, diag(var_m))."""
    n, d = X.shape
    log_norm = -0.5 * (d * _LOG2PI + np.sum(np.log(variances), axis=1))
    inv = 1.0 / variances
    out = np.empty((n, means.shape[0]))
    for s in range(0, n, _CHUNK):
        diff = X[s : s + _CHUNK, None, :] - means[None, :, :]
        out[s : s + _CHUNK] = log_norm - 0.5 * np.einsum("nmd,md->nm", diff * diff, inv)
    return out


def _component_logpdf_fast(X, means, variances):
    """Same as ``_component_logpdf`` via matrix products; used inside EM on centered data."""
    d = X.shape[1]
    inv = 1.0 / variances
    const = -0.5 * (d * _LOG2PI + np.sum(np.log(variances), axis=1) + np.sum(means * means * inv, axis=1))
    return const - 0.5 * ((X * X) @ inv.T) + X @ (means * inv).T


def _weighted_logpdf(X, weights, means, variances, fast=False):
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    comp = _component_logpdf_fast if fast else _component_logpdf
    return logw + comp(X, means, variances)


def _as_frames(x) -> np.ndarray:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


def log_density(model: GmmModel, X) -> np.ndarray:
    """Per-frame log P(x) under the mixture."""
    X = _as_frames(X)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValueError(f"dimension mismatch: model d={model.d}, features shape {X.shape}")
    return logsumexp(_weighted_logpdf(X, model.weights, model.means, model.variances), axis=1)


def loglik(model: GmmModel, features: FeatureSequence) -> float:
    """Total log-likelihood of ``features`` under ``model``."""
    return float(np.sum(log_density(model, features)))


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def _kmeans(X, centers, iters):
    x2 = np.sum(X * X, axis=1)[:, None]
    labels = None
    for _ in range(iters + 1):
        dist = x2 - 2.0 * X @ centers.T + np.sum(centers * centers, axis=1)[None, :]
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(centers.shape[0]):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels


def _m_step(X, resp, floor, frame_ll):
    n = X.shape[0]
    nk = resp.sum(axis=0)
    empty = nk < EMPTY_MASS
    safe = np.where(empty, 1.0, nk)
    means = (resp.T @ X) / safe[:, None]
    variances = (resp.T @ (X * X)) / safe[:, None] - means * means
    variances = np.maximum(variances, floor)
    weights = nk / n
    if np.any(empty):
        # reseed dead components at the worst-explained frames with negligible mass
        worst = np.argsort(frame_ll, kind="stable")
        for slot, j in enumerate(np.flatnonzero(empty)):
            means[j] = X[worst[slot % n]]
            variances[j] = floor
            weights[j] = EMPTY_MASS / n
        weights = weights / weights.sum()
    return weights, means, variances


def fit_gmm(
    features: FeatureSequence,
    M: int = DEFAULT_COMPONENTS,
    rng_seed: int = 0,
    max_iter: int = MAX_EM_ITERS,
    tol: float = EM_TOL,
) -> GmmModel:
    """Fit a diagonal GMM by EM from a k-means++ / k-means initialization.

    Stops when the per-frame log-likelihood gains less than ``tol`` or after
    ``max_iter`` EM updates.  When there are fewer frames than components, the
    component count is reduced to the frame count.
    """
    X = _as_frames(features)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise DataError("cannot fit a GMM to an empty feature sequence")
    if not np.all(np.isfinite(X)):
        raise DataError("feature sequence contains non-finite values")
    if M < 1:
        raise ValueError("M must be >= 1")
    n, d = X.shape
    if n < M:
        logger.warning("only %d frames for %d components; reducing M to %d", n, M, n)
        M = n

    # fit in centered coordinates to limit cancellation in the variance update
    offset = X.mean(axis=0)
    Xc = X - offset
    floor = np.maximum(VARIANCE_FLOOR_REL * Xc.var(axis=0), VARIANCE_FLOOR_ABS)

    rng = np.random.default_rng(rng_seed)
    centers = _kmeans_pp(Xc, M, rng)
    labels = _kmeans(Xc, centers, KMEANS_ITERS)
    resp = np.zeros((n, M))
    resp[np.arange(n), labels] = 1.0
    frame_ll = np.zeros(n)
    weights, means, variances = _m_step(Xc, resp, floor, frame_ll)

    history = []
    converged = False
    n_iter = 0
    while True:
        logp = _weighted_logpdf(Xc, weights, means, variances, fast=True)
        frame_ll = logsumexp(logp, axis=1)
        history.append(float(frame_ll.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        if n_iter >= max_iter:
            break
        resp = np.exp(logp - frame_ll[:, None])
        weights, means, variances = _m_step(Xc, resp, floor, frame_ll)
        n_iter += 1

    return GmmModel(
        weights,
        means + offset,
        variances,
        seed=rng_seed,
        n_iter=n_iter,
        loglik=history[-1],
        converged=converged,
        history=tuple(history),
    )


def sample(model: GmmModel, n: int, rng_seed: int = 0) -> FeatureSequence:
    """Draw ``n`` points: a component from categorical(weights), then a diagonal Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    comp = rng.choice(model.n_components, size=n, p=model.weights)
    z = rng.standard_normal((n, model.d))
    return FeatureSequence(model.means[comp] + np.sqrt(model.variances[comp]) * z, source_id="sample")


def model_seed(model: GmmModel, rng_seed: int) -> int:
    """Sampling seed derived from model content, so distances do not depend on argument order."""
    digest = hashlib.sha256(model.content_hash().encode() + struct.pack("<q", rng_seed)).digest()
    return int.from_bytes(digest[:8], "little")


def _check_dims(p: GmmModel, q: GmmModel):
    if p.d != q.d:
        raise ValueError(f"dimension mismatch: {p.d} vs {q.d}")


def kl_mc(p: GmmModel, q: GmmModel, cfg: DistanceConfig = DistanceConfig()) -> float:
    """Symmetrized Monte-Carlo KL estimate KL(p||q) + KL(q||p)."""
    _check_dims(p, q)
    xp = sample(p, cfg.mc_samples, model_seed(p, cfg.rng_seed)).frames
    xq = sample(q, cfg.mc_samples, model_seed(q, cfg.rng_seed)).frames
    forward = np.mean(log_density(p, xp) - log_density(q, xp))
    backward = np.mean(log_density(q, xq) - log_density(p, xq))
    return float(forward + backward)


def kl_marginal(
    p_model: GmmModel, q_model: GmmModel, p_feats: FeatureSequence, q_feats: FeatureSequence
) -> float:
    """Cross-likelihood distance on the fitted features.

    Each model's per-frame log-likelihood on its own features minus that of
    the other model on the same features, summed over both sides.
    """
    _check_dims(p_model, q_model)
    if p_feats.d != p_model.d or q_feats.d != q_model.d:
        raise ValueError("feature dimension does not match model dimension")
    pp = loglik(p_model, p_feats) / p_feats.n_frames
    qp = loglik(q_model, p_feats) / p_feats.n_frames
    qq = loglik(q_model, q_feats) / q_feats.n_frames
    pq = loglik(p_model, q_feats) / q_feats.n_frames
    return float((pp - qp) + (qq - pq))


def mc_divergence_matrix(models: list[GmmModel], cfg: DistanceConfig = DistanceConfig()) -> np.ndarray:
    """All-pairs ``kl_mc`` with each model's sample set drawn once."""
    n = len(models)
    for m in models[1:]:
        _check_dims(models[0], m)
    half = np.zeros((n, n))
    for i, p in enumerate(models):
        xp = sample(p, cfg.mc_samples, model_seed(p, cfg.rng_seed)).frames
        own = log_density(p, xp)
        for j, q in enumerate(models):
            if i != j:
                half[i, j] = np.mean(own - log_density(q, xp))
    return half + half.T


def marginal_divergence_matrix(models: list[GmmModel], features: list[FeatureSequence]) -> np.ndarray:
    """All-pairs ``kl_marginal``."""
    n = len(models)
    if len(features) != n:
        raise ValueError("one feature sequence per model is required")
    cross = np.empty((n, n))
    for i, f in enumerate(features):
        for j, m in enumerate(models):
            cross[i, j] = loglik(m, f) / f.n_frames
    own = np.diag(cross)
    half = own[:, None] - cross
    np.fill_diagonal(half, 0.0)
    return half + half.T
