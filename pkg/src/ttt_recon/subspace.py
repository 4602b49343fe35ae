"""Provable subspace-denoising example with closed-form optima.

Signals live in a d-dimensional subspace with orthonormal basis U; the train
distribution P adds Gaussian noise of variance sigma2, the test distribution
Q of variance varsigma2. The linear denoiser alpha * V V^T y admits closed
forms for the population risk, the supervised minimizer W = E[x y^T]
(E[y y^T])^-1 = U U^T / (1 + sigma2), and the per-instance minimizer of the
bias-corrected self-supervised loss, whose expectation is minimized at
alpha = 1 / (1 + varsigma2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateError, RankError
from .rng import derive_rng


@dataclass(frozen=True)
class SubspaceModel:
    n: int
    d: int
    U: np.ndarray  # (n, d) orthonormal columns
    sigma2: float  # train noise variance
    varsigma2: float  # test noise variance
    seed: int

    def __post_init__(self):
        if not 1 <= self.d < self.n:
            raise ContractError(f"need 1 <= d < n, got d={self.d}, n={self.n}")
        gram = self.U.T @ self.U
        if np.abs(gram - np.eye(self.d)).max() > 1e-10:
            raise ContractError("U columns are not orthonormal to 1e-10")


def make_model(n: int, d: int, sigma2: float, varsigma2: float, seed: int) -> SubspaceModel:
    """Random orthonormal basis via QR of a Gaussian matrix (rotation invariant)."""
    rng = derive_rng(seed, "subspace-basis")
    g = rng.standard_normal((n, d))
    q, _ = np.linalg.qr(g)
    return SubspaceModel(n=n, d=d, U=q[:, :d], sigma2=float(sigma2), varsigma2=float(varsigma2), seed=int(seed))


def sample(model: SubspaceModel, dist: str, count: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw (x, y) pairs, rows are instances: x = U c, y = x + noise.

    dist "P" uses sigma2, "Q" uses varsigma2. Deterministic in
    (model.seed, dist, stream).
    """
    if dist not in ("P", "Q"):
        raise ContractError(f"dist must be 'P' or 'Q', got {dist!r}")
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    var = model.sigma2 if dist == "P" else model.varsigma2
    rng = derive_rng(model.seed, "subspace-sample", dist, stream)
    c = rng.standard_normal((count, model.d))
    x = c @ model.U.T
    y = x + np.sqrt(var) * rng.standard_normal((count, model.n))
    return x, y


def risk(alpha: float, V: np.ndarray, model: SubspaceModel, noise_var: float) -> float:
    """Population risk E||x - alpha V V^T y||^2 in closed form.

    Equals d - (2 alpha - alpha^2) tr(V V^T U U^T) + alpha^2 noise_var d for
    any orthonormal V (derived by trace algebra; validated against Monte
    Carlo in the test suite).
    """
    V = np.asarray(V, dtype=np.float64)
    if V.shape != (model.n, model.d):
        raise ContractError(f"V must be {model.n}x{model.d}, got {V.shape}")
    if np.abs(V.T @ V - np.eye(model.d)).max() > 1e-8:
        raise ContractError("V columns are not orthonormal to 1e-8")
    overlap = float(np.sum((model.U.T @ V) ** 2))  # tr(V V^T U U^T)
    a = float(alpha)
    return model.d - (2 * a - a * a) * overlap + a * a * noise_var * model.d


def supervised_fit(model: SubspaceModel, n_samples: int, chunk: int = 20000) -> tuple[float, np.ndarray]:
    """Fit the linear map W from samples of P; extract the shrinkage alpha.

    W_hat solves the least-squares denoising problem via the sample second
    moments, using the pseudo-inverse (exact in the noiseless rank-d case);
    alpha_hat = tr(W_hat U U^T) / d.
    """
    n = model.n
    sxy = np.zeros((n, n))
    syy = np.zeros((n, n))
    done = 0
    stream = 0
    while done < n_samples:
        take = min(chunk, n_samples - done)
        x, y = sample(model, "P", take, stream=stream)
        sxy += x.T @ y
        syy += y.T @ y
        done += take
        stream += 1
    sxy /= n_samples
    syy /= n_samples
    rank = np.linalg.matrix_rank(syy, tol=1e-10 * n)
    if rank < model.d:
        raise RankError(f"sample covariance rank {rank} < subspace dimension {model.d}")
    w_hat = sxy @ np.linalg.pinv(syy, rcond=1e-10)
    alpha_hat = float(np.trace(w_hat @ model.U @ model.U.T) / model.d)
    return alpha_hat, w_hat


def lss(alpha: float, U: np.ndarray, y: np.ndarray) -> float | np.ndarray:
    """Bias-corrected self-supervised loss.

    ||y - alpha U U^T y||^2 + (2 alpha d / (n - d)) ||(I - U U^T) y||^2,
    evaluated over the last axis (vectorized over leading axes).
    """
    U = np.asarray(U, dtype=np.float64)
    n, d = U.shape
    if n <= d:
        raise ContractError(f"need d < n, got U of shape {U.shape}")
    y = np.asarray(y, dtype=np.float64)
    proj = (y @ U) @ U.T
    resid = y - proj
    p2 = (proj * proj).sum(axis=-1)
    r2 = (resid * resid).sum(axis=-1)
    a = float(alpha)
    # ||y - a P y||^2 = ||(1 - a) P y||^2 + ||(I - P) y||^2
    out = (1 - a) ** 2 * p2 + r2 + (2 * a * d / (n - d)) * r2
    return float(out) if out.ndim == 0 else out


def _split_energies(U: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, int, int]:
    U = np.asarray(U, dtype=np.float64)
    n, d = U.shape
    y = np.asarray(y, dtype=np.float64)
    proj = (y @ U) @ U.T
    resid = y - proj
    p2 = (proj * proj).sum(axis=-1)
    r2 = (resid * resid).sum(axis=-1)
    return p2, r2, n, d


def ttt_alpha(U: np.ndarray, y: np.ndarray) -> float | np.ndarray:
    """Per-instance minimizer of lss over alpha.

    alpha* = (||P y||^2 - (d/(n-d)) ||(I-P) y||^2) / ||P y||^2 with
    P = U U^T; the stationary point of the quadratic loss.
    """
    p2, r2, n, d = _split_energies(U, y)
    if np.any(p2 <= 1e-15 * (p2 + r2)):
        raise DegenerateError("ttt_alpha needs nonzero projected energy")
    out = (p2 - (d / (n - d)) * r2) / p2
    return float(out) if out.ndim == 0 else out


def ttt_alpha_pooled(U: np.ndarray, ys: np.ndarray) -> float:
    """Minimizer of the draw-averaged lss over a batch of observations.

    As the batch grows the averaged loss converges to its expectation, so
    this converges to 1 / (1 + noise variance); the mean of the per-instance
    ttt_alpha carries a finite-d inverse-chi-square bias and does not.
    """
    p2, r2, n, d = _split_energies(U, np.atleast_2d(ys))
    tp, tr = float(p2.sum()), float(r2.sum())
    if tp <= 1e-15 * (tp + tr):
        raise DegenerateError("ttt_alpha_pooled needs nonzero projected energy")
    return (tp - (d / (n - d)) * tr) / tp


def expected_lss(alpha: float, model: SubspaceModel) -> float:
    """E_Q[lss] closed form: varsigma2 n + (1-alpha)^2 d + alpha^2 varsigma2 d."""
    a = float(alpha)
    return model.varsigma2 * model.n + (1 - a) ** 2 * model.d + a * a * model.varsigma2 * model.d
