"""Per-pair noise probability from a two-component Gaussian mixture over ITC losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel

VAR_FLOOR = 1e-8
DEGENERATE_GAP = 1e-6


@dataclass(frozen=True)
class Gmm2:
    weight: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    log_likelihood_trace: list[float] = field(default_factory=list)
    degenerate: bool = False

    @property
    def noisy_component(self) -> int:
        return int(np.argmax(self.mean))

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """(N, 2) array of log w_k + log N(x | mu_k, var_k)."""
        x = np.asarray(x, dtype=np.float64)[:, None]
        return np.log(self.weight) - 0.5 * (
            np.log(2.0 * np.pi * self.var) + (x - self.mean) ** 2 / self.var
        )

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        lj = self.log_joint(x)
        m = lj.max(axis=1, keepdims=True)
        e = np.exp(lj - m)
        return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class NoiseEstimate:
    epsilon: np.ndarray
    omega: np.ndarray
    lam: float
    omega_max: float


def fit_gmm2(losses, tol: float = 1e-10, max_iter: int = 500) -> Gmm2:
    """EM fit started from the lower/upper halves of the sorted losses."""
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    if x.size < 4:
        raise ValueError("too few samples")
    if not np.isfinite(x).all():
        raise ValueError("non-finite loss values")
    s = np.sort(x)
    lo, hi = s[: x.size // 2], s[x.size // 2 :]
    mu0 = np.array([lo.mean(), hi.mean()])
    var0 = np.maximum([lo.var(), hi.var()], VAR_FLOOR)
    w, mu, var, trace = _accel.gmm2_em(x, [0.5, 0.5], mu0, var0, tol, max_iter, VAR_FLOOR)
    return Gmm2(
        weight=np.asarray(w),
        mean=np.asarray(mu),
        var=np.asarray(var),
        log_likelihood_trace=[float(v) for v in trace],
        degenerate=bool(abs(mu[0] - mu[1]) < DEGENERATE_GAP),
    )


def noise_posterior(gmm: Gmm2, losses) -> np.ndarray:
    """Responsibility of the higher-mean component; all zeros for a degenerate fit."""
    x = np.asarray(losses, dtype=np.float64).reshape(-1)
    if gmm.degenerate:
        return np.zeros_like(x)
    return gmm.responsibilities(x)[:, gmm.noisy_component]


def smoothing_rates(epsilon, lam: float, omega_max: float = 0.9) -> np.ndarray:
    if not 0.0 < omega_max < 1.0:
        raise ValueError("omega_max must lie in (0, 1)")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return np.minimum(lam * np.asarray(epsilon, dtype=np.float64), omega_max)


def estimate_noise(losses, lam: float = 0.5, omega_max: float = 0.9) -> tuple[Gmm2, NoiseEstimate]:
    gmm = fit_gmm2(losses)
    eps = noise_posterior(gmm, losses)
    return gmm, NoiseEstimate(eps, smoothing_rates(eps, lam, omega_max), lam, omega_max)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise ValueError("roc_auc needs both classes present")
    return _accel.mann_whitney_auc(scores, labels)
