"""Ordinal survival negative log-likelihood with Gaussian smoothing.

For a day with event index t*, the plain ordinal loss is

    L = - sum_{t < t*} log S(t)  -  log(1 - S(t*)).

Gaussian survival smoothing (GSS) re-weights the per-step terms with a
normalized Gaussian centered on t*, so steps far before the event count
less. On top of that, the failure term is scaled by omega_e and whole
weekend/holiday sequences by omega_w. Probabilities are clamped to
[eps, 1-eps] before any log.
"""

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ConfigError, UsageError
from .numkit import Tensor

DAY_TYPES = ("weekday", "weekend", "holiday")


@dataclass
class LossConfig:
    sigma: float = 2.0
    omega_e: float = 1.5
    omega_w: float = 1.5
    use_gss: bool = True
    eps_clamp: float = 1e-7

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.omega_e <= 0.0 or self.omega_w <= 0.0:
            raise ConfigError("omega_e and omega_w must be positive")
        if not 0.0 < self.eps_clamp < 0.01:
            raise ConfigError(f"eps_clamp must be in (0, 0.01), got {self.eps_clamp}")


@dataclass
class SequenceLabel:
    """Event index t* plus the day type that decides the omega_w weight."""
    event_index: int
    day_type: str

    def __post_init__(self):
        if self.day_type not in DAY_TYPES:
            raise ConfigError(f"day_type must be one of {DAY_TYPES}, got {self.day_type!r}")
        if self.event_index < 0:
            raise ConfigError(f"event_index must be >= 0, got {self.event_index}")

    @property
    def weekendish(self) -> bool:
        return self.day_type in ("weekend", "holiday")


def gss_weights(t_star: int, sigma: float) -> np.ndarray:
    """Normalized Gaussian weights over t = 0..t*, centered on t*.

    w(t) = exp(-(t - t*)^2 / (2 sigma^2)) / sum_{tau <= t*} exp(...).
    Sums to 1 for every t*; t* = 0 gives the single weight 1.
    """
    if sigma <= 0.0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if t_star < 0:
        raise UsageError(f"t_star must be >= 0, got {t_star}")
    d = np.arange(t_star + 1, dtype=np.float64) - t_star
    w = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return w / w.sum()


def per_step_terms(s_hat: np.ndarray, t_star: int, omega_e: float = 1.5,
                   eps_clamp: float = 1e-7) -> np.ndarray:
    """Unweighted per-step loss vector: -log S before t*, the omega_e-scaled
    failure term at t*, zero after."""
    s = np.clip(np.asarray(s_hat, dtype=np.float64), eps_clamp, 1.0 - eps_clamp)
    t_total = s.shape[-1]
    if not 0 <= t_star < t_total:
        raise UsageError(f"t_star {t_star} outside curve of length {t_total}")
    terms = np.zeros(t_total)
    terms[:t_star] = -np.log(s[:t_star])
    terms[t_star] = -omega_e * np.log(1.0 - s[t_star])
    return terms


def _as_tensor(s_hat) -> Tensor:
    return s_hat if isinstance(s_hat, Tensor) else Tensor(s_hat)


def _weighted_nll(s_hat: Tensor, t_star: int, weights: np.ndarray,
                  omega_e: float, day_weight: float, eps_clamp: float) -> Tensor:
    t_total = s_hat.shape[-1]
    if not 0 <= t_star < t_total:
        raise UsageError(f"t_star {t_star} outside curve of length {t_total}")
    coef_surv = np.zeros(t_total)
    coef_surv[:t_star] = weights[:t_star]
    coef_fail = np.zeros(t_total)
    coef_fail[t_star] = weights[t_star] * omega_e
    s = nk.clip(s_hat, eps_clamp, 1.0 - eps_clamp)
    loss = nk.sum(nk.mul(coef_surv, nk.neg(nk.log(s)))) \
        + nk.sum(nk.mul(coef_fail, nk.neg(nk.log(1.0 - s))))
    if day_weight != 1.0:
        loss = nk.mul(loss, day_weight)
    return loss


def ordinal_loss(s_hat, t_star: int, eps_clamp: float = 1e-7) -> Tensor:
    """Plain ordinal NLL for one curve; differentiable scalar."""
    s_hat = _as_tensor(s_hat)
    weights = np.ones(t_star + 1)
    return _weighted_nll(s_hat, t_star, weights, 1.0, 1.0, eps_clamp)


def sequence_loss(s_hat, label: SequenceLabel, cfg: LossConfig) -> Tensor:
    """Weighted loss for one day: GSS weights, omega_e on the failure term,
    omega_w on weekend/holiday sequences.

    With omega_e = omega_w = 1 and use_gss off this reduces bit-for-bit to
    ordinal_loss: the weight vector is all ones and the scalar rescales
    are skipped or multiply by 1.0.
    """
    s_hat = _as_tensor(s_hat)
    if cfg.use_gss:
        weights = gss_weights(label.event_index, cfg.sigma)
    else:
        weights = np.ones(label.event_index + 1)
    day_weight = cfg.omega_w if label.weekendish else 1.0
    return _weighted_nll(s_hat, label.event_index, weights,
                         cfg.omega_e, day_weight, cfg.eps_clamp)


def batch_loss(curves, labels, cfg: LossConfig) -> Tensor:
    """Mean of sequence losses over the batch; differentiable scalar.

    Averaging is over sequences, so each day contributes equally no
    matter where its event falls.
    """
    curves = _as_tensor(curves)
    if curves.ndim != 2:
        raise UsageError(f"curves must be (batch, T), got shape {curves.shape}")
    if len(labels) != curves.shape[0]:
        raise UsageError(f"{curves.shape[0]} curves but {len(labels)} labels")
    total = None
    for i, label in enumerate(labels):
        one = sequence_loss(curves[i], label, cfg)
        total = one if total is None else total + one
    return nk.mul(total, 1.0 / len(labels))
