"""Online and offline event detection plus attribution.

Detection is threshold-crossing: the predicted event slot is the first t
with S(t) < p. A streaming session re-encodes the observed prefix on
every push; with causal attention the prefix curve matches the full
forward (up to float noise), so streaming and offline detection land on
the same index. When nothing crosses by the end of the grid the
prediction falls back to the last slot.

Attribution uses integrated gradients along the straight path from a
baseline to the observed context, right-endpoint Riemann approximation.
"""

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M
from . import numkit as nk
from .errors import ConfigError, UsageError
from .numkit import Tensor


@dataclass
class SurvivalCurve:
    """Per-interval survival estimates for one (possibly prefix) sequence."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise UsageError(f"curve must be 1-d, got shape {self.values.shape}")


@dataclass
class DetectionResult:
    predicted_index: int
    true_index: int
    signed_error_hours: float
    abs_error_hours: float


def _check_threshold(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {p}")


def detect_offline(curve, p: float):
    """First index with S(t) < p, or None if the curve never crosses."""
    _check_threshold(p)
    values = curve.values if isinstance(curve, SurvivalCurve) else \
        np.asarray(curve, dtype=np.float64)
    if values.ndim != 1:
        raise UsageError(f"curve must be 1-d, got shape {values.shape}")
    below = values < p
    if not below.any():
        return None
    return int(np.argmax(below))


def predict_curve(params: M.ModelParams, seq) -> SurvivalCurve:
    """Full-day survival curve for one sequence, eval mode."""
    batch = M.TokenBatch.from_sequences([seq])
    return SurvivalCurve(M.forward(batch, params).data[0])


def finalize(result, t_star: int, t_max: int = D.T_MAX) -> DetectionResult:
    """Fold a detection (index, None, or finished session) into errors.

    No detection falls back to predicting the last slot of the grid.
    Signed error is (predicted - true) in hours; negative means early.
    """
    if isinstance(result, StreamSession):
        if result.state == "open":
            raise UsageError("finalize on a session that is still open")
        predicted = result.detected_index
    else:
        predicted = result
    if predicted is None:
        predicted = t_max
    if not 0 <= t_star <= t_max:
        raise UsageError(f"t_star {t_star} outside [0, {t_max}]")
    signed = (predicted - t_star) * D.SLOT_MINUTES / 60.0
    return DetectionResult(predicted_index=int(predicted), true_index=int(t_star),
                           signed_error_hours=signed, abs_error_hours=abs(signed))


class StreamSession:
    """Incremental detection over one day.

    Tokens arrive one slot at a time; each push re-encodes the whole
    observed prefix (no state caching) and checks the newest estimate
    against the threshold. The session moves open -> detected on a
    crossing, or open -> exhausted after the grid's last slot.
    """

    def __init__(self, params: M.ModelParams, threshold: float = 0.1,
                 day_type: str = "weekday", norm_stats=None):
        _check_threshold(threshold)
        if day_type not in D._DOW_ONEHOT:
            raise ConfigError(f"unknown day_type {day_type!r}")
        self.params = params
        self.threshold = threshold
        self.day_type = day_type
        self.norm_stats = norm_stats
        cfg = params.config
        self._context = np.zeros((cfg.seq_len, cfg.input_dim))
        self._abs_time = np.zeros((cfg.seq_len, M.TIME_DIM))
        self._dow = np.tile(D._DOW_ONEHOT[day_type], (cfg.seq_len, 1))
        self._n = 0
        self.curve = np.zeros(0)
        self.state = "open"
        self.detected_index = None

    @property
    def steps_observed(self) -> int:
        return self._n

    def push(self, context_row, abs_time_row):
        """Feed one slot; returns (prefix curve, detected index or None)."""
        if self.state != "open":
            raise UsageError(f"push on a session in state {self.state!r}")
        row = np.asarray(context_row, dtype=np.float64)
        if row.shape != (self.params.config.input_dim,):
            raise UsageError(f"context row must have {self.params.config.input_dim} features")
        if self.norm_stats is not None:
            row = (row - self.norm_stats.mean) / self.norm_stats.std
        t = self._n
        self._context[t] = row
        self._abs_time[t] = np.asarray(abs_time_row, dtype=np.float64)
        self._n += 1
        batch = M.TokenBatch(context=self._context[None, :self._n],
                             dow=self._dow[None, :self._n],
                             abs_time=self._abs_time[None, :self._n])
        self.curve = M.forward(batch, self.params).data[0]
        if self.curve[t] < self.threshold:
            self.state = "detected"
            self.detected_index = t
        elif self._n == self.params.config.seq_len:
            self.state = "exhausted"
        return self.curve, self.detected_index

    def run(self, seq) -> "StreamSession":
        """Replay a full DaySequence until detection or exhaustion."""
        for t in range(seq.context.shape[0]):
            self.push(seq.context[t], seq.abs_time[t])
            if self.state != "open":
                break
        return self


def integrated_gradients(value_and_grad, x: np.ndarray, baseline: np.ndarray,
                         steps: int = 50) -> np.ndarray:
    """Right-endpoint Riemann IG along baseline -> x.

    IG_j = (x_j - b_j) * (1/m) * sum_{k=1..m} dF/dx_j at b + (k/m)(x - b).
    `value_and_grad(point) -> (F(point), grad ndarray like x)`.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise UsageError(f"x {x.shape} and baseline {baseline.shape} differ in shape")
    if steps < 2:
        raise UsageError(f"integrated_gradients needs steps >= 2, got {steps}")
    diff = x - baseline
    acc = np.zeros_like(x)
    for k in range(1, steps + 1):
        point = baseline + (k / steps) * diff
        _, grad = value_and_grad(point)
        acc += grad
    return diff * acc / steps


def make_survival_target(params: M.ModelParams, seq, position: int):
    """value_and_grad over the context matrix for S(position) of one day."""
    t_total = seq.context.shape[0]
    if not 0 <= position < t_total:
        raise UsageError(f"position {position} outside sequence of length {t_total}")
    dow = np.tile(np.asarray(seq.dow_onehot, dtype=np.float64), (t_total, 1))

    def value_and_grad(context_arr):
        ctx = Tensor(np.asarray(context_arr, dtype=np.float64)[None], requires_grad=True)
        curves = M.forward_tensors(ctx, Tensor(dow[None]), Tensor(seq.abs_time[None]),
                                   None, params)
        target = curves[0, position]
        nk.backward(target)
        return target.item(), ctx.grad[0]

    return value_and_grad


def attribution_report(params: M.ModelParams, seq, detected_t: int,
                       top_k: int = 10, steps: int = 50, baseline=None) -> dict:
    """Per-feature IG rankings at the detection step and the one before.

    Attributions are computed over the context matrix against an all-zero
    baseline (day type and clock features stay fixed), summed over time
    positions, and ranked by magnitude. Scores keep their sign; negative
    means the feature pushed survival down.
    """
    if baseline is None:
        baseline = np.zeros_like(seq.context)
    out = {}
    positions = {"t": detected_t}
    if detected_t >= 1:
        positions["t_minus_1"] = detected_t - 1
    for key, pos in positions.items():
        ig = integrated_gradients(make_survival_target(params, seq, pos),
                                  seq.context, baseline, steps)
        per_feature = ig.sum(axis=0)
        order = np.argsort(-np.abs(per_feature))[:top_k]
        out[key] = {
            "position": int(pos),
            "clock": D.index_to_clock(pos),
            "features": [{"feature": int(j), "score": float(per_feature[j])}
                         for j in order],
        }
    if "t_minus_1" not in out:
        out["t_minus_1"] = None
    return out
