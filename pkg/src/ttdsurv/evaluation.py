"""Detection quality metrics and the historical regression baseline.

MAE is reported in hours over all days and split into weekday and
weekend buckets; holidays count as weekend days. The baseline is a ridge
least-squares fit on the 19 historical features of the prior week,
predicting the departure hour directly. Distribution plots come from a
Gaussian KDE with Silverman's rule-of-thumb bandwidth.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M
from .errors import UsageError
from .infer import DetectionResult, detect_offline, finalize


def mae_hours(results, day_types):
    """(all, weekday, weekend) MAE in hours; empty buckets give None."""
    if len(results) != len(day_types):
        raise UsageError(f"{len(results)} results but {len(day_types)} day types")
    abs_errors = np.array([r.abs_error_hours for r in results])
    weekendish = np.array([t != "weekday" for t in day_types], dtype=bool)

    def bucket(mask):
        return float(abs_errors[mask].mean()) if mask.any() else None

    all_mask = np.ones(len(results), dtype=bool)
    return bucket(all_mask), bucket(~weekendish), bucket(weekendish)


@dataclass
class MLRBaseline:
    """Linear predictor over the 19 historical features, hour-valued."""
    weights: np.ndarray
    intercept: float
    ridge_eps: float = 1e-6


def fit_mlr(features: np.ndarray, targets: np.ndarray,
            ridge_eps: float = 1e-6) -> MLRBaseline:
    """Normal-equation least squares with a tiny ridge on the weights.

    The intercept is unpenalized, so constant targets are recovered
    exactly no matter what the features look like.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise UsageError(f"features {x.shape} and targets {y.shape} do not align")
    if x.shape[0] == 0:
        raise UsageError("fit_mlr needs at least one row")
    n, d = x.shape
    a = np.zeros((d + 1, d + 1))
    a[:d, :d] = x.T @ x + ridge_eps * np.eye(d)
    a[:d, d] = x.sum(axis=0)
    a[d, :d] = x.sum(axis=0)
    a[d, d] = n
    b = np.concatenate([x.T @ y, [y.sum()]])
    sol = np.linalg.solve(a, b)
    return MLRBaseline(weights=sol[:d], intercept=float(sol[d]), ridge_eps=ridge_eps)


def predict_mlr(baseline: MLRBaseline, features) -> float:
    """Predicted departure hour, clamped to the grid's hour range."""
    x = np.asarray(features, dtype=np.float64)
    raw = float(x @ baseline.weights + baseline.intercept)
    return min(max(raw, D.GRID_START_HOUR), D.index_to_hour(D.T_MAX))


def _history_rows(user_seqs):
    """(features, target_seq) pairs for days with seven recorded prior days."""
    rows = []
    for i in range(7, len(user_seqs)):
        window = user_seqs[i - 7:i]
        history = [(s.event_hour, s.day_type) for s in window]
        feats = D.historical_features(history, user_seqs[i].day_type)
        rows.append((feats, user_seqs[i]))
    return rows


def build_mlr_training(sequences):
    """Stack baseline training rows from every user in `sequences`."""
    by_user = {}
    for s in sequences:
        by_user.setdefault(s.user_id, []).append(s)
    feats, targets = [], []
    for user in sorted(by_user):
        seqs = sorted(by_user[user], key=lambda s: s.date)
        for f, seq in _history_rows(seqs):
            feats.append(f)
            targets.append(seq.event_hour)
    if not feats:
        raise UsageError("no training rows: every user needs more than 7 days")
    return np.stack(feats), np.array(targets)


def kde(samples, bandwidth=None, grid=None):
    """Gaussian KDE on an hour grid; Silverman bandwidth by default.

    Returns (grid, density). Needs at least two distinct samples.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.size < 2:
        raise UsageError(f"kde needs at least 2 samples, got {s.size}")
    if bandwidth is None:
        sd = s.std(ddof=1)
        if sd == 0.0:
            raise UsageError("kde bandwidth is degenerate: all samples identical")
        bandwidth = 1.06 * sd * s.size ** (-1.0 / 5.0)
    if bandwidth <= 0.0:
        raise UsageError(f"bandwidth must be positive, got {bandwidth}")
    if grid is None:
        grid = np.round(np.arange(0, 241) * 0.1, 1)
    z = (grid[:, None] - s[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (s.size * bandwidth * np.sqrt(2 * np.pi))
    return grid, dens


@dataclass
class EvalReport:
    threshold: float
    predictor: str
    n_all: int
    n_weekday: int
    n_weekend: int
    mae_all: float
    mae_weekday: float
    mae_weekend: float
    mean_signed_error_hours: float
    per_sequence: list
    kde_arrays: dict = None

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "predictor": self.predictor,
            "n": {"all": self.n_all, "weekday": self.n_weekday, "weekend": self.n_weekend},
            "mae_hours": {"all": self.mae_all, "weekday": self.mae_weekday,
                          "weekend": self.mae_weekend},
            "mean_signed_error_hours": self.mean_signed_error_hours,
            "per_sequence": self.per_sequence,
            "kde": self.kde_arrays,
        }


def _report_from_rows(rows, threshold, predictor, include_kde):
    results = [r["result"] for r in rows]
    day_types = [r["seq"].day_type for r in rows]
    m_all, m_wd, m_we = mae_hours(results, day_types)
    weekendish = [t != "weekday" for t in day_types]
    per_sequence = [{
        "user_id": r["seq"].user_id,
        "date": r["seq"].date,
        "day_type": r["seq"].day_type,
        "predicted_index": r["result"].predicted_index,
        "true_index": r["result"].true_index,
        "signed_error_hours": r["result"].signed_error_hours,
        "abs_error_hours": r["result"].abs_error_hours,
    } for r in rows]
    kde_arrays = None
    if include_kde:
        pred_hours = [D.index_to_hour(r["result"].predicted_index) for r in rows]
        true_hours = [D.index_to_hour(r["result"].true_index) for r in rows]
        grid, pd_ = kde(pred_hours)
        _, td_ = kde(true_hours)
        kde_arrays = {"hours": grid.tolist(), "predicted": pd_.tolist(),
                      "true": td_.tolist()}
    signed = float(np.mean([r.signed_error_hours for r in results]))
    return EvalReport(
        threshold=threshold, predictor=predictor,
        n_all=len(rows), n_weekday=int(np.sum(~np.array(weekendish))),
        n_weekend=int(np.sum(weekendish)),
        mae_all=m_all, mae_weekday=m_wd, mae_weekend=m_we,
        mean_signed_error_hours=signed,
        per_sequence=per_sequence, kde_arrays=kde_arrays,
    )


def _eval_model(params, sequences, p, include_kde, min_history, batch_size=64):
    for s in sequences:
        if not s.normalized:
            raise UsageError(
                f"sequence {s.user_id}/{s.date} is not normalized; models are "
                "trained on z-scored context")
    by_user = {}
    for s in sequences:
        by_user.setdefault(s.user_id, []).append(s)
    eligible = []
    for user in sorted(by_user):
        seqs = sorted(by_user[user], key=lambda s: s.date)
        eligible.extend(seqs[min_history:])
    rows = []
    for start in range(0, len(eligible), batch_size):
        chunk = eligible[start:start + batch_size]
        curves = M.forward(M.TokenBatch.from_sequences(chunk), params).data
        for seq, curve in zip(chunk, curves):
            detected = detect_offline(curve, p)
            rows.append({"seq": seq, "result": finalize(detected, seq.event_index)})
    return _report_from_rows(rows, p, "model", include_kde)


def _eval_mlr(baseline, sequences, p, include_kde):
    by_user = {}
    for s in sequences:
        by_user.setdefault(s.user_id, []).append(s)
    rows = []
    for user in sorted(by_user):
        seqs = sorted(by_user[user], key=lambda s: s.date)
        for feats, seq in _history_rows(seqs):
            hour = predict_mlr(baseline, feats)
            pred_index = D.clamp_hour_to_index(hour)
            rows.append({"seq": seq, "result": finalize(pred_index, seq.event_index)})
    if not rows:
        raise UsageError("no evaluable days: every user needs more than 7 days")
    return _report_from_rows(rows, p, "mlr", include_kde)


def evaluate(predictor, sequences, p: float = 0.1, include_kde: bool = False,
             min_history: int = 0) -> EvalReport:
    """Detection metrics for a model (ModelParams) or an MLRBaseline.

    The baseline needs seven prior days per prediction, so it only emits
    rows from each user's eighth day on; pass min_history=7 to hold the
    model to the same day set.
    """
    if not sequences:
        raise UsageError("evaluate needs at least one sequence")
    if isinstance(predictor, M.ModelParams):
        return _eval_model(predictor, sequences, p, include_kde, min_history)
    if isinstance(predictor, MLRBaseline):
        return _eval_mlr(predictor, sequences, p, include_kde)
    raise UsageError(f"cannot evaluate predictor of type {type(predictor).__name__}")


def emit_report(report: EvalReport, path, fmt: str = "json") -> None:
    """Write a report as pretty JSON or a per-day CSV."""
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(report.to_json_dict(), fh, indent=2)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user_id", "date", "day_type", "predicted_index",
                             "true_index", "signed_error_hours", "abs_error_hours"])
            for row in report.per_sequence:
                writer.writerow([row["user_id"], row["date"], row["day_type"],
                                 row["predicted_index"], row["true_index"],
                                 repr(row["signed_error_hours"]),
                                 repr(row["abs_error_hours"])])
    else:
        raise UsageError(f"unknown report format {fmt!r}")


def emit_kde_csv(report: EvalReport, path) -> None:
    if not report.kde_arrays:
        raise UsageError("report has no KDE arrays; evaluate with include_kde=True")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "predicted_density", "true_density"])
        k = report.kde_arrays
        for h, pd_, td_ in zip(k["hours"], k["predicted"], k["true"]):
            writer.writerow([h, repr(pd_), repr(td_)])
