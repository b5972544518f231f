"""Day grids, synthetic corpus generation, normalization, persistence.

A day is discretized into 5-minute slots anchored at 04:00, index 0;
index 264 is 02:00 the following calendar day, so every sequence has
exactly 265 steps. Ground-truth departure events are shifted 30 minutes
(6 slots) earlier than the physical departure to give detection lead
time, floored at slot 0.

Serialized form is JSON Lines, one day per line, with exactly the keys
user_id, date, day_type, event_index, context, abs_time.
"""

import datetime
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, UsageError
from .loss import DAY_TYPES
from .model import TIME_DIM

try:
    import msgspec.json as _msj
    _encode = _msj.encode
    _decode = _msj.decode
except ImportError:  # stdlib fallback, same bytes for the same writer
    _msj = None

    def _encode(obj):
        return json.dumps(obj, separators=(",", ":")).encode()

    def _decode(blob):
        return json.loads(blob)

GRID_SLOTS = 265
SLOT_MINUTES = 5
GRID_START_HOUR = 4.0
EVENT_SHIFT_SLOTS = 6  # 30 minutes of lead time
T_MAX = GRID_SLOTS - 1

_JSONL_KEYS = ("user_id", "date", "day_type", "event_index", "context", "abs_time")


def index_to_hour(index: int) -> float:
    """Grid index -> hours since midnight of the anchor day (may exceed 24)."""
    if not 0 <= index <= T_MAX:
        raise UsageError(f"grid index {index} outside [0, {T_MAX}]")
    return GRID_START_HOUR + index * (SLOT_MINUTES / 60.0)


def hour_to_index(hour: float) -> int:
    """Hours since midnight of the anchor day -> nearest grid index."""
    idx = int(round((hour - GRID_START_HOUR) * 60.0 / SLOT_MINUTES))
    if not 0 <= idx <= T_MAX:
        raise UsageError(f"hour {hour} maps outside the grid")
    return idx


def clamp_hour_to_index(hour: float) -> int:
    """Like hour_to_index but clamps out-of-grid hours to the boundary slots."""
    idx = int(round((hour - GRID_START_HOUR) * 60.0 / SLOT_MINUTES))
    return min(max(idx, 0), T_MAX)


def index_to_clock(index: int) -> str:
    """Grid index -> wall-clock 'HH:MM', wrapping past midnight."""
    minutes = int(GRID_START_HOUR * 60) + index * SLOT_MINUTES
    return f"{(minutes // 60) % 24:02d}:{minutes % 60:02d}"


def event_index_from_departure(departure_index: int) -> int:
    """Physical departure slot -> labeled event slot, 6 slots earlier, floored."""
    if not 0 <= departure_index <= T_MAX:
        raise UsageError(f"departure index {departure_index} outside grid")
    return max(departure_index - EVENT_SHIFT_SLOTS, 0)


_ABS_TIME = None


def abs_time_features(n: int = GRID_SLOTS) -> np.ndarray:
    """(n, 2) sin/cos of the clock-time fraction of day for each slot."""
    global _ABS_TIME
    if _ABS_TIME is None:
        idx = np.arange(GRID_SLOTS, dtype=np.float64)
        hour = GRID_START_HOUR + idx * (SLOT_MINUTES / 60.0)
        frac = (hour % 24.0) / 24.0
        _ABS_TIME = np.stack([np.sin(2 * np.pi * frac), np.cos(2 * np.pi * frac)], axis=1)
        _ABS_TIME.flags.writeable = False
    return _ABS_TIME[:n]


_DOW_ONEHOT = {
    "weekday": np.array([1.0, 0.0, 0.0]),
    "weekend": np.array([0.0, 1.0, 0.0]),
    "holiday": np.array([0.0, 0.0, 1.0]),
}


@dataclass
class DaySequence:
    """One user-day: full context grid plus the labeled event slot."""
    user_id: str
    date: str
    day_type: str
    event_index: int
    context: np.ndarray   # (GRID_SLOTS, input_dim)
    abs_time: np.ndarray  # (GRID_SLOTS, TIME_DIM)
    observed_len: int = GRID_SLOTS
    normalized: bool = False

    def __post_init__(self):
        if self.day_type not in DAY_TYPES:
            raise ConfigError(f"day_type must be one of {DAY_TYPES}, got {self.day_type!r}")
        datetime.date.fromisoformat(self.date)
        self.context = np.asarray(self.context, dtype=np.float64)
        self.abs_time = np.asarray(self.abs_time, dtype=np.float64)
        if self.context.ndim != 2 or self.context.shape[0] != GRID_SLOTS:
            raise ConfigError(f"context must be ({GRID_SLOTS}, d), got {self.context.shape}")
        if self.abs_time.shape != (GRID_SLOTS, TIME_DIM):
            raise ConfigError(f"abs_time must be ({GRID_SLOTS}, {TIME_DIM})")
        if not 0 <= self.event_index <= T_MAX:
            raise ConfigError(f"event_index {self.event_index} outside [0, {T_MAX}]")

    @property
    def dow_onehot(self) -> np.ndarray:
        return _DOW_ONEHOT[self.day_type]

    @property
    def event_hour(self) -> float:
        return index_to_hour(self.event_index)

    @property
    def weekendish(self) -> bool:
        return self.day_type in ("weekend", "holiday")


@dataclass
class NormStats:
    """Per-feature z-score statistics, fitted on the train split only."""
    mean: np.ndarray
    std: np.ndarray  # effective: 1.0 where the raw std was < 1e-8
    provenance: str = "train"
    n_sequences: int = 0

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "provenance": self.provenance, "n_sequences": self.n_sequences}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64),
                   provenance=d.get("provenance", "train"),
                   n_sequences=d.get("n_sequences", 0))


@dataclass
class Dataset:
    sequences: list
    split: dict = None        # {"train": [...], "val": [...], "test": [...]}
    norm_stats: NormStats = None

    def users(self) -> list:
        return sorted({s.user_id for s in self.sequences})

    def by_user(self) -> dict:
        out = {}
        for s in self.sequences:
            out.setdefault(s.user_id, []).append(s)
        for seqs in out.values():
            seqs.sort(key=lambda s: s.date)
        return out

    def subset(self, role: str) -> list:
        if self.split is None:
            raise UsageError("dataset has no split; call split_users first")
        if role not in self.split:
            raise UsageError(f"unknown split role {role!r}")
        members = set(self.split[role])
        return [s for s in self.sequences if s.user_id in members]


@dataclass
class SyntheticConfig:
    """Commute-like synthetic corpus: per-user departure habits, weekends
    later than weekdays, a linear pre-departure ramp planted in the first
    signal_features context features, Gaussian noise elsewhere."""
    n_users: int = 25
    days_per_user: int = 42
    input_dim: int = 94
    signal_features: int = 8
    weekday_departure_mean: float = 9.0
    weekday_departure_std: float = 1.0
    weekend_departure_mean: float = 10.5
    weekend_departure_std: float = 1.25
    daily_jitter_std: float = 0.75
    ramp_window_minutes: int = 120
    ramp_height: float = 4.0
    noise_std: float = 0.5
    holiday_rate: float = 0.03
    start_date: str = "2024-01-01"
    seed: int = 42

    def __post_init__(self):
        if self.n_users < 1 or self.days_per_user < 1:
            raise ConfigError("n_users and days_per_user must be positive")
        if not 0 <= self.signal_features <= self.input_dim:
            raise ConfigError("signal_features must be in [0, input_dim]")
        lo = GRID_START_HOUR + 1.0
        hi = GRID_START_HOUR + 20.0
        for name in ("weekday_departure_mean", "weekend_departure_mean"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(f"{name}={v} outside feasible grid hours [{lo}, {hi}]")
        for name in ("weekday_departure_std", "weekend_departure_std",
                     "daily_jitter_std", "noise_std", "ramp_height"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.holiday_rate < 1.0:
            raise ConfigError("holiday_rate must be in [0, 1)")
        if self.ramp_window_minutes < SLOT_MINUTES:
            raise ConfigError("ramp_window_minutes must cover at least one slot")
        datetime.date.fromisoformat(self.start_date)


def generate_synthetic_dataset(cfg: SyntheticConfig) -> Dataset:
    """Deterministic given cfg.seed; draw order is fixed by the loops."""
    rng = np.random.default_rng(cfg.seed)
    base = abs_time_features()
    start = datetime.date.fromisoformat(cfg.start_date)
    ramp_slots = cfg.ramp_window_minutes // SLOT_MINUTES
    sequences = []
    for u in range(cfg.n_users):
        user_id = f"u{u:03d}"
        wk_mean = rng.normal(cfg.weekday_departure_mean, cfg.weekday_departure_std)
        we_mean = rng.normal(cfg.weekend_departure_mean, cfg.weekend_departure_std)
        for d in range(cfg.days_per_user):
            date = start + datetime.timedelta(days=d)
            is_holiday = rng.random() < cfg.holiday_rate
            if is_holiday:
                day_type = "holiday"
            elif date.weekday() >= 5:
                day_type = "weekend"
            else:
                day_type = "weekday"
            mean = we_mean if day_type != "weekday" else wk_mean
            dep_hour = rng.normal(mean, cfg.daily_jitter_std)
            dep_hour = min(max(dep_hour, GRID_START_HOUR + 0.5), GRID_START_HOUR + 21.5)
            dep_index = clamp_hour_to_index(dep_hour)
            context = rng.normal(0.0, cfg.noise_std, size=(GRID_SLOTS, cfg.input_dim))
            if cfg.signal_features > 0:
                w_start = dep_index - ramp_slots
                slots = np.arange(max(w_start, 0), dep_index)
                if slots.size:
                    vals = cfg.ramp_height * (slots - w_start + 1) / ramp_slots
                    context[slots, :cfg.signal_features] += vals[:, None]
            sequences.append(DaySequence(
                user_id=user_id,
                date=date.isoformat(),
                day_type=day_type,
                event_index=event_index_from_departure(dep_index),
                context=context,
                abs_time=base,
            ))
    return Dataset(sequences=sequences)


def split_users(user_ids, seed: int) -> dict:
    """Disjoint user-level split, roughly 4:1 held-out twice over.

    Test takes floor(n/5) users (at least one), validation floor of a
    fifth of the remainder (at least one), train the rest. 93 users
    give 60/15/18.
    """
    ids = sorted(set(user_ids))
    n = len(ids)
    if n < 3:
        raise UsageError(f"need at least 3 users to split, got {n}")
    n_test = max(1, n // 5)
    rest = n - n_test
    n_val = max(1, rest // 5)
    n_train = rest - n_val
    if n_train < 1:
        raise UsageError(f"cannot carve a train split from {n} users")
    perm = list(np.random.default_rng(seed).permutation(np.array(ids, dtype=object)))
    return {
        "test": sorted(perm[:n_test]),
        "val": sorted(perm[n_test:n_test + n_val]),
        "train": sorted(perm[n_test + n_val:]),
    }


def fit_normalizer(sequences) -> NormStats:
    """Per-feature mean/std over every context cell of the given sequences."""
    if not sequences:
        raise UsageError("fit_normalizer needs at least one sequence")
    d = sequences[0].context.shape[1]
    total = np.zeros(d)
    total_sq = np.zeros(d)
    n = 0
    for s in sequences:
        if s.normalized:
            raise UsageError("fit_normalizer expects raw sequences")
        total += s.context.sum(axis=0)
        total_sq += (s.context ** 2).sum(axis=0)
        n += s.context.shape[0]
    mean = total / n
    var = np.maximum(total_sq / n - mean ** 2, 0.0)
    std = np.sqrt(var)
    std = np.where(std < 1e-8, 1.0, std)
    return NormStats(mean=mean, std=std, n_sequences=len(sequences))


def apply_normalizer(seq: DaySequence, stats: NormStats) -> DaySequence:
    """Returns a z-scored copy; refuses to normalize twice."""
    if seq.normalized:
        raise UsageError(f"sequence {seq.user_id}/{seq.date} is already normalized")
    return DaySequence(
        user_id=seq.user_id, date=seq.date, day_type=seq.day_type,
        event_index=seq.event_index,
        context=(seq.context - stats.mean) / stats.std,
        abs_time=seq.abs_time, observed_len=seq.observed_len, normalized=True,
    )


def normalize_dataset(dataset: Dataset) -> Dataset:
    """Fit stats on the train split, apply to every sequence. Stats never
    see validation or test data."""
    if dataset.split is None:
        raise UsageError("normalize_dataset needs a split; call split_users first")
    if dataset.norm_stats is not None:
        raise UsageError("dataset is already normalized")
    stats = fit_normalizer(dataset.subset("train"))
    sequences = [apply_normalizer(s, stats) for s in dataset.sequences]
    return Dataset(sequences=sequences, split=dataset.split, norm_stats=stats)


def _moment_stats(values: np.ndarray) -> np.ndarray:
    """[mean, std, min, max, excess kurtosis, skewness]; zeros when empty,
    zero spread stats when degenerate."""
    if values.size == 0:
        return np.zeros(6)
    mean = values.mean()
    if values.size < 2:
        return np.array([mean, 0.0, values.min(), values.max(), 0.0, 0.0])
    centered = values - mean
    m2 = np.mean(centered ** 2)
    std = math.sqrt(m2)
    if m2 < 1e-24:
        return np.array([mean, 0.0, values.min(), values.max(), 0.0, 0.0])
    m3 = np.mean(centered ** 3)
    m4 = np.mean(centered ** 4)
    skew = m3 / m2 ** 1.5
    kurt = m4 / (m2 * m2) - 3.0
    return np.array([mean, std, values.min(), values.max(), kurt, skew])


def historical_features(history, target_day_type: str) -> np.ndarray:
    """19-dim summary of the prior week: six moments over all seven days,
    six over its weekdays, six over its weekend/holiday days, plus a
    weekend indicator for the target day.

    `history` is a sequence of exactly seven (departure_hour, day_type)
    pairs, oldest first.
    """
    if len(history) != 7:
        raise UsageError(f"history must cover exactly 7 days, got {len(history)}")
    if target_day_type not in DAY_TYPES:
        raise ConfigError(f"unknown day_type {target_day_type!r}")
    hours = np.array([h for h, _ in history], dtype=np.float64)
    types = [t for _, t in history]
    for t in types:
        if t not in DAY_TYPES:
            raise ConfigError(f"unknown day_type {t!r} in history")
    wk = hours[[t == "weekday" for t in types]]
    we = hours[[t != "weekday" for t in types]]
    indicator = 1.0 if target_day_type != "weekday" else 0.0
    return np.concatenate([_moment_stats(hours), _moment_stats(wk),
                           _moment_stats(we), [indicator]])


def save_jsonl(data, path) -> None:
    """Write sequences as JSON Lines. Accepts a Dataset or a sequence list."""
    sequences = data.sequences if isinstance(data, Dataset) else data
    with open(path, "wb") as fh:
        for s in sequences:
            row = {
                "user_id": s.user_id,
                "date": s.date,
                "day_type": s.day_type,
                "event_index": int(s.event_index),
                "context": s.context.tolist(),
                "abs_time": s.abs_time.tolist(),
            }
            fh.write(_encode(row))
            fh.write(b"\n")


def load_jsonl(path) -> Dataset:
    """Parse a JSON Lines corpus; malformed rows name the line and field."""
    sequences = []
    d = None
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                row = _decode(raw)
            except (ValueError, TypeError) as e:
                raise DataFormatError(f"line {lineno}: invalid JSON ({e})") from None
            if not isinstance(row, dict):
                raise DataFormatError(f"line {lineno}: expected an object")
            missing = [k for k in _JSONL_KEYS if k not in row]
            if missing:
                raise DataFormatError(f"line {lineno}: missing field {missing[0]!r}")
            extra = set(row) - set(_JSONL_KEYS)
            if extra:
                raise DataFormatError(f"line {lineno}: unexpected field {sorted(extra)[0]!r}")
            if not isinstance(row["event_index"], int):
                raise DataFormatError(f"line {lineno}: field 'event_index' must be an integer")
            try:
                seq = DaySequence(
                    user_id=row["user_id"], date=row["date"],
                    day_type=row["day_type"], event_index=row["event_index"],
                    context=np.array(row["context"], dtype=np.float64),
                    abs_time=np.array(row["abs_time"], dtype=np.float64),
                )
            except (ConfigError, TypeError, ValueError) as e:
                raise DataFormatError(f"line {lineno}: {e}") from None
            if d is None:
                d = seq.context.shape[1]
            elif seq.context.shape[1] != d:
                raise DataFormatError(
                    f"line {lineno}: field 'context' has {seq.context.shape[1]} "
                    f"features, expected {d}")
            sequences.append(seq)
    return Dataset(sequences=sequences)
