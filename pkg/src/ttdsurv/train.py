"""Optimization loops: global training, per-user fine-tuning, sweeps.

Training is plain Adam over shuffled minibatches with early stopping on
validation loss; the best-validation parameters are what a run returns.
Every source of randomness derives from (seed, epoch), so a rerun with
the same seed reproduces the same checkpoint bit for bit.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation as E
from . import model as M
from .errors import ConfigError, TrainingDiverged, UsageError
from .loss import LossConfig, SequenceLabel, batch_loss
from .numkit import AdamState, adam_step


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    l1: float = 0.0
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    seed: int = 42
    eval_threshold: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.l1 < 0:
            raise ConfigError("lr, weight_decay and l1 must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if not 0.0 < self.eval_threshold < 1.0:
            raise ConfigError("eval_threshold must be in (0, 1)")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)


@dataclass
class FinetuneConfig:
    lr: float = 2e-3
    l1: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 3
    dropout: float = 0.0
    k_last_layers: int = 1
    seed: int = 42
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.l1 < 0:
            raise ConfigError("lr, weight_decay and l1 must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.k_last_layers < 1:
            raise ConfigError("k_last_layers must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class History:
    records: list
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int = 0
    adam: AdamState = None  # optimizer state at stop, for resuming

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])


def _labels(seqs):
    return [SequenceLabel(s.event_index, s.day_type) for s in seqs]


def _run_batch(params, seqs, loss_cfg, train_mode, rng):
    batch = M.TokenBatch.from_sequences(seqs)
    curves = M.forward(batch, params, train_mode=train_mode, rng=rng)
    return batch_loss(curves, _labels(seqs), loss_cfg)


def dataset_loss(params, seqs, loss_cfg, batch_size: int = 64) -> float:
    """Mean per-sequence loss in eval mode."""
    total = 0.0
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        total += _run_batch(params, chunk, loss_cfg, False, None).item() * len(chunk)
    return total / len(seqs)


def _check_alpha(params):
    if "alpha_logit" in params:
        logit = params["alpha_logit"].data
        assert np.all(np.isfinite(logit)), "alpha_logit left the finite range"


def _optimize(params, train_seqs, val_seqs, trainable, adam, loss_cfg,
              batch_size, max_epochs, patience, seed, start_epoch=0):
    """Shared epoch loop; returns (best params copy, History)."""
    step_params = {n: params[n] for n in trainable}
    best_val = np.inf
    best_params = params.copy()
    best_epoch = 0
    wait = 0
    records = []
    n_train = len(train_seqs)
    epoch = start_epoch
    for epoch in range(start_epoch + 1, max_epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n_train)
        train_total = 0.0
        for start in range(0, n_train, batch_size):
            chunk = [train_seqs[i] for i in order[start:start + batch_size]]
            params.zero_grads()
            loss = _run_batch(params, chunk, loss_cfg, True, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            adam_step(step_params, {n: params[n].grad for n in trainable}, adam)
            _check_alpha(params)
            train_total += value * len(chunk)
        train_loss = train_total / n_train
        val_loss = dataset_loss(params, val_seqs, loss_cfg, batch_size)
        records.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = params.copy()
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                break
    return best_params, History(records=records, best_epoch=best_epoch,
                                best_val_loss=float(best_val),
                                stopped_epoch=epoch, adam=adam)


def train_global(dataset, model_cfg: M.ModelConfig, train_cfg: TrainConfig,
                 resume=None):
    """Train from scratch on the dataset's train split, early-stop on val.

    The dataset must be split and normalized already. Returns the
    best-validation parameters and the epoch history. Pass a Checkpoint
    as `resume` to continue from its params and optimizer state.
    """
    if dataset.split is None:
        raise UsageError("train_global needs a split dataset")
    if dataset.norm_stats is None:
        raise UsageError("train_global needs a normalized dataset; "
                         "call normalize_dataset first")
    train_seqs = dataset.subset("train")
    val_seqs = dataset.subset("val")
    if not train_seqs or not val_seqs:
        raise UsageError("train and val splits must both be non-empty")
    if train_seqs[0].context.shape[1] != model_cfg.input_dim:
        raise ConfigError(
            f"model expects {model_cfg.input_dim} context features, data has "
            f"{train_seqs[0].context.shape[1]}")
    start_epoch = 0
    if resume is not None:
        params = resume.params
        adam = resume.adam if resume.adam is not None else _fresh_adam(train_cfg)
        start_epoch = (resume.meta or {}).get("epoch", 0)
    else:
        params = M.init_params(model_cfg, np.random.default_rng([train_cfg.seed, 0]))
        adam = _fresh_adam(train_cfg)
    trainable = M.active_param_names(model_cfg)
    return _optimize(params, train_seqs, val_seqs, trainable, adam,
                     train_cfg.loss, train_cfg.batch_size, train_cfg.max_epochs,
                     train_cfg.patience, train_cfg.seed, start_epoch=start_epoch)


def _fresh_adam(cfg) -> AdamState:
    return AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay, l1_penalty=cfg.l1)


def finetune_trainable_names(config: M.ModelConfig, k_last_layers: int) -> list:
    """The last k encoder layers plus the survival head."""
    k = min(k_last_layers, config.num_layers)
    names = []
    for i in range(config.num_layers - k, config.num_layers):
        names += [f"enc{i}_attn_{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"enc{i}_attn_{c}b" for c in "qkvo"]
        names += [f"enc{i}_ln1_g", f"enc{i}_ln1_b",
                  f"enc{i}_ff_w1", f"enc{i}_ff_b1",
                  f"enc{i}_ff_w2", f"enc{i}_ff_b2",
                  f"enc{i}_ln2_g", f"enc{i}_ln2_b"]
    names += ["out_w", "out_b"]
    return names


def fine_tune(params: M.ModelParams, user_days, ft_cfg: FinetuneConfig):
    """Personalize a trained model on one user's days.

    Only the last k encoder layers and the head move; everything else
    stays bit-identical. The user's days are split by date, holding out
    every fifth day for early stopping (all days train when there are
    fewer than five). The untouched input model is scored on the same
    holdout first and wins ties, so adaptation never returns a model
    that is worse there than what it started from (best_epoch 0 in the
    history means the input won). Returns (personalized params,
    history); the input params are untouched.
    """
    if not user_days:
        raise UsageError("fine_tune needs at least one adaptation day")
    users = {s.user_id for s in user_days}
    if len(users) != 1:
        raise UsageError(f"fine_tune expects days of one user, got {sorted(users)}")
    for s in user_days:
        if not s.normalized:
            raise UsageError("fine_tune expects normalized sequences")
    cfg = replace(params.config, dropout=ft_cfg.dropout)
    personalized = params.copy()
    personalized.config = cfg
    days = sorted(user_days, key=lambda s: s.date)
    val_seqs = [s for i, s in enumerate(days) if i % 5 == 4]
    train_seqs = [s for i, s in enumerate(days) if i % 5 != 4]
    if not val_seqs:
        train_seqs, val_seqs = days, days
    trainable = finetune_trainable_names(cfg, ft_cfg.k_last_layers)
    adam = _fresh_adam(ft_cfg)
    pristine = personalized.copy()
    val_before = dataset_loss(personalized, val_seqs, ft_cfg.loss,
                              ft_cfg.batch_size)
    best, history = _optimize(personalized, train_seqs, val_seqs, trainable,
                              adam, ft_cfg.loss, ft_cfg.batch_size,
                              ft_cfg.max_epochs, ft_cfg.patience, ft_cfg.seed)
    if val_before <= history.best_val_loss:
        best = pristine
        history = History(records=history.records, best_epoch=0,
                          best_val_loss=float(val_before),
                          stopped_epoch=history.stopped_epoch,
                          adam=history.adam)
    return best, history


def grid_sweep(dataset, axes: dict, model_cfg: M.ModelConfig,
               train_cfg: TrainConfig) -> list:
    """Train one model per (omega_e, omega_w) cell and score the val split
    at each threshold. Returns one row dict per (omega_e, omega_w, p)."""
    known = {"omega_e", "omega_w", "p"}
    unknown = set(axes) - known
    if unknown:
        raise UsageError(f"unknown sweep axes: {sorted(unknown)}")
    omega_es = list(axes.get("omega_e", [train_cfg.loss.omega_e]))
    omega_ws = list(axes.get("omega_w", [train_cfg.loss.omega_w]))
    thresholds = list(axes.get("p", [train_cfg.eval_threshold]))
    if not omega_es or not omega_ws or not thresholds:
        raise UsageError("sweep axes must be non-empty")
    val_seqs = dataset.subset("val")
    rows = []
    for omega_e in omega_es:
        for omega_w in omega_ws:
            loss_cfg = replace(train_cfg.loss, omega_e=omega_e, omega_w=omega_w)
            cell_cfg = replace(train_cfg, loss=loss_cfg)
            params, history = train_global(dataset, model_cfg, cell_cfg)
            for p in thresholds:
                report = E.evaluate(params, val_seqs, p)
                rows.append({
                    "omega_e": omega_e, "omega_w": omega_w, "p": p,
                    "val_mae_all": report.mae_all,
                    "val_mae_weekday": report.mae_weekday,
                    "val_mae_weekend": report.mae_weekend,
                    "n_days": report.n_all,
                    "best_val_loss": history.best_val_loss,
                })
    return rows


def sweep_to_csv(rows, path) -> None:
    cols = ["omega_e", "omega_w", "p", "val_mae_all", "val_mae_weekday",
            "val_mae_weekend", "n_days", "best_val_loss"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] if not isinstance(row[c], float) else repr(row[c])
                             for c in cols])
