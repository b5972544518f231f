"""Survival model over a day's 5-minute grid.

Per time step the model consumes contextual features, a day-type one-hot
and a two-dimensional absolute-time encoding, fuses a context embedding
with a scaled time embedding through a learned convex gate, adds
sinusoidal positional encodings, runs a stack of pre-norm transformer
encoder layers, and maps each position to a survival probability
S(t|X) = sigma(w_o . u_t + b_o) with a sigmoid head. Probabilities are
direct per-interval estimates; no cumulative product is applied.
"""

import json
import math
from dataclasses import dataclass, asdict, fields
from functools import lru_cache

import numpy as np

from . import numkit as nk
from .errors import ConfigError, DomainError, ShapeError, UsageError
from .numkit import Tensor

TIME_DIM = 2  # (sin, cos) of clock-time fraction of day

CHECKPOINT_VERSION = 1

ATTENTION_MODES = ("causal", "bidirectional_prefix")
ACTIVATIONS = ("gelu", "tanh")


@dataclass
class ModelConfig:
    input_dim: int = 94
    dow_dim: int = 3
    d_model: int = 32
    num_layers: int = 3
    n_head: int = 1
    ff_dim: int = 0          # 0 means 4 * d_model
    dropout: float = 0.1
    dropout_time: float = 0.2
    seq_len: int = 265
    attention_mode: str = "causal"
    activation: str = "gelu"
    use_positional_encoding: bool = True
    use_time: bool = True
    use_dow: bool = True
    use_context: bool = True
    use_alpha_fusion: bool = True
    learn_time_scale: bool = True

    def __post_init__(self):
        if self.ff_dim == 0:
            self.ff_dim = 4 * self.d_model
        if self.input_dim < 1 or self.d_model < 1 or self.seq_len < 1:
            raise ConfigError("input_dim, d_model and seq_len must be positive")
        if self.dow_dim < 1 or self.num_layers < 0 or self.ff_dim < 1:
            raise ConfigError("dow_dim/ff_dim must be positive, num_layers >= 0")
        if self.n_head < 1 or self.d_model % self.n_head != 0:
            raise ConfigError(f"n_head {self.n_head} must divide d_model {self.d_model}")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.dropout_time < 1.0):
            raise ConfigError("dropout rates must be in [0, 1)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.use_positional_encoding and self.d_model % 2 != 0:
            raise ConfigError("positional encoding requires an even d_model")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenBatch:
    """Stacked per-step inputs for a batch of (possibly prefix) days."""
    context: np.ndarray   # (B, T, input_dim)
    dow: np.ndarray       # (B, T, dow_dim)
    abs_time: np.ndarray  # (B, T, TIME_DIM)
    pad_mask: np.ndarray = None  # (B, T); 1.0 = real token, 0.0 = pad

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        self.dow = np.asarray(self.dow, dtype=np.float64)
        self.abs_time = np.asarray(self.abs_time, dtype=np.float64)
        b, t = self.context.shape[:2]
        if self.dow.shape[:2] != (b, t) or self.abs_time.shape[:2] != (b, t):
            raise ShapeError("TokenBatch fields disagree on (batch, time) dims")
        if self.abs_time.shape[2] != TIME_DIM:
            raise ShapeError(f"abs_time must have {TIME_DIM} features per step")
        if self.pad_mask is not None:
            self.pad_mask = np.asarray(self.pad_mask, dtype=np.float64)
            if self.pad_mask.shape != (b, t):
                raise ShapeError("pad_mask must be (batch, time)")

    @property
    def batch_size(self):
        return self.context.shape[0]

    @property
    def seq_len(self):
        return self.context.shape[1]

    @classmethod
    def from_sequences(cls, seqs) -> "TokenBatch":
        """Stack full-day sequences; each needs .context, .abs_time, .dow_onehot."""
        context = np.stack([s.context for s in seqs])
        abs_time = np.stack([s.abs_time for s in seqs])
        t = context.shape[1]
        dow = np.stack([np.tile(np.asarray(s.dow_onehot, dtype=np.float64), (t, 1))
                        for s in seqs])
        return cls(context=context, dow=dow, abs_time=abs_time)


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self):
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ModelParams":
        out = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self._tensors.items()}
        return ModelParams(self.config, out)

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    @property
    def n_params(self) -> int:
        return int(np.sum([t.data.size for t in self._tensors.values()]))


def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity norms, gamma=1, alpha=0.5."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dm, ff = config.d_model, config.ff_dim
    d_in = config.input_dim + config.dow_dim
    p = {}
    p["ctx_proj_w"] = Tensor(_xavier(rng, d_in, dm), requires_grad=True)
    p["ctx_proj_b"] = Tensor(np.zeros(dm), requires_grad=True)
    p["ctx_ln_g"] = Tensor(np.ones(dm), requires_grad=True)
    p["ctx_ln_b"] = Tensor(np.zeros(dm), requires_grad=True)
    p["time_w1"] = Tensor(_xavier(rng, TIME_DIM, dm), requires_grad=True)
    p["time_b1"] = Tensor(np.zeros(dm), requires_grad=True)
    p["time_w2"] = Tensor(_xavier(rng, dm, dm), requires_grad=True)
    p["time_b2"] = Tensor(np.zeros(dm), requires_grad=True)
    p["time_scale"] = Tensor(np.ones(1), requires_grad=True)
    p["alpha_logit"] = Tensor(np.zeros(1), requires_grad=True)
    for i in range(config.num_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"enc{i}_attn_{w}"] = Tensor(_xavier(rng, dm, dm), requires_grad=True)
            p[f"enc{i}_attn_{w[1]}b"] = Tensor(np.zeros(dm), requires_grad=True)
        p[f"enc{i}_ln1_g"] = Tensor(np.ones(dm), requires_grad=True)
        p[f"enc{i}_ln1_b"] = Tensor(np.zeros(dm), requires_grad=True)
        p[f"enc{i}_ff_w1"] = Tensor(_xavier(rng, dm, ff), requires_grad=True)
        p[f"enc{i}_ff_b1"] = Tensor(np.zeros(ff), requires_grad=True)
        p[f"enc{i}_ff_w2"] = Tensor(_xavier(rng, ff, dm), requires_grad=True)
        p[f"enc{i}_ff_b2"] = Tensor(np.zeros(dm), requires_grad=True)
        p[f"enc{i}_ln2_g"] = Tensor(np.ones(dm), requires_grad=True)
        p[f"enc{i}_ln2_b"] = Tensor(np.zeros(dm), requires_grad=True)
    p["out_w"] = Tensor(_xavier(rng, dm, 1), requires_grad=True)
    p["out_b"] = Tensor(np.zeros(1), requires_grad=True)
    return ModelParams(config, p)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total parameter count for a config."""
    dm, ff = config.d_model, config.ff_dim
    d_in = config.input_dim + config.dow_dim
    ctx = d_in * dm + dm + 2 * dm
    time = TIME_DIM * dm + dm + dm * dm + dm
    scalars = 2  # time_scale, alpha_logit
    layer = 4 * (dm * dm + dm) + 4 * dm + (dm * ff + ff + ff * dm + dm)
    head = dm + 1
    return ctx + time + scalars + config.num_layers * layer + head


def active_param_names(config: ModelConfig) -> list:
    """Parameters that actually receive gradients under the config's toggles."""
    names = ["ctx_proj_w", "ctx_proj_b", "ctx_ln_g", "ctx_ln_b"]
    if config.use_time:
        names += ["time_w1", "time_b1", "time_w2", "time_b2"]
        if config.learn_time_scale:
            names.append("time_scale")
    if config.use_alpha_fusion:
        names.append("alpha_logit")
    for i in range(config.num_layers):
        names += [f"enc{i}_attn_{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"enc{i}_attn_{c}b" for c in "qkvo"]
        names += [f"enc{i}_ln1_g", f"enc{i}_ln1_b",
                  f"enc{i}_ff_w1", f"enc{i}_ff_b1",
                  f"enc{i}_ff_w2", f"enc{i}_ff_b2",
                  f"enc{i}_ln2_g", f"enc{i}_ln2_b"]
    names += ["out_w", "out_b"]
    return names


@lru_cache(maxsize=8)
def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: PE[pos, 2i] = sin(pos/10000^(2i/d)), odd cols cos."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.flags.writeable = False
    return pe


def _act(config: ModelConfig):
    return nk.gelu if config.activation == "gelu" else nk.tanh


def _maybe_dropout(x: Tensor, rate: float, train_mode: bool, rng) -> Tensor:
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode forward needs an rng for dropout")
    return nk.mul(x, nk.dropout_mask(x.shape, rate, rng))


def embed_context(context: Tensor, dow: Tensor, params: ModelParams,
                  train_mode: bool = False, rng=None) -> Tensor:
    """Project [context ; dow] to d_model, dropout, then layer-norm."""
    cfg = params.config
    if not cfg.use_context:
        context = Tensor(np.zeros(context.shape))
    if not cfg.use_dow:
        dow = Tensor(np.zeros(dow.shape))
    x = nk.concat([context, dow], axis=-1)
    x = nk.matmul(x, params["ctx_proj_w"]) + params["ctx_proj_b"]
    x = _maybe_dropout(x, cfg.dropout, train_mode, rng)
    return nk.layer_norm(x, params["ctx_ln_g"], params["ctx_ln_b"])


def embed_time(abs_time: Tensor, params: ModelParams,
               train_mode: bool = False, rng=None) -> Tensor:
    """Two-layer net over the absolute-time features, scaled by gamma.

    Temporal dropout zeroes whole tokens: the mask is (B, T, 1) so a
    dropped step loses its entire time embedding at once.
    """
    cfg = params.config
    if not cfg.use_time:
        b, t = abs_time.shape[:2]
        return Tensor(np.zeros((b, t, cfg.d_model)))
    act = _act(cfg)
    h = act(nk.matmul(abs_time, params["time_w1"]) + params["time_b1"])
    h = nk.matmul(h, params["time_w2"]) + params["time_b2"]
    if cfg.learn_time_scale:
        h = nk.mul(h, params["time_scale"])
    if train_mode and cfg.dropout_time > 0.0:
        if rng is None:
            raise UsageError("train-mode forward needs an rng for dropout")
        b, t = abs_time.shape[:2]
        h = nk.mul(h, nk.dropout_mask((b, t, 1), cfg.dropout_time, rng))
    return h


def fuse(z_context: Tensor, z_time: Tensor, params: ModelParams) -> Tensor:
    """Convex combination alpha*z_context + (1-alpha)*z_time, alpha learned."""
    if not params.config.use_alpha_fusion:
        return z_context + z_time
    alpha = nk.sigmoid(params["alpha_logit"])
    return nk.mul(alpha, z_context) + nk.mul(1.0 - alpha, z_time)


def _attention_mask(config: ModelConfig, t: int, pad_mask) -> np.ndarray:
    """Additive mask (…, T, T); 0 where allowed, -inf where blocked."""
    if config.attention_mode == "causal":
        base = np.where(np.triu(np.ones((t, t), dtype=bool), k=1), -np.inf, 0.0)
    else:
        base = np.zeros((t, t))
    mask = base[None, None, :, :]
    if pad_mask is not None and not np.all(pad_mask == 1.0):
        key_add = np.where(pad_mask[:, None, None, :] == 0.0, -np.inf, 0.0)
        mask = mask + key_add
    return mask


def encoder_forward(h: Tensor, pad_mask, params: ModelParams,
                    train_mode: bool = False, rng=None) -> Tensor:
    """Stack of pre-norm encoder layers: x += Drop(Attn(LN(x))), x += Drop(FF(LN(x)))."""
    cfg = params.config
    b, t, dm = h.shape
    nh = cfg.n_head
    dh = dm // nh
    mask = _attention_mask(cfg, t, pad_mask)
    act = _act(cfg)
    x = h
    for i in range(cfg.num_layers):
        xn = nk.layer_norm(x, params[f"enc{i}_ln1_g"], params[f"enc{i}_ln1_b"])
        q = nk.matmul(xn, params[f"enc{i}_attn_wq"]) + params[f"enc{i}_attn_qb"]
        k = nk.matmul(xn, params[f"enc{i}_attn_wk"]) + params[f"enc{i}_attn_kb"]
        v = nk.matmul(xn, params[f"enc{i}_attn_wv"]) + params[f"enc{i}_attn_vb"]
        q = nk.transpose(nk.reshape(q, (b, t, nh, dh)), (0, 2, 1, 3))
        k = nk.transpose(nk.reshape(k, (b, t, nh, dh)), (0, 2, 1, 3))
        v = nk.transpose(nk.reshape(v, (b, t, nh, dh)), (0, 2, 1, 3))
        scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = nk.softmax_lastdim(scores, additive_mask=mask)
        ctx = nk.transpose(nk.matmul(probs, v), (0, 2, 1, 3))
        ctx = nk.reshape(ctx, (b, t, dm))
        ctx = nk.matmul(ctx, params[f"enc{i}_attn_wo"]) + params[f"enc{i}_attn_ob"]
        x = x + _maybe_dropout(ctx, cfg.dropout, train_mode, rng)
        xn2 = nk.layer_norm(x, params[f"enc{i}_ln2_g"], params[f"enc{i}_ln2_b"])
        ffn = nk.matmul(act(nk.matmul(xn2, params[f"enc{i}_ff_w1"]) + params[f"enc{i}_ff_b1"]),
                        params[f"enc{i}_ff_w2"]) + params[f"enc{i}_ff_b2"]
        x = x + _maybe_dropout(ffn, cfg.dropout, train_mode, rng)
    return x


def survival_head(u: Tensor, params: ModelParams) -> Tensor:
    """Per-position survival probability, shape (B, T)."""
    b, t, _ = u.shape
    s = nk.sigmoid(nk.matmul(u, params["out_w"]) + params["out_b"])
    return nk.reshape(s, (b, t))


def forward(batch: TokenBatch, params: ModelParams,
            train_mode: bool = False, rng=None) -> Tensor:
    """Full model: (B, T) survival curves, differentiable."""
    if batch.seq_len > params.config.seq_len:
        raise UsageError(f"batch length {batch.seq_len} exceeds seq_len {params.config.seq_len}")
    return forward_tensors(Tensor(batch.context), Tensor(batch.dow),
                           Tensor(batch.abs_time), batch.pad_mask,
                           params, train_mode=train_mode, rng=rng)


def forward_tensors(context: Tensor, dow: Tensor, abs_time: Tensor, pad_mask,
                    params: ModelParams, train_mode: bool = False, rng=None) -> Tensor:
    """Forward over already-wrapped tensors; lets callers differentiate inputs."""
    cfg = params.config
    z_ctx = embed_context(context, dow, params, train_mode, rng)
    z_time = embed_time(abs_time, params, train_mode, rng)
    h = fuse(z_ctx, z_time, params)
    if cfg.use_positional_encoding:
        h = h + positional_encoding(cfg.seq_len, cfg.d_model)[:h.shape[1]]
    u = encoder_forward(h, pad_mask, params, train_mode, rng)
    return survival_head(u, params)


def survival_from_hazard_complement(q: np.ndarray) -> np.ndarray:
    """Cumulative product S(t) = prod_{tau<=t} q(tau) along the last axis.

    q holds hazard complements 1 - lambda(t); values must lie in (0, 1].
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(q > 1.0):
        raise DomainError("hazard complements must lie in (0, 1]")
    return np.cumprod(q, axis=-1)


def _params_to_json(params: ModelParams) -> dict:
    return {name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()}


def _params_from_json(config: ModelConfig, blob: dict) -> ModelParams:
    tensors = {}
    for name, entry in blob.items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config, tensors)


def _adam_to_json(state) -> dict:
    return {
        "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
        "eps": state.eps, "weight_decay": state.weight_decay,
        "l1_penalty": state.l1_penalty, "step": state.step,
        "m": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
              for k, v in state.m.items()},
        "v": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
              for k, v in state.v.items()},
    }


def _adam_from_json(blob: dict):
    from .numkit import AdamState
    st = AdamState(lr=blob["lr"], beta1=blob["beta1"], beta2=blob["beta2"],
                   eps=blob["eps"], weight_decay=blob["weight_decay"],
                   l1_penalty=blob["l1_penalty"], step=blob["step"])
    st.m = {k: np.array(e["data"]).reshape(e["shape"]) for k, e in blob["m"].items()}
    st.v = {k: np.array(e["data"]).reshape(e["shape"]) for k, e in blob["v"].items()}
    return st


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adam: object = None
    norm_stats: dict = None   # {"mean": [...], "std": [...], ...}
    split: dict = None        # {"train": [...], "val": [...], "test": [...]}
    meta: dict = None


def save_checkpoint(path, params: ModelParams, adam=None,
                    norm_stats=None, split=None, meta=None) -> None:
    """JSON checkpoint; float64 values round-trip bit-exactly via repr."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "params": _params_to_json(params),
        "adam": _adam_to_json(adam) if adam is not None else None,
        "norm_stats": norm_stats,
        "split": split,
        "meta": meta,
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        blob = json.load(fh)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version}")
    config = ModelConfig.from_dict(blob["config"])
    params = _params_from_json(config, blob["params"])
    adam = _adam_from_json(blob["adam"]) if blob.get("adam") else None
    return Checkpoint(config=config, params=params, adam=adam,
                      norm_stats=blob.get("norm_stats"),
                      split=blob.get("split"), meta=blob.get("meta"))
