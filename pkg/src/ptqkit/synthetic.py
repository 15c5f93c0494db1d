"""Toy encoders and data with planted activation outliers.

Two mechanisms are planted.

* Every LayerNorm's gamma is multiplied by ``spike_mult`` on a few shared
  embedding dims.  So that the normalized core stays tame on those dims, the
  sub-layer branches are given a large gain (``branch_gain``) and write into
  the spiked dims at a reduced rate (``spike_damp``).  LN outputs then carry the
  spike on those dims for almost every token while the core does not.
* A few special token ids get embedding rows pointing hard along the spiked
  dims (``token_mult`` times a shared sign pattern).  In every FFN a handful of
  intermediate neurons read that sign pattern and fire only for those tokens,
  writing it back at ``neuron_gain``.  So the tokens keep much more aggressive
  values on the spiked dims in every layer.  Each sequence starts with one of
  them, the way every real example starts with a classifier/separator token.

The task is topic classification.  Ordinary tokens are split into two halves
of the vocabulary whose embeddings are shifted apart by ``topic_shift``; a
sequence draws ``topic_purity`` of its tokens from one half, and the label is
that half.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .errors import ConfigurationError
from .model import EMBEDDING, LINEARS, LN_KINDS, ModelGraph, classify, forward, pooled, slot_name


@dataclass
class SynthConfig:
    seed: int = 0
    L: int = 4
    n: int = 64
    heads: int = 4
    T: int = 32
    vocab: int = 256
    d_ff: int = 256
    spiked_dims: int = 2
    spike_mult: float = 8.0
    special_tokens: int = 3
    token_mult: float = 24.0
    branch_gain: float = 24.0
    spike_damp: float = 0.4
    outlier_neurons: int = 8
    neuron_gain: float = 4.0
    neuron_slope: float = 4.0
    neuron_threshold: float = 1.0
    topic_purity: float = 0.75
    topic_shift: float = 3.0
    n_calib: int = 256
    n_eval: int = 512
    n_train: int = 2048
    batch_size: int = 32
    ln_eps: float = 1e-12

    def __post_init__(self):
        if min(self.L, self.n, self.heads, self.T, self.vocab, self.d_ff) < 1:
            raise ConfigurationError("model dimensions must be positive")
        if self.n % self.heads:
            raise ConfigurationError(f"n={self.n} is not divisible by heads={self.heads}")
        if not 0 <= self.spiked_dims < self.n:
            raise ConfigurationError("spiked_dims must be in [0, n)")
        if not 0 <= self.special_tokens < self.vocab - 1:
            raise ConfigurationError("special_tokens must leave at least two ordinary tokens")
        if self.spiked_dims and self.spike_mult < 1:
            raise ConfigurationError("spike_mult must be >= 1")
        if self.special_tokens and self.token_mult < 1:
            raise ConfigurationError("token_mult must be >= 1")
        if not 0 <= self.outlier_neurons <= self.d_ff:
            raise ConfigurationError("outlier_neurons must be in [0, d_ff]")
        if self.branch_gain <= 0 or self.spike_damp < 0:
            raise ConfigurationError("branch_gain must be > 0 and spike_damp >= 0")
        if not 0.5 < self.topic_purity <= 1:
            raise ConfigurationError("topic_purity must be in (0.5, 1]")
        if min(self.n_calib, self.n_eval, self.n_train) < 1 or self.batch_size < 1:
            raise ConfigurationError("sample counts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(cfg: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def spiked_dims(cfg: SynthConfig) -> list:
    return sorted(_rng(cfg, 1).choice(cfg.n, size=cfg.spiked_dims, replace=False).tolist())


def _signs(cfg: SynthConfig) -> np.ndarray:
    return np.where(_rng(cfg, 2).random(cfg.spiked_dims) < 0.5, -1.0, 1.0)


def _halves(cfg: SynthConfig) -> list:
    return np.array_split(np.arange(cfg.special_tokens, cfg.vocab), 2)


def gen_model(cfg: SynthConfig) -> ModelGraph:
    """Random encoder with the planted structure; the head is fit separately."""
    rng = _rng(cfg, 0)
    dims, signs = spiked_dims(cfg), _signs(cfg)
    n, f = cfg.n, cfg.d_ff
    k = max(len(dims), 1)

    emb = rng.normal(size=(cfg.vocab, n))
    emb[:, dims] *= cfg.spike_damp
    # the two topic halves sit on either side of a direction off the spiked dims
    u = _rng(cfg, 3).normal(size=n)
    u[dims] = 0.0
    u /= np.linalg.norm(u)
    for h, half in enumerate(_halves(cfg)):
        emb[half] += (2 * h - 1) * cfg.topic_shift * u
    for sid in range(cfg.special_tokens):
        emb[sid, dims] = cfg.token_mult * signs
    arrays = {EMBEDDING: emb}
    shapes = {
        "attention.query": (n, n),
        "attention.key": (n, n),
        "attention.value": (n, n),
        "attention.output": (n, n),
        "ffn.intermediate": (f, n),
        "ffn.output": (n, f),
    }
    for i in range(cfg.L):
        for lin in LINEARS:
            out_f, in_f = shapes[lin]
            w = rng.normal(scale=1.0 / np.sqrt(in_f), size=(out_f, in_f))
            if lin in ("attention.output", "ffn.output"):
                w *= 0.5 * cfg.branch_gain
                w[dims] *= cfg.spike_damp
            else:
                w[:, dims] *= cfg.spike_damp
            arrays[f"layer.{i}.{lin}.weight"] = w
            arrays[f"layer.{i}.{lin}.bias"] = rng.normal(scale=0.02, size=out_f)
        w1, b1 = arrays[f"layer.{i}.ffn.intermediate.weight"], arrays[f"layer.{i}.ffn.intermediate.bias"]
        w2 = arrays[f"layer.{i}.ffn.output.weight"]
        if dims:
            for r in range(cfg.outlier_neurons):
                # slope * (mean signed core value on the spiked dims - threshold)
                w1[r] = 0.0
                w1[r, dims] = cfg.neuron_slope * signs / (cfg.spike_mult * k)
                b1[r] = -cfg.neuron_slope * cfg.neuron_threshold
                w2[:, r] = 0.0
                w2[dims, r] = signs * cfg.neuron_gain
        for kind in LN_KINDS:
            gamma = 1.0 + rng.normal(scale=0.1, size=n)
            gamma[dims] *= cfg.spike_mult
            arrays[f"{slot_name(i, kind)}.gamma"] = gamma
            arrays[f"{slot_name(i, kind)}.beta"] = rng.normal(scale=0.1, size=n)
    arrays["head.weight"] = rng.normal(scale=1.0 / np.sqrt(n), size=(2, n))
    arrays["head.bias"] = np.zeros(2)
    tensors = {name: torch.as_tensor(np.ascontiguousarray(a, dtype=np.float64)) for name, a in arrays.items()}
    meta = {
        "L": cfg.L,
        "n": n,
        "heads": cfg.heads,
        "vocab": cfg.vocab,
        "d_ff": f,
        "ln_mode": "scaling",
        "ln_eps": cfg.ln_eps,
        "special_ids": list(range(cfg.special_tokens)),
        "spiked_dims": dims,
        "seed": cfg.seed,
    }
    return ModelGraph(meta=meta, tensors=tensors)


def gen_sequences(cfg: SynthConfig, count: int, stream: int):
    """Token ids ``(count, T)`` and topic labels ``(count,)``."""
    rng = _rng(cfg, stream)
    halves = _halves(cfg)
    labels = rng.integers(0, 2, size=count)
    from_topic = rng.random((count, cfg.T)) < cfg.topic_purity
    own = np.stack([rng.choice(halves[y], size=cfg.T) for y in labels])
    other = np.stack([rng.choice(halves[1 - y], size=cfg.T) for y in labels])
    ids = np.where(from_topic, own, other)
    if cfg.special_tokens:
        ids[:, 0] = (np.arange(count) + stream) % cfg.special_tokens
    return ids, labels


def gen_data(cfg: SynthConfig) -> dict:
    calib_ids, calib_y = gen_sequences(cfg, cfg.n_calib, stream=20)
    eval_ids, eval_y = gen_sequences(cfg, cfg.n_eval, stream=30)
    return {
        "meta": {"seed": cfg.seed, "T": cfg.T, "batch_size": cfg.batch_size},
        "calibration": {"sequences": calib_ids.tolist(), "labels": calib_y.tolist()},
        "eval": {"sequences": eval_ids.tolist(), "labels": eval_y.tolist()},
    }


def fit_head(model: ModelGraph, ids, labels, ridge: float = 1e-3) -> ModelGraph:
    """Least-squares fit of the two-class linear head on fp pooled features."""
    with torch.no_grad():
        feats = pooled(model, forward(model, ids, mode="fp"), ids)
    x = torch.cat([feats, torch.ones(feats.shape[0], 1, dtype=torch.float64)], dim=1)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.float64) * 2 - 1
    a = x.T @ x + ridge * torch.eye(x.shape[1], dtype=torch.float64)
    beta = torch.linalg.solve(a, x.T @ y)
    w, b = beta[:-1], beta[-1]
    model.tensors["head.weight"] = torch.stack([-w, w]) / 2
    model.tensors["head.bias"] = torch.stack([-b, b]) / 2
    return model


def accuracy(model: ModelGraph, ids, labels, **fwd) -> float:
    with torch.no_grad():
        logits = classify(model, forward(model, ids, **fwd), ids)
    pred = logits.argmax(dim=1).numpy()
    return float(100.0 * np.mean(pred == np.asarray(labels)))


def synthesize(cfg: SynthConfig):
    """Model with its head fit on a separate training split, plus the data document."""
    model = gen_model(cfg)
    data = gen_data(cfg)
    train_ids, train_y = gen_sequences(cfg, cfg.n_train, stream=40)
    fit_head(model, train_ids, train_y)
    return model, data
