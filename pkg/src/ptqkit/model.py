"""Minimal transformer encoder with named quantization slots.

Block topology (post-LN, BERT style)::

    x ─┬─ Q/K/V ─ softmax(QK^T) V ─ out ─(+)─ MHA-LN ─┬─ fc1 ─ GELU ─ fc2 ─(+)─ FFN-LN ─ ...
       └──────────── shortcut ─────────────┘         └────────── shortcut ──────┘

Activation quantizers sit on the outputs of InputEmbedding, Query, Key, Value,
AttentionProbs, Context, MHA-LN, GELU and FFN-LN.  An activation that feeds
several consumers (the LN output feeding both the next matmul and the shortcut)
owns exactly one quantizer.  After Gamma Migration the shortcut branch carries
an explicit ``shortcut.gamma`` multiplier applied to the dequantized value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import quantizer as Q
from .errors import ConfigurationError, DimensionError, NumericalError

INPUT_SLOT = "InputEmbedding"
BLOCK_SLOT_KINDS = ("Query", "Key", "Value", "AttentionProbs", "Context", "MHA-LN", "GELU", "FFN-LN")
LN_KINDS = ("MHA-LN", "FFN-LN")
LINEARS = ("attention.query", "attention.key", "attention.value", "attention.output", "ffn.intermediate", "ffn.output")
EMBEDDING = "embedding.weight"

Hook = Callable[[str, torch.Tensor], Optional[torch.Tensor]]
ActQuant = Callable[[str, torch.Tensor, Q.QuantParams], torch.Tensor]


def slot_name(layer: int, kind: str) -> str:
    return f"layer.{layer}.{kind}"


def slot_kind(slot: str) -> str:
    return slot.rsplit(".", 1)[-1]


@dataclass
class LayerNormParams:
    gamma: torch.Tensor
    beta: torch.Tensor
    epsilon: float = 1e-12

    def __post_init__(self):
        self.gamma, self.beta = Q.as_tensor(self.gamma), Q.as_tensor(self.beta)
        if self.gamma.shape != self.beta.shape:
            raise DimensionError("gamma and beta must have the same length")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _check_input(x, p: LayerNormParams) -> torch.Tensor:
    x = Q.as_tensor(x)
    if x.shape[-1] != p.gamma.shape[0]:
        raise DimensionError(f"last axis {x.shape[-1]} != LayerNorm width {p.gamma.shape[0]}")
    if not bool(torch.isfinite(x).all()):
        raise NumericalError("non-finite value entering LayerNorm")
    return x


def _layer_norm(x: torch.Tensor, p: LayerNormParams) -> torch.Tensor:
    # biased per-token variance
    return F.layer_norm(x, (x.shape[-1],), p.gamma, p.beta, p.epsilon)


def layer_norm(x, p: LayerNormParams) -> torch.Tensor:
    return _layer_norm(_check_input(x, p), p)


def _check_gamma(gamma: torch.Tensor) -> None:
    zero = torch.nonzero(gamma == 0).flatten().tolist()
    if zero:
        raise ZeroDivisionError(f"gamma has zero entries at indices {zero}")


def non_scaling_layer_norm(x, p: LayerNormParams) -> torch.Tensor:
    """LayerNorm output with gamma factored out: ``normalized + beta / gamma``."""
    _check_gamma(p.gamma)
    x = _check_input(x, p)
    return F.layer_norm(x, (x.shape[-1],), None, None, p.epsilon) + p.beta / p.gamma


def gelu(x) -> torch.Tensor:
    """Exact (erf) GELU."""
    return F.gelu(Q.as_tensor(x), approximate="none")


@dataclass
class QuantNode:
    slot: str
    role: str  # "activation" | "weight" | "embedding"
    bits: int
    scheme: str
    params: Optional[Q.QuantParams] = None
    enabled: bool = True

    def to_dict(self) -> dict:
        d = {"slot": self.slot, "role": self.role, "scheme": self.scheme, "bits": self.bits, "enabled": self.enabled}
        if self.params is None:
            d.update(step=None, zero_point=None)
        else:
            pd = self.params.to_dict()
            d.update(step=pd["step"], zero_point=pd["zero_point"], axis=pd["axis"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantNode":
        params = None
        if d.get("step") is not None:
            params = Q.QuantParams.from_dict(
                {"bits": d["bits"], "step": d["step"], "zero_point": d["zero_point"], "scheme": d["scheme"], "axis": d.get("axis", 0)}
            )
        return cls(d["slot"], d["role"], int(d["bits"]), d["scheme"], params, bool(d.get("enabled", True)))


@dataclass
class ModelGraph:
    """Encoder weights, LN state and the quantization-node registry.

    ``tensors`` holds float64 torch tensors keyed by dotted names; weights are
    stored ``(out_features, in_features)``.
    """

    meta: dict
    tensors: dict
    quant_nodes: dict = field(default_factory=dict)
    migration: list = field(default_factory=list)
    mode: str = "fp"

    @property
    def n_layers(self) -> int:
        return int(self.meta["L"])

    @property
    def width(self) -> int:
        return int(self.meta["n"])

    @property
    def heads(self) -> int:
        return int(self.meta["heads"])

    @property
    def ln_mode(self) -> str:
        return self.meta.get("ln_mode", "scaling")

    @property
    def special_ids(self) -> list:
        return list(self.meta.get("special_ids", []))

    def slots(self) -> list:
        out = [INPUT_SLOT]
        for i in range(self.n_layers):
            out.extend(slot_name(i, k) for k in BLOCK_SLOT_KINDS)
        return out

    def ln_names(self) -> list:
        return [slot_name(i, k) for i in range(self.n_layers) for k in LN_KINDS]

    def weight_names(self) -> list:
        return [f"layer.{i}.{lin}.weight" for i in range(self.n_layers) for lin in LINEARS]

    def ln_params(self, ln: str) -> LayerNormParams:
        return LayerNormParams(self.tensors[f"{ln}.gamma"], self.tensors[f"{ln}.beta"], float(self.meta.get("ln_eps", 1e-12)))

    def set_ln_params(self, ln: str, p: LayerNormParams) -> None:
        self.tensors[f"{ln}.gamma"] = p.gamma.clone()
        self.tensors[f"{ln}.beta"] = p.beta.clone()

    def activation_params(self) -> dict:
        return {s: self.quant_nodes[s].params for s in self.slots() if s in self.quant_nodes}

    def set_activation_params(self, params: dict) -> None:
        for slot, p in params.items():
            node = self._node(slot)
            node.params = p

    def set_weight_params(self, params: dict) -> None:
        for name, p in params.items():
            self._node(name).params = p

    def _node(self, name: str) -> QuantNode:
        try:
            return self.quant_nodes[name]
        except KeyError:
            raise ConfigurationError(f"no quantization node named {name!r}; run place_quant_nodes first") from None

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            meta=dict(self.meta),
            tensors={k: v.clone() for k, v in self.tensors.items()},
            quant_nodes={
                k: QuantNode(n.slot, n.role, n.bits, n.scheme, n.params, n.enabled) for k, n in self.quant_nodes.items()
            },
            migration=list(self.migration),
            mode=self.mode,
        )


class _Pass:
    """State for one forward pass: which quantizers fire and with what params."""

    def __init__(self, model, mode, act_params, disabled, hook, act_quant, weight_cache=None):
        self.model = model
        self.quant = mode == "quant"
        if mode not in ("fp", "quant"):
            raise ValueError(f"mode must be 'fp' or 'quant', got {mode!r}")
        self.act_params = act_params or {}
        self.disabled = set(disabled or ())
        self.hook = hook
        self.act_quant = act_quant
        self._wcache = {} if weight_cache is None else weight_cache

    def _active(self, name: str) -> bool:
        if not self.quant or name in self.disabled:
            return False
        node = self.model.quant_nodes.get(name)
        if node is None:
            raise ConfigurationError(f"quant mode requested but slot {name!r} has no quantization node")
        return node.enabled

    def act(self, slot: str, x: torch.Tensor) -> torch.Tensor:
        if self.hook is not None:
            y = self.hook(slot, x)
            if y is not None:
                x = y
        if not self._active(slot):
            return x
        p = self.act_params.get(slot) or self.model.quant_nodes[slot].params
        if p is None:
            raise ConfigurationError(f"activation slot {slot!r} is active but has no QuantParams")
        if self.act_quant is not None:
            return self.act_quant(slot, x, p)
        return Q.fake_quant(x, p)

    def weight(self, name: str) -> torch.Tensor:
        w = self.model.tensors[name]
        if not self._active(name):
            return w
        if name not in self._wcache:
            p = self.model.quant_nodes[name].params
            if p is None:
                raise ConfigurationError(f"weight quantizer {name!r} has no QuantParams")
            self._wcache[name] = Q.fake_quant(w, p)
        return self._wcache[name]

    def linear(self, prefix: str, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight(f"{prefix}.weight"), self.model.tensors[f"{prefix}.bias"])

    def shortcut(self, site: str, x: torch.Tensor) -> torch.Tensor:
        g = self.model.tensors.get(f"{site}.shortcut.gamma")
        return x if g is None else x * g


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, t, n = x.shape
    return x.reshape(b, t, heads, n // heads).transpose(1, 2)


def _attention(run: _Pass, i: int, x: torch.Tensor):
    m = run.model
    if m.width % m.heads:
        raise DimensionError(f"width {m.width} not divisible by {m.heads} heads")
    pre = f"layer.{i}.attention"
    q = run.act(slot_name(i, "Query"), run.linear(f"{pre}.query", x))
    k = run.act(slot_name(i, "Key"), run.linear(f"{pre}.key", x))
    v = run.act(slot_name(i, "Value"), run.linear(f"{pre}.value", x))
    qh, kh, vh = (_split_heads(t, m.heads) for t in (q, k, v))
    scores = (qh @ kh.transpose(-1, -2)) / math.sqrt(m.width // m.heads)
    probs = run.act(slot_name(i, "AttentionProbs"), torch.softmax(scores, dim=-1))
    ctx = (probs @ vh).transpose(1, 2).reshape(x.shape)
    ctx = run.act(slot_name(i, "Context"), ctx)
    h = run.shortcut(pre, x) + run.linear(f"{pre}.output", ctx)
    ln = slot_name(i, "MHA-LN")
    return run.act(ln, _layer_norm(h, m.ln_params(ln)))


def _ffn(run: _Pass, i: int, y: torch.Tensor):
    m = run.model
    pre = f"layer.{i}.ffn"
    g = run.act(slot_name(i, "GELU"), gelu(run.linear(f"{pre}.intermediate", y)))
    h = run.shortcut(pre, y) + run.linear(f"{pre}.output", g)
    ln = slot_name(i, "FFN-LN")
    return run.act(ln, _layer_norm(h, m.ln_params(ln)))


def _validate_ids(model: ModelGraph, ids) -> torch.Tensor:
    ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= int(model.meta["vocab"])):
        raise ConfigurationError("token id outside the vocabulary")
    return ids


def forward(
    model: ModelGraph,
    ids,
    mode: Optional[str] = None,
    *,
    act_params: Optional[dict] = None,
    disabled: Iterable[str] = (),
    hook: Optional[Hook] = None,
    act_quant: Optional[ActQuant] = None,
    weight_cache: Optional[dict] = None,
) -> torch.Tensor:
    """Final hidden states ``(B, T, n)``.

    ``act_params`` overrides registry params per slot; ``disabled`` switches
    individual quantizers off; ``hook(slot, x)`` sees every slot's
    pre-quantization tensor and may replace it; ``act_quant`` replaces the
    fake-quant kernel (used for step-size learning); ``weight_cache`` lets
    several calls share the fake-quantized weights (valid while weight params
    and ``disabled`` are unchanged).
    """
    run = _Pass(model, mode or model.mode, act_params, disabled, hook, act_quant, weight_cache)
    ids = _validate_ids(model, ids)
    emb = run.weight(EMBEDDING)[ids]
    x = run.act(INPUT_SLOT, emb)
    for i in range(model.n_layers):
        x = _ffn(run, i, _attention(run, i, x))
    x = run.shortcut("output", x)
    if not bool(torch.isfinite(x).all()):
        raise NumericalError("forward pass produced non-finite hidden states")
    return x


def attention_block(model: ModelGraph, layer: int, x, mode: str = "fp", **kw) -> torch.Tensor:
    """One attention sub-layer: MHA, output projection, shortcut add, MHA-LN."""
    run = _Pass(model, mode, kw.get("act_params"), kw.get("disabled"), kw.get("hook"), kw.get("act_quant"))
    x = Q.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != model.width:
        raise DimensionError(f"attention input must be (B, T, {model.width}), got {tuple(x.shape)}")
    return _attention(run, layer, x)


def pool_mask(model: ModelGraph, ids) -> torch.Tensor:
    ids = _validate_ids(model, ids)
    mask = torch.ones(ids.shape, dtype=torch.float64)
    for sid in model.special_ids:
        mask[ids == sid] = 0.0
    empty = mask.sum(dim=1) == 0
    mask[empty] = 1.0
    return mask


def pooled(model: ModelGraph, hidden: torch.Tensor, ids) -> torch.Tensor:
    """Mean of the hidden states over non-special tokens."""
    mask = pool_mask(model, ids)
    return (hidden * mask[..., None]).sum(dim=1) / mask.sum(dim=1, keepdim=True)


def classify(model: ModelGraph, hidden: torch.Tensor, ids) -> torch.Tensor:
    return pooled(model, hidden, ids) @ model.tensors["head.weight"].T + model.tensors["head.bias"]


def place_quant_nodes(model: ModelGraph, bits: dict) -> ModelGraph:
    """Register every activation slot plus the weight and embedding quantizers.

    ``bits`` maps ``weight`` / ``embedding`` / ``activation`` to bit-widths.
    Weight and embedding quantizers get symmetric per-channel MinMax params
    immediately; activation slots stay empty until calibrated.
    """
    if model.quant_nodes:
        raise ConfigurationError("quantization nodes already placed")
    if model.mode != "fp":
        raise ConfigurationError("place_quant_nodes expects a model in fp mode")
    wb, eb, ab = int(bits["weight"]), int(bits["embedding"]), int(bits["activation"])
    nodes = {}
    for slot in model.slots():
        nodes[slot] = QuantNode(slot, "activation", ab, Q.ASYMMETRIC)
    nodes[EMBEDDING] = QuantNode(EMBEDDING, "embedding", eb, Q.SYMMETRIC, Q.weight_params(model.tensors[EMBEDDING], eb))
    for name in model.weight_names():
        nodes[name] = QuantNode(name, "weight", wb, Q.SYMMETRIC, Q.weight_params(model.tensors[name], wb))
    model.quant_nodes = nodes
    return model


def requantize_weights(model: ModelGraph, names: Optional[Iterable[str]] = None) -> None:
    """Re-derive MinMax per-channel params after weights change."""
    for name in names if names is not None else [n for n, q in model.quant_nodes.items() if q.role != "activation"]:
        node = model.quant_nodes.get(name)
        if node is not None:
            node.params = Q.weight_params(model.tensors[name], node.bits)


def bits_of(model: ModelGraph) -> dict:
    out = {}
    for node in model.quant_nodes.values():
        out.setdefault(node.role, node.bits)
    return out
