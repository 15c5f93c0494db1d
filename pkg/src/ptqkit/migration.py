"""Gamma Migration: move each LayerNorm's gamma off the quantized activation.

``LN(x) = NSLN(x) * gamma`` where ``NSLN`` is the non-scaling LayerNorm
(``normalized + beta / gamma``).  The quantizer then sees ``NSLN(x)``; the
gamma is re-applied downstream:

* linear consumers absorb it into their weight columns, ``W' = W diag(gamma)``
  (bias untouched: it is added after the matmul);
* the shortcut branch gets an explicit ``shortcut.gamma`` multiplier applied to
  the dequantized value;
* the last FFN-LN feeds the encoder output directly, which gets the same kind
  of multiplier.

With every gamma re-applied in fp the rewrite is exact up to reassociation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import quantizer as Q
from .errors import ConfigurationError, DimensionError, TopologyError
from .model import LayerNormParams, ModelGraph, _check_gamma, forward, requantize_weights, slot_kind

LINEAR, RESIDUAL, OUTPUT = "linear", "residual", "output"
SUPPORTED = (LINEAR, RESIDUAL, OUTPUT)


@dataclass
class MigrationRecord:
    ln: str
    gamma: torch.Tensor
    absorbed: list = field(default_factory=list)  # weight tensor names
    shortcuts: list = field(default_factory=list)  # multiplier tensor names

    def to_dict(self) -> dict:
        return {"ln": self.ln, "gamma": self.gamma, "absorbed": list(self.absorbed), "shortcuts": list(self.shortcuts)}

    @classmethod
    def from_dict(cls, d: dict) -> "MigrationRecord":
        return cls(d["ln"], Q.as_tensor(d["gamma"]), list(d["absorbed"]), list(d["shortcuts"]))


def split_layernorm(p: LayerNormParams):
    """``(non-scaling params, gamma)``; the params carry ``gamma = 1``, ``beta / gamma``."""
    _check_gamma(p.gamma)
    ns = LayerNormParams(torch.ones_like(p.gamma), p.beta / p.gamma, p.epsilon)
    return ns, p.gamma.clone()


def absorb_gamma(w, gamma) -> torch.Tensor:
    """``W[i, j] * gamma[j]`` so that ``W (x * gamma) == W' x``."""
    w, gamma = Q.as_tensor(w), Q.as_tensor(gamma)
    if w.ndim != 2 or gamma.ndim != 1 or w.shape[1] != gamma.shape[0]:
        raise DimensionError(f"cannot absorb gamma of shape {tuple(gamma.shape)} into weight {tuple(w.shape)}")
    return w * gamma


def shortcut_gamma_apply(x, gamma) -> torch.Tensor:
    x, gamma = Q.as_tensor(x), Q.as_tensor(gamma)
    if gamma.ndim != 1 or x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"shortcut gamma of length {gamma.shape[0]} does not match last axis {x.shape[-1]}")
    return x * gamma


def ln_consumers(model: ModelGraph, ln: str) -> list:
    """``(kind, target)`` pairs fed by the LN output.

    ``linear`` targets are weight prefixes, ``residual`` / ``output`` targets
    are shortcut sites.
    """
    layer = int(ln.split(".")[1])
    if slot_kind(ln) == "MHA-LN":
        return [(LINEAR, f"layer.{layer}.ffn.intermediate"), (RESIDUAL, f"layer.{layer}.ffn")]
    if layer + 1 < model.n_layers:
        nxt = f"layer.{layer + 1}.attention"
        return [(LINEAR, f"{nxt}.query"), (LINEAR, f"{nxt}.key"), (LINEAR, f"{nxt}.value"), (RESIDUAL, nxt)]
    return [(OUTPUT, "output")]


Consumers = Callable[[ModelGraph, str], list]


def migrate(model: ModelGraph, consumers: Optional[Consumers] = None):
    """Rewrite every LayerNorm; returns ``(new model, records)``.

    The input model is left untouched.  If weight quantizers are already
    placed their params are re-derived from the absorbed weights; activation
    params of the LN slots are cleared because their input distribution changed.
    """
    if model.ln_mode != "scaling" or model.migration:
        raise ConfigurationError("model is already migrated (non-scaling LayerNorm); refusing to apply gamma twice")
    consumers = consumers or ln_consumers
    out = model.copy()
    records = []
    for ln in out.ln_names():
        fed = consumers(out, ln)
        bad = [(k, t) for k, t in fed if k not in SUPPORTED]
        if bad:
            raise TopologyError(f"{ln} feeds unsupported consumer(s) {bad}; only linear layers and shortcut adds can take gamma")
        ns, gamma = split_layernorm(out.ln_params(ln))
        out.set_ln_params(ln, ns)
        rec = MigrationRecord(ln, gamma)
        for kind, target in fed:
            if kind == LINEAR:
                name = f"{target}.weight"
                out.tensors[name] = absorb_gamma(out.tensors[name], gamma)
                rec.absorbed.append(name)
            else:
                name = f"{target}.shortcut.gamma"
                if name in out.tensors:
                    raise TopologyError(f"shortcut site {target!r} is fed by more than one LayerNorm")
                out.tensors[name] = gamma.clone()
                rec.shortcuts.append(name)
        records.append(rec)
    out.meta["ln_mode"] = "non-scaling"
    out.migration = [r.to_dict() for r in records]
    if out.quant_nodes:
        requantize_weights(out, [n for r in records for n in r.absorbed])
        for r in records:
            if r.ln in out.quant_nodes:
                out.quant_nodes[r.ln].params = None
    return out, records


def equivalence_report(original: ModelGraph, migrated: ModelGraph, ids) -> dict:
    """Max element-wise differences between the two fp forwards on ``ids``."""
    with torch.no_grad():
        a = forward(original, ids, mode="fp")
        b = forward(migrated, ids, mode="fp")
    diff = (a - b).abs()
    rel = diff / (a.abs() + 1e-12)
    noop = all(bool(torch.all(Q.as_tensor(r["gamma"]) == 1)) for r in migrated.migration)
    return {
        "max_rel_diff": float(rel.max()),
        "max_abs_diff": float(diff.max()),
        "n_sequences": int(np.asarray(ids).reshape(-1, a.shape[1]).shape[0]),
        "gamma_identity_noop": noop,
        "records": [
            {"ln": r["ln"], "absorbed": r["absorbed"], "shortcuts": r["shortcuts"]} for r in migrated.migration
        ],
    }
