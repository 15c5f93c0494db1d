"""Diagnostics: per-node quantization similarity, outlier structure, clipping
impact on the task metric and model-size accounting.

Per-node reports quantize one slot at a time against cached fp activations,
so errors do not compound across nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from . import quantizer as Q
from .calibration import PROBS, CalibrationSet, minmax_range, token_bounds
from .errors import ConfigurationError
from .model import EMBEDDING, LN_KINDS, ModelGraph, classify, forward, slot_kind

PROBLEM_THRESHOLD = 99.0

NODE_HEADER = ["rank", "slot", "kind", "similarity", "flagged"]
OUTLIER_HEADER = ["slot", "measure", "index", "value"]
SIZE_HEADER = ["setting", "weight_bits", "embedding_bits", "parameters", "megabytes", "ratio_to_fp32"]


def cosine_similarity(x, xq) -> float:
    """Cosine of the flattened tensors, in percent."""
    x, xq = Q.as_tensor(x).reshape(-1), Q.as_tensor(xq).reshape(-1)
    if x.shape != xq.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xq.shape)}")
    nx, nq = float(x.norm()), float(xq.norm())
    if nx == 0 or nq == 0:
        raise ValueError("cosine similarity of a zero-norm tensor is undefined")
    c = float(x @ xq) / (nx * nq)
    return 100.0 * min(1.0, max(-1.0, c))


@dataclass
class NodeReport:
    slot: str
    similarity: float
    flagged: bool

    @property
    def kind(self) -> str:
        return slot_kind(self.slot)


def minmax_similarity(x, bits: int, probs: bool = False) -> float:
    """Similarity between ``x`` and its MinMax fake-quantized version."""
    p = Q.params_from_range(minmax_range(x, probs), bits)
    return cosine_similarity(x, Q.fake_quant(x, p))


def rank_problematic_nodes(model: ModelGraph, calib: CalibrationSet, bits: int, threshold: float = PROBLEM_THRESHOLD) -> list:
    """Every activation slot ranked by similarity ascending (ties by name)."""
    acts = calib.cache(model).acts
    out = []
    for slot in model.slots():
        sim = minmax_similarity(acts[slot], bits, slot_kind(slot) == PROBS)
        out.append(NodeReport(slot, sim, sim < threshold))
    return sorted(out, key=lambda r: (r.similarity, r.slot))


def ln_output_similarity(original: ModelGraph, migrated: ModelGraph, calib: CalibrationSet, bits: int) -> list:
    """Per LN: MinMax similarity of the scaling output and of the non-scaling one.

    Rows are ``(ln, scaling, non_scaling)``.
    """
    if original.ln_mode != "scaling" or migrated.ln_mode != "non-scaling":
        raise ConfigurationError("expected an unmigrated and a migrated model")
    a, b = calib.cache(original).acts, calib.cache(migrated).acts
    return [(ln, minmax_similarity(a[ln], bits), minmax_similarity(b[ln], bits)) for ln in original.ln_names()]


def weight_similarity(model: ModelGraph, bits: int, names: Optional[Sequence[str]] = None) -> dict:
    """Symmetric per-channel MinMax similarity of each weight matrix."""
    names = list(names) if names is not None else model.weight_names()
    out = {}
    for name in names:
        w = model.tensors[name]
        out[name] = cosine_similarity(w, Q.fake_quant(w, Q.weight_params(w, bits)))
    return out


def clipped_token_fraction(x, clip: float) -> float:
    """Fraction of tokens with any element outside ``[-clip, clip]``."""
    ou, ol = token_bounds(x)
    return float(((ou > clip) | (ol < -clip)).double().mean())


def outlier_structure_report(x, clip_values: Sequence[float] = ()) -> dict:
    """Per-dim max |x|, per-token (min, max) and clipped-token fractions."""
    x = Q.as_tensor(x)
    if x.ndim < 2:
        raise ValueError("outlier report needs token and embedding axes")
    flat = x.reshape(-1, x.shape[-1])
    dim_max = flat.abs().amax(dim=0)
    ou, ol = token_bounds(flat)
    order = sorted(range(dim_max.shape[0]), key=lambda d: (-float(dim_max[d]), d))
    return {
        "dim_max_abs": dim_max,
        "dim_ranking": order,
        "token_upper": ou,
        "token_lower": ol,
        "clipped_fraction": [(float(c), clipped_token_fraction(flat, c)) for c in clip_values],
    }


def outlier_rows(model: ModelGraph, calib: CalibrationSet, kinds=LN_KINDS, clip_values=(), top: int = 8) -> list:
    """CSV rows for the LN slots: top dims, token-bound quantiles, clipped fractions."""
    acts = calib.cache(model).acts
    rows = []
    for slot in model.slots():
        if slot_kind(slot) not in kinds:
            continue
        rep = outlier_structure_report(acts[slot], clip_values)
        for d in rep["dim_ranking"][:top]:
            rows.append([slot, "dim_max_abs", d, f"{float(rep['dim_max_abs'][d]):.6g}"])
        su = torch.sort(rep["token_upper"]).values
        for q in (0.5, 0.9, 0.99, 1.0):
            rows.append([slot, "token_upper_quantile", q, f"{float(su[min(int(q * (len(su) - 1)), len(su) - 1)]):.6g}"])
        for c, frac in rep["clipped_fraction"]:
            rows.append([slot, "clipped_token_fraction", f"{c:g}", f"{frac:.6f}"])
    return rows


def _accuracy(logits: torch.Tensor, labels) -> float:
    return float(100.0 * np.mean(logits.argmax(dim=1).numpy() == np.asarray(labels)))


def clip_impact_sweep(model: ModelGraph, ids, labels, kind: str = "MHA-LN", clip_values: Sequence[float] = ()) -> list:
    """Task accuracy with every ``kind`` activation hard-clipped to ``[-c, c]``.

    Runs the fp model.  Each row is ``{clip, accuracy, drop, ratios}`` where
    ``ratios`` are per-layer fractions of tokens that had some element outside
    the clip range (measured on the tensor entering the clip).  ``c = inf`` is
    the unclipped baseline.
    """
    targets = [s for s in model.slots() if slot_kind(s) == kind]
    if not targets:
        raise ConfigurationError(f"no activation slots of kind {kind!r}")
    with torch.no_grad():
        base = _accuracy(classify(model, forward(model, ids, mode="fp"), ids), labels)
    rows = []
    for c in clip_values:
        c = float(c)
        counts = {s: [0, 0] for s in targets}

        def clip(slot, x):
            if slot not in counts:
                return None
            ou, ol = token_bounds(x)
            counts[slot][0] += int(((ou > c) | (ol < -c)).sum())
            counts[slot][1] += ou.shape[0]
            return x if math.isinf(c) else x.clamp(-c, c)

        with torch.no_grad():
            acc = _accuracy(classify(model, forward(model, ids, mode="fp", hook=clip), ids), labels)
        ratios = [counts[s][0] / counts[s][1] for s in targets]
        rows.append({"clip": c, "accuracy": acc, "drop": base - acc, "ratios": ratios})
    return rows


def sweep_header(model: ModelGraph) -> list:
    return ["clip", "accuracy", "drop"] + [f"clipped_ratio_layer{i}" for i in range(model.n_layers)]


def sweep_rows(rows: list) -> list:
    return [[f"{r['clip']:g}", f"{r['accuracy']:.2f}", f"{r['drop']:.2f}"] + [f"{v:.6f}" for v in r["ratios"]] for r in rows]


def ordinary_envelope(model: ModelGraph, calib: CalibrationSet, kind: str = "MHA-LN") -> float:
    """Largest |x| any ordinary (non-special) token reaches at the ``kind`` slots.

    Everything beyond it is carried by the special tokens alone.
    """
    acts = calib.cache(model).acts
    ordinary = torch.ones(calib.sequences.shape, dtype=torch.bool)
    for sid in model.special_ids:
        ordinary &= torch.as_tensor(calib.sequences != sid)
    out = 0.0
    for slot in model.slots():
        if slot_kind(slot) == kind:
            out = max(out, float(acts[slot][ordinary].abs().max()))
    return out


def parameter_counts(model: ModelGraph) -> dict:
    """Quantized parameter counts per class (weights and embedding)."""
    return {
        "weight": sum(model.tensors[n].numel() for n in model.weight_names()),
        "embedding": model.tensors[EMBEDDING].numel(),
    }


def model_size(model: ModelGraph, bits: Optional[dict] = None) -> float:
    """Megabytes of weight and embedding storage, ``sum(count * bits) / 8 / 2**20``."""
    if bits is None:
        if not model.quant_nodes:
            raise ConfigurationError("no bit-widths given and no quantization nodes placed")
        bits = {"weight": model.quant_nodes[model.weight_names()[0]].bits, "embedding": model.quant_nodes[EMBEDDING].bits}
    counts = parameter_counts(model)
    return sum(counts[k] * int(bits[k]) for k in counts) / 8 / 2**20


def size_rows(model: ModelGraph, settings=((32, 32), (8, 8), (6, 6), (4, 4), (2, 2))) -> list:
    fp = model_size(model, {"weight": 32, "embedding": 32})
    n = sum(parameter_counts(model).values())
    rows = []
    for wb, eb in settings:
        mb = model_size(model, {"weight": wb, "embedding": eb})
        rows.append([f"{wb}-{eb}", wb, eb, n, f"{mb:.6f}", f"{fp / mb:.4f}"])
    return rows
