"""JSON / CSV persistence.

Floats are written with 17 significant digits so every float64 round-trips
exactly; output is byte-stable for identical inputs (sorted-free, insertion
ordered keys, ``\\n`` line endings).
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .model import ModelGraph, QuantNode


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite float {v!r}")
    s = format(v, ".17g")
    if "e" not in s and "." not in s and "inf" not in s:
        s += ".0"
    return s


def _encode(obj, out: list) -> None:
    if isinstance(obj, torch.Tensor):
        obj = obj.detach().cpu().numpy()
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_fmt_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for j, (k, v) in enumerate(obj.items()):
            if j:
                out.append(",")
            out.append(json.dumps(str(k), ensure_ascii=False))
            out.append(":")
            _encode(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for j, v in enumerate(obj):
            if j:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    out: list = []
    _encode(obj, out)
    return "".join(out) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from None


def model_to_dict(model: ModelGraph) -> dict:
    meta = dict(model.meta)
    meta["mode"] = model.mode
    d = {
        "meta": meta,
        "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1)} for k, v in model.tensors.items()},
        "quant_nodes": [n.to_dict() for n in model.quant_nodes.values()],
    }
    if model.migration:
        d["migration"] = model.migration
    return d


def model_from_dict(d: dict) -> ModelGraph:
    try:
        meta = dict(d["meta"])
        mode = meta.pop("mode", "fp")
        tensors = {}
        for k, t in d["tensors"].items():
            arr = torch.tensor(t["data"], dtype=torch.float64)
            tensors[k] = arr.reshape(t["shape"])
        nodes = [QuantNode.from_dict(n) for n in d.get("quant_nodes", [])]
    except (KeyError, TypeError, RuntimeError) as e:
        raise ConfigurationError(f"malformed model document: {e}") from None
    for key in ("L", "n", "heads", "vocab"):
        if key not in meta:
            raise ConfigurationError(f"model meta is missing {key!r}")
    return ModelGraph(meta=meta, tensors=tensors, quant_nodes={n.slot: n for n in nodes}, migration=list(d.get("migration", [])), mode=mode)


def save_model(model: ModelGraph, path) -> None:
    write_json(path, model_to_dict(model))


def load_model(path) -> ModelGraph:
    return model_from_dict(read_json(path))


def write_csv(path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
