"""Activation calibration: Token-Wise Clipping and the baseline calibrators.

Every calibrator returns a :class:`CalibrationResult` holding QuantParams for
every activation slot.  Weights always use symmetric per-channel MinMax
(EasyQuant additionally rescales them).  Ranges are computed from cached fp
activations of the calibration set; losses compare against cached fp outputs.

AttentionProbs ranges are pinned to ``[0, upper]`` in every method.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import quantizer as Q
from .errors import CalibrationError, ConfigurationError, DegenerateRangeError, NumericalError
from .model import EMBEDDING, INPUT_SLOT, ModelGraph, bits_of, forward, place_quant_nodes, slot_kind, slot_name

METHODS = ("minmax", "omse", "percentile", "easyquant", "twc")
PROBS = "AttentionProbs"


# ---------------------------------------------------------------- data ----


class ActivationCache:
    """fp activations of every slot plus the fp encoder output (write-once)."""

    def __init__(self, acts: dict, output: torch.Tensor):
        self.acts = acts
        self.output = output
        self._sorted_bounds = {}

    def sorted_bounds(self, slot: str):
        if slot not in self._sorted_bounds:
            ou, ol = token_bounds(self.acts[slot])
            self._sorted_bounds[slot] = (torch.sort(ou).values, torch.sort(ol).values)
        return self._sorted_bounds[slot]


@dataclass
class CalibrationSet:
    sequences: np.ndarray
    batch_size: int = 32
    _caches: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2 or self.sequences.shape[0] < 1:
            raise ConfigurationError("calibration set needs at least one sequence of shape (T,)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    @classmethod
    def from_data(cls, data: dict, split: str = "calibration", batch_size: Optional[int] = None) -> "CalibrationSet":
        try:
            seqs = data[split]["sequences"]
        except (KeyError, TypeError):
            raise ConfigurationError(f"data document has no {split!r} sequences") from None
        bs = batch_size or int(data.get("meta", {}).get("batch_size", 32))
        return cls(np.asarray(seqs), bs)

    def __len__(self) -> int:
        return int(self.sequences.shape[0])

    def batches(self):
        for i in range(0, len(self), self.batch_size):
            yield self.sequences[i : i + self.batch_size]

    def cache(self, model: ModelGraph) -> ActivationCache:
        """fp activations for ``model``; computed once per model object."""
        key = id(model)
        hit = self._caches.get(key)
        if hit is not None and hit[0] is model:
            return hit[1]
        per_slot: dict = {}
        outs = []
        with torch.no_grad():
            for ids in self.batches():
                outs.append(forward(model, ids, mode="fp", hook=lambda s, x: per_slot.setdefault(s, []).append(x)))
        acts = {s: torch.cat(xs) for s, xs in per_slot.items()}
        cache = ActivationCache(acts, torch.cat(outs))
        self._caches[key] = (model, cache)
        return cache


@dataclass
class ClipSearchConfig:
    iterations: int = 30
    ratio_step: float = 0.01
    lr: float = 1e-5
    epochs: int = 3
    max_backtracks: int = 20
    prune: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not self.ratio_step >= 0 or 1 - self.ratio_step * (self.iterations - 1) <= 0:
            raise ConfigurationError("ratio schedule must stay inside (0, 1]")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be > 0")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.max_backtracks < 0:
            raise ConfigurationError("max_backtracks must be >= 0")

    def alphas(self) -> list:
        return [1.0 - self.ratio_step * k for k in range(self.iterations)]


@dataclass
class CalibrationResult:
    method: str
    params: dict
    alpha: Optional[float] = None
    loss: Optional[float] = None
    trace: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    weight_params: dict = field(default_factory=dict)

    def complete_for(self, model: ModelGraph) -> bool:
        return all(self.params.get(s) is not None for s in model.slots())

    def to_dict(self, model: Optional[ModelGraph] = None) -> dict:
        slots = {}
        for slot, p in self.params.items():
            d = p.to_dict()
            slots[slot] = {
                "bits": d["bits"],
                "step": d["step"],
                "zero_point": d["zero_point"],
                "method": self.method,
                "alpha": self.alpha,
                "loss": self.loss,
            }
        weights = {name: p.to_dict() for name, p in self.weight_params.items()}
        meta = {"method": self.method, "alpha": self.alpha, "loss": self.loss, "timing": dict(self.timing)}
        if model is not None:
            meta["ln_mode"] = model.ln_mode
            meta["bits"] = bits_of(model)
        return {"meta": meta, "slots": slots, "weights": weights}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        try:
            meta = d["meta"]
            params = {}
            for slot, s in d["slots"].items():
                params[slot] = Q.QuantParams(bits=int(s["bits"]), step=float(s["step"]), zero_point=int(s["zero_point"]))
            weights = {name: Q.QuantParams.from_dict(w) for name, w in d.get("weights", {}).items()}
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed calibration document: {e}") from None
        return cls(meta["method"], params, meta.get("alpha"), meta.get("loss"), timing=dict(meta.get("timing", {})), weight_params=weights)

    def apply(self, model: ModelGraph) -> ModelGraph:
        model.set_activation_params(self.params)
        if self.weight_params:
            model.set_weight_params(self.weight_params)
        return model

    def trace_rows(self) -> list:
        keys = ("stage", "index", "alpha", "epoch", "loss", "accepted", "lr")
        return [[self.method] + [r.get(k, "") for k in keys] for r in self.trace]


TRACE_HEADER = ["method", "stage", "index", "alpha", "epoch", "loss", "accepted", "lr"]
TIMING_HEADER = ["method", "stage", "seconds"]


# ---------------------------------------------------------- primitives ----


def token_bounds(x) -> tuple:
    """Per-token max and min over the last axis; other axes become the token list."""
    x = Q.as_tensor(x)
    if x.numel() == 0 or x.ndim == 0:
        raise ValueError("token_bounds needs a non-empty tensor with an embedding axis")
    flat = x.reshape(-1, x.shape[-1])
    return flat.amax(dim=1), flat.amin(dim=1)


def quantile_sorted(s: torch.Tensor, q: float) -> float:
    """Linear interpolation between order statistics of an ascending tensor."""
    if not 0 <= q <= 1:
        raise ValueError(f"quantile level must be in [0, 1], got {q}")
    n = s.shape[0]
    pos = (n - 1) * q
    lo = min(int(math.floor(pos)), n - 1)
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    a, b = float(s[lo]), float(s[hi])
    return a + frac * (b - a)


def quantile(values, q: float) -> float:
    return quantile_sorted(torch.sort(Q.as_tensor(values).reshape(-1)).values, q)


def clip_from_ratio(o_upper, o_lower, alpha: float, lower_fixed: Optional[float] = None) -> Q.ClipRange:
    """``upper = quantile(o_upper, alpha)``, ``lower = quantile(o_lower, 1 - alpha)``."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    su = torch.sort(Q.as_tensor(o_upper).reshape(-1)).values
    upper = quantile_sorted(su, alpha)
    if lower_fixed is not None:
        lower = float(lower_fixed)
    else:
        lower = quantile_sorted(torch.sort(Q.as_tensor(o_lower).reshape(-1)).values, 1.0 - alpha)
    return Q.ClipRange(lower, upper)


def range_at(bounds: tuple, alpha: float) -> Q.ClipRange:
    """Clip range from ascending token bounds ``(upper, lower)``; ``lower=None`` pins 0."""
    su, sl = bounds
    upper = quantile_sorted(su, alpha)
    lower = 0.0 if sl is None else quantile_sorted(sl, 1.0 - alpha)
    return Q.ClipRange(lower, upper)


def _slot_bounds(cache: ActivationCache, slots) -> dict:
    out = {}
    for slot in slots:
        su, sl = cache.sorted_bounds(slot)
        out[slot] = (su, None if slot_kind(slot) == PROBS else sl)
    return out


def _act_bits(model: ModelGraph) -> int:
    nodes = [model.quant_nodes[s] for s in model.slots() if s in model.quant_nodes]
    if not nodes:
        raise ConfigurationError("model has no activation quantization nodes; run place_quant_nodes first")
    return nodes[0].bits


def quant_loss(model: ModelGraph, calib: CalibrationSet, params: Optional[dict] = None, *, disabled=(), act_quant=None, weight_cache=None) -> float:
    """``||f_hat - f||_F^2`` over the calibration set (encoder output, pre-head)."""
    return _bounded_loss(model, calib, params, disabled=disabled, act_quant=act_quant, weight_cache=weight_cache)[0]


def _bounded_loss(model, calib, params, *, bound=math.inf, ties_pass=False, disabled=(), act_quant=None, weight_cache=None):
    """``(loss, complete)``; stops early once the partial sum reaches ``bound``
    (exceeds it, with ``ties_pass``)."""
    f = calib.cache(model).output
    total = 0.0
    row = 0
    wc = {} if weight_cache is None else weight_cache
    with torch.no_grad():
        for ids in calib.batches():
            fq = forward(model, ids, mode="quant", act_params=params, disabled=disabled, act_quant=act_quant, weight_cache=wc)
            ref = f[row : row + fq.shape[0]]
            total += float(((fq - ref) ** 2).sum())
            row += fq.shape[0]
            over = total > bound if ties_pass else total >= bound
            if over and row < len(calib):
                return total, False
    return total, True


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -------------------------------------------------------- token-wise ----


def grid_search(bounds: dict, evaluate, alphas, bits: int, prune: bool = True):
    """Shared-alpha grid: every slot clips at the same token-bound quantile.

    ``bounds`` maps slot -> ascending ``(upper, lower)`` token bounds (lower
    ``None`` pins it to 0).  ``evaluate(params, bound)`` returns
    ``(loss, complete)`` and may stop early once the loss reaches ``bound``.
    Returns ``(params, loss, alpha, trace)``; ties keep the first alpha.
    """
    best, best_loss, best_alpha = None, math.inf, None
    trace, skipped = [], []
    for k, alpha in enumerate(alphas):
        params, bad = {}, None
        for slot, b in bounds.items():
            try:
                params[slot] = Q.params_from_range(range_at(b, alpha), bits)
            except DegenerateRangeError:
                bad = slot
                break
        if bad is not None:
            skipped.append((alpha, bad))
            trace.append({"stage": "coarse", "index": k, "alpha": alpha, "loss": "", "accepted": "degenerate"})
            continue
        loss, complete = evaluate(params, best_loss if prune else math.inf)
        if not complete:
            trace.append({"stage": "coarse", "index": k, "alpha": alpha, "loss": "", "accepted": "pruned"})
            continue
        better = loss < best_loss
        trace.append({"stage": "coarse", "index": k, "alpha": alpha, "loss": loss, "accepted": int(better)})
        if better:
            best, best_loss, best_alpha = params, loss, alpha
    if best is None:
        detail = ", ".join(f"alpha={a:.2f} at {s}" for a, s in skipped[:5])
        raise CalibrationError(f"every coarse candidate had a degenerate clip range ({detail})")
    return best, best_loss, best_alpha, trace


def coarse_search(model: ModelGraph, calib: CalibrationSet, cfg: Optional[ClipSearchConfig] = None) -> CalibrationResult:
    """Grid over ``alpha_k = 1 - 0.01 k``; one alpha shared by every slot.

    Ties keep the first (largest) alpha.  Candidates where some slot's range is
    degenerate are skipped.  With ``cfg.prune`` a candidate stops being
    evaluated once its partial loss (a sum of non-negative batch terms) reaches
    the best loss so far; it could not win, so the result is unchanged and its
    trace row reads ``pruned`` with an empty loss.
    """
    cfg = cfg or ClipSearchConfig()
    bits = _act_bits(model)
    cache = calib.cache(model)
    t0 = time.perf_counter()
    wc: dict = {}
    bounds = _slot_bounds(cache, model.slots())

    def evaluate(params, bound):
        return _bounded_loss(model, calib, params, bound=bound, weight_cache=wc)

    best, loss, alpha, trace = grid_search(bounds, evaluate, cfg.alphas(), bits, cfg.prune)
    return CalibrationResult("twc", best, alpha, loss, trace, {"coarse": time.perf_counter() - t0})


def _loss_and_grad(model, calib, steps: dict, zps: dict, bits: int, wc: dict):
    """Loss and dL/ds for every slot using straight-through fake quant."""
    placeholder = {s: Q.QuantParams(bits=bits, step=1.0, zero_point=zps[s]) for s in steps}
    f = calib.cache(model).output
    for s in steps.values():
        s.grad = None

    def act_quant(slot, x, _p):
        return Q.fake_quant_ste(x, Q.QuantParams(bits=bits, step=steps[slot], zero_point=zps[slot]))

    total = 0.0
    row = 0
    for ids in calib.batches():
        fq = forward(model, ids, mode="quant", act_params=placeholder, act_quant=act_quant, weight_cache=wc)
        ref = f[row : row + fq.shape[0]]
        loss = ((fq - ref) ** 2).sum()
        loss.backward()
        total += float(loss.detach())
        row += fq.shape[0]
    grads = {}
    for slot, s in steps.items():
        g = s.grad
        if g is None:
            g = torch.zeros((), dtype=torch.float64)
        if not bool(torch.isfinite(g)):
            raise NumericalError(f"non-finite step-size gradient at slot {slot}")
        grads[slot] = g.detach().clone()
    return total, grads


def step_gradients(model: ModelGraph, calib: CalibrationSet, params: dict) -> tuple:
    """``(L, {slot: dL/ds})`` at ``params`` under the straight-through convention."""
    bits = _act_bits(model)
    steps = {s: torch.tensor(float(p.step), dtype=torch.float64, requires_grad=True) for s, p in params.items()}
    zps = {s: int(p.zero_point) for s, p in params.items()}
    loss, grads = _loss_and_grad(model, calib, steps, zps, bits, {})
    return loss, {s: float(g) for s, g in grads.items()}


def descend(steps: dict, loss_and_grad, loss_at, lr: float, epochs: int, max_backtracks: int = 20):
    """Gradient descent on step sizes with a reject-and-halve safeguard.

    ``loss_and_grad(steps) -> (L, grads)``; ``loss_at(steps, bound) ->
    (L, complete)`` may stop early once L exceeds ``bound``.  One step per
    epoch; a step that raises L (or makes a step size non-positive) is
    rejected, the rate halved and the step retried, at most ``max_backtracks``
    times.  The halved rate carries over.  Returns ``(steps, L, trace)``.
    """
    loss, grads = loss_and_grad(steps)
    trace = [{"stage": "fine", "index": 0, "epoch": 0, "loss": loss, "accepted": 1, "lr": ""}]
    for epoch in range(1, epochs + 1):
        accepted = False
        for tries in range(max_backtracks + 1):
            cand = {s: steps[s] - lr * grads[s] for s in steps}
            if min(cand.values()) > 0:
                new_loss, complete = loss_at(cand, loss)
                if complete and new_loss <= loss:
                    accepted = True
                    break
            lr /= 2
        if accepted:
            steps = cand
            if epoch < epochs:
                loss, grads = loss_and_grad(steps)
            else:
                loss = new_loss
        trace.append({"stage": "fine", "index": tries, "epoch": epoch, "loss": loss, "accepted": int(accepted), "lr": lr})
    return steps, loss, trace


def fine_tune(model: ModelGraph, calib: CalibrationSet, init: CalibrationResult, cfg: Optional[ClipSearchConfig] = None) -> CalibrationResult:
    """Full-batch gradient descent on every activation step; zero points frozen.

    See :func:`descend` for the safeguard; the accepted loss never increases.
    """
    cfg = cfg or ClipSearchConfig()
    bits = _act_bits(model)
    t0 = time.perf_counter()
    zps = {s: int(p.zero_point) for s, p in init.params.items()}
    wc: dict = {}

    def as_params(steps):
        return {s: Q.QuantParams(bits=bits, step=v, zero_point=zps[s]) for s, v in steps.items()}

    def loss_and_grad(steps):
        leaves = {s: torch.tensor(v, dtype=torch.float64, requires_grad=True) for s, v in steps.items()}
        loss, grads = _loss_and_grad(model, calib, leaves, zps, bits, wc)
        return loss, {s: float(g) for s, g in grads.items()}

    def loss_at(steps, bound):
        return _bounded_loss(model, calib, as_params(steps), bound=bound, ties_pass=True, weight_cache=wc)

    start = {s: float(p.step) for s, p in init.params.items()}
    steps, loss, trace = descend(start, loss_and_grad, loss_at, cfg.lr, cfg.epochs, cfg.max_backtracks)
    timing = dict(init.timing)
    timing["fine"] = time.perf_counter() - t0
    return CalibrationResult("twc", as_params(steps), init.alpha, loss, list(init.trace) + trace, timing)


def twc_calibrate(model: ModelGraph, calib: CalibrationSet, cfg: Optional[ClipSearchConfig] = None) -> CalibrationResult:
    cfg = cfg or ClipSearchConfig()
    coarse = coarse_search(model, calib, cfg)
    if cfg.epochs == 0:
        return coarse
    return fine_tune(model, calib, coarse, cfg)


# ----------------------------------------------------------- baselines ----


def minmax_range(x, probs: bool = False) -> Q.ClipRange:
    x = Q.as_tensor(x)
    lo, hi = float(x.min()), float(x.max())
    if probs:
        lo = 0.0
    if not hi > lo:
        raise DegenerateRangeError(f"constant activation (min = max = {hi}); widen by machine epsilon or drop the quantizer")
    return Q.ClipRange(lo, hi)


def _finish(model, calib, method, params, timing, trace=None, alpha=None, weight_params=None) -> CalibrationResult:
    wp = weight_params or {}
    wc: dict = {}
    if wp:
        saved = {n: model.quant_nodes[n].params for n in wp}
        model.set_weight_params(wp)
        try:
            loss = quant_loss(model, calib, params, weight_cache=wc)
        finally:
            model.set_weight_params(saved)
    else:
        loss = quant_loss(model, calib, params, weight_cache=wc)
    trace = list(trace or [])
    trace.append({"stage": "final", "loss": loss})
    return CalibrationResult(method, params, alpha, loss, trace, timing, wp)


def minmax_params(model: ModelGraph, calib: CalibrationSet, bits: Optional[int] = None) -> dict:
    bits = bits or _act_bits(model)
    cache = calib.cache(model)
    out = {}
    for slot in model.slots():
        try:
            out[slot] = Q.params_from_range(minmax_range(cache.acts[slot], slot_kind(slot) == PROBS), bits)
        except DegenerateRangeError as e:
            raise DegenerateRangeError(f"{slot}: {e}") from None
    return out


def minmax_calibrate(model: ModelGraph, calib: CalibrationSet) -> CalibrationResult:
    params, dt = _timed(lambda: minmax_params(model, calib))
    return _finish(model, calib, "minmax", params, {"search": dt})


def local_mse(x: torch.Tensor, r: Q.ClipRange, bits: int) -> float:
    return float(((Q.fake_quant(x, Q.params_from_range(r, bits)) - x) ** 2).sum())


def _shrunk(r: Q.ClipRange, f: float) -> Q.ClipRange:
    return Q.ClipRange(float(r.lower) * f, float(r.upper) * f)


def omse_slot(x: torch.Tensor, r: Q.ClipRange, bits: int, search: str = "grid", points: int = 30, tol: float = 1e-3):
    """Shrink factor in ``(0, 1]`` of the MinMax range minimizing local MSE.

    Returns ``(factor, mse, evaluations)``.  Grid mode tries ``k / points``;
    golden-section mode searches the same interval down to ``tol`` relative width.
    """
    fmin = 1.0 / points

    def mse(f):
        try:
            return local_mse(x, _shrunk(r, f), bits)
        except DegenerateRangeError:
            return math.inf

    if search == "grid":
        best_f, best = 1.0, math.inf
        for k in range(points, 0, -1):  # f = 1 first, so ties keep the wider range
            f = k / points
            v = mse(f)
            if v < best:
                best_f, best = f, v
        return best_f, best, points
    if search == "golden":
        inv = (math.sqrt(5) - 1) / 2
        a, b = fmin, 1.0
        c, d = b - inv * (b - a), a + inv * (b - a)
        fc, fd = mse(c), mse(d)
        evals = 2
        while (b - a) > tol * b:
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - inv * (b - a)
                fc = mse(c)
            else:
                a, c, fc = c, d, fd
                d = a + inv * (b - a)
                fd = mse(d)
            evals += 1
        cands = [(fc, c), (fd, d), (mse(1.0), 1.0)]
        v, f = min(cands)
        return f, v, evals + 1
    raise ConfigurationError(f"unknown OMSE search {search!r}; use 'grid' or 'golden'")


def omse_calibrate(model: ModelGraph, calib: CalibrationSet, search: str = "grid", points: int = 30) -> CalibrationResult:
    bits = _act_bits(model)
    cache = calib.cache(model)
    t0 = time.perf_counter()
    params, trace = {}, []
    for slot in model.slots():
        x = cache.acts[slot]
        r = minmax_range(x, slot_kind(slot) == PROBS)
        f, v, evals = omse_slot(x, r, bits, search, points)
        params[slot] = Q.params_from_range(_shrunk(r, f), bits)
        trace.append({"stage": f"omse-{search}:{slot}", "index": evals, "alpha": f, "loss": v})
    return _finish(model, calib, "omse", params, {f"search-{search}": time.perf_counter() - t0}, trace)


def percentile_range(x, ratio: float, bins: int = 2048, probs: bool = False) -> Q.ClipRange:
    """Two-sided value percentile from a histogram over the MinMax range."""
    if not 0 < ratio <= 1:
        raise ValueError(f"percentile ratio must be in (0, 1], got {ratio}")
    x = Q.as_tensor(x).reshape(-1)
    r = minmax_range(x, probs)
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateRangeError("constant activation")
    counts = torch.histc(x, bins=bins, min=lo, max=hi)
    width = (hi - lo) / bins
    cum = torch.cumsum(counts, 0)
    total = float(cum[-1])

    def at(level):
        target = level * total
        i = int(torch.searchsorted(cum, torch.tensor(target, dtype=cum.dtype)))
        i = min(i, bins - 1)
        before = float(cum[i - 1]) if i > 0 else 0.0
        c = float(counts[i])
        frac = 0.0 if c == 0 else (target - before) / c
        return lo + (i + min(max(frac, 0.0), 1.0)) * width

    upper = at(ratio)
    lower = 0.0 if probs else at(1.0 - ratio)
    if ratio == 1.0:
        upper, lower = float(r.upper), float(r.lower)
    return Q.ClipRange(lower, upper)


def percentile_calibrate(model: ModelGraph, calib: CalibrationSet, ratio: float = 0.999, bins: int = 2048) -> CalibrationResult:
    if not 0 < ratio <= 1:
        raise ConfigurationError(f"percentile ratio must be in (0, 1), got {ratio}")
    bits = _act_bits(model)
    cache = calib.cache(model)
    t0 = time.perf_counter()
    params = {}
    for slot in model.slots():
        params[slot] = Q.params_from_range(percentile_range(cache.acts[slot], ratio, bins, slot_kind(slot) == PROBS), bits)
    return _finish(model, calib, "percentile", params, {"search": time.perf_counter() - t0}, alpha=ratio)


# ------------------------------------------------------------ EasyQuant ----


def _layer_input(i: int) -> str:
    return INPUT_SLOT if i == 0 else slot_name(i - 1, "FFN-LN")


def matmul_sites(model: ModelGraph) -> list:
    """``(kind, operand_a, operand_b)`` for every matmul.

    Linear sites pair an activation slot with a weight; ``qk`` and ``pv`` sites
    pair two activation slots.
    """
    sites = []
    for i in range(model.n_layers):
        pre = f"layer.{i}"
        for lin in ("query", "key", "value"):
            sites.append(("linear", _layer_input(i), f"{pre}.attention.{lin}.weight"))
        sites.append(("qk", slot_name(i, "Query"), slot_name(i, "Key")))
        sites.append(("pv", slot_name(i, "AttentionProbs"), slot_name(i, "Value")))
        sites.append(("linear", slot_name(i, "Context"), f"{pre}.attention.output.weight"))
        sites.append(("linear", slot_name(i, "MHA-LN"), f"{pre}.ffn.intermediate.weight"))
        sites.append(("linear", slot_name(i, "GELU"), f"{pre}.ffn.output.weight"))
    return sites


def _heads(x: torch.Tensor, h: int) -> torch.Tensor:
    b, t, n = x.shape
    return x.reshape(b, t, h, n // h).transpose(1, 2)


def _cos(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if na == 0 or nb == 0:
        return 0.0
    return float((a * b).sum()) / (na * nb)


class _SiteEval:
    def __init__(self, model, acts, sites):
        self.model, self.acts, self.sites = model, acts, sites
        self.ref = [self._out(s, acts[s[1]], self._b_fp(s)) for s in sites]

    def _b_fp(self, site):
        kind, _, b = site
        return self.model.tensors[b] if kind == "linear" else self.acts[b]

    def _out(self, site, a, b):
        kind = site[0]
        if kind == "linear":
            return a @ b.T
        h = self.model.heads
        if kind == "qk":
            return _heads(a, h) @ _heads(b, h).transpose(-1, -2)
        return a @ _heads(b, h)

    def cos(self, j, a_q, b_q) -> float:
        return _cos(self.ref[j], self._out(self.sites[j], a_q, b_q))


def easyquant_calibrate(
    model: ModelGraph,
    calib: CalibrationSet,
    rounds: int = 3,
    candidates: int = 10,
    span=(0.5, 1.2),
    max_sequences: Optional[int] = 64,
) -> CalibrationResult:
    """Alternating per-quantizer scale search on matmul-output cosine similarity.

    Starting from MinMax, each round visits every weight quantizer and then
    every activation quantizer, tries ``candidates`` multipliers of its current
    step in ``span`` and keeps the best only if it improves the summed cosine
    of the matmuls it feeds.  The last FFN-LN feeds no matmul and uses
    ``cos(x, fq(x))``.  The search runs on the first ``max_sequences``
    calibration sequences; the reported loss uses the full set.
    """
    bits = _act_bits(model)
    cache = calib.cache(model)
    t0 = time.perf_counter()
    m = slice(None) if max_sequences is None else slice(0, max_sequences)
    acts = {s: cache.acts[s][m] for s in model.slots()}
    sites = matmul_sites(model)
    ev = _SiteEval(model, acts, sites)
    act_range = {s: minmax_range(acts[s], slot_kind(s) == PROBS) for s in model.slots()}
    act_scale = {s: 1.0 for s in model.slots()}
    wnames = [s[2] for s in sites if s[0] == "linear"]
    w_step = {w: Q.as_tensor(model.quant_nodes[w].params.step).clone() for w in wnames}
    wbits = {w: model.quant_nodes[w].bits for w in wnames}

    def act_p(s, f=None):
        return Q.params_from_range(_shrunk(act_range[s], act_scale[s] if f is None else f), bits)

    def wq(w, step=None):
        st = w_step[w] if step is None else step
        return Q.fake_quant(model.tensors[w], Q.QuantParams(wbits[w], st, np.full(st.shape, Q.symmetric_zero_point(wbits[w])), Q.SYMMETRIC, 0))

    aq_cache = {}

    def aq(s):
        if s not in aq_cache:
            aq_cache[s] = Q.fake_quant(acts[s], act_p(s))
        return aq_cache[s]

    by_slot = {s: [] for s in model.slots()}
    by_weight = {}
    for j, (kind, a, b) in enumerate(sites):
        by_slot[a].append((j, "a"))
        if kind == "linear":
            by_weight[b] = j
        else:
            by_slot[b].append((j, "b"))
    wq_cache = {w: wq(w) for w in wnames}

    def operands(j, override=None):
        kind, a, b = sites[j]
        av = aq(a)
        bv = wq_cache[b] if kind == "linear" else aq(b)
        if override is not None:
            who, val = override
            if who == "a":
                av = val
            else:
                bv = val
        return av, bv

    def slot_obj(s, xq=None):
        uses = by_slot[s]
        if not uses:
            x = acts[s]
            return _cos(x, aq(s) if xq is None else xq)
        return sum(ev.cos(j, *operands(j, None if xq is None else (side, xq))) for j, side in uses)

    factors = np.linspace(span[0], span[1], candidates)
    trace = []
    for rnd in range(rounds):
        accepted = 0
        for w in wnames:
            j = by_weight[w]
            cur = ev.cos(j, *operands(j))
            best, best_step = cur, None
            for f in factors:
                st = w_step[w] * float(f)
                v = ev.cos(j, *operands(j, ("b", wq(w, st))))
                if v > best:
                    best, best_step = v, st
            if best_step is not None:
                w_step[w] = best_step
                wq_cache[w] = wq(w)
                accepted += 1
        for s in model.slots():
            cur = slot_obj(s)
            best, best_f = cur, None
            for f in factors:
                cand = act_scale[s] * float(f)
                try:
                    xq = Q.fake_quant(acts[s], act_p(s, cand))
                except DegenerateRangeError:
                    continue
                v = slot_obj(s, xq)
                if v > best:
                    best, best_f = v, cand
            if best_f is not None:
                act_scale[s] = best_f
                aq_cache.pop(s, None)
                accepted += 1
        total = sum(ev.cos(j, *operands(j)) for j in range(len(sites)))
        trace.append({"stage": "easyquant", "index": rnd, "loss": total, "accepted": accepted})
    params = {s: act_p(s) for s in model.slots()}
    weight_params = {
        w: Q.QuantParams(wbits[w], w_step[w].numpy().copy(), np.full(w_step[w].shape, Q.symmetric_zero_point(wbits[w]), dtype=np.int64), Q.SYMMETRIC, 0)
        for w in wnames
    }
    return _finish(model, calib, "easyquant", params, {"search": time.perf_counter() - t0}, trace, weight_params=weight_params)


# -------------------------------------------------------------- driver ----


def ensure_placed(model: ModelGraph, bits: Optional[dict] = None) -> ModelGraph:
    if not model.quant_nodes:
        if bits is None:
            raise ConfigurationError("model has no quantization nodes and no bit-widths were given")
        place_quant_nodes(model, bits)
    return model


def calibrate(
    model: ModelGraph,
    calib: CalibrationSet,
    method: str,
    cfg: Optional[ClipSearchConfig] = None,
    *,
    percentile_ratio: float = 0.999,
    omse_search: str = "grid",
    easyquant_rounds: int = 3,
) -> CalibrationResult:
    """Run one calibrator; the model must already carry quantization nodes."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "minmax":
        return minmax_calibrate(model, calib)
    if method == "omse":
        return omse_calibrate(model, calib, omse_search, (cfg or ClipSearchConfig()).iterations)
    if method == "percentile":
        return percentile_calibrate(model, calib, percentile_ratio)
    if method == "easyquant":
        return easyquant_calibrate(model, calib, easyquant_rounds)
    return twc_calibrate(model, calib, cfg)
