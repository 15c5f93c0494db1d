"""Uniform affine fake quantization.

Integer codes live on the unsigned grid ``[0, 2**bits - 1]``.  Activations use
asymmetric per-tensor parameters; weights use a symmetric per-channel grid whose
zero point is pinned at ``2**(bits-1) - 1`` so the codes stay unsigned.

Rounding is ``torch.round`` (half to even) and everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .errors import DegenerateRangeError, DimensionError

ASYMMETRIC = "asymmetric-per-tensor"
SYMMETRIC = "symmetric-per-channel"
SCHEMES = (ASYMMETRIC, SYMMETRIC)

ArrayLike = Union[float, np.ndarray, torch.Tensor]


def as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def qmax(bits: int) -> int:
    return (1 << bits) - 1


def symmetric_zero_point(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass
class ClipRange:
    lower: ArrayLike
    upper: ArrayLike

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, dtype=np.float64), np.asarray(self.upper, dtype=np.float64)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError(f"clip range must be finite, got ({self.lower}, {self.upper})")
        if np.any(hi <= lo):
            raise DegenerateRangeError(
                f"degenerate clip range ({self.lower}, {self.upper}); widen it (e.g. by machine epsilon) before quantizing"
            )


@dataclass
class QuantParams:
    """Parameters of one quantizer.

    ``step`` / ``zero_point`` are scalars for the per-tensor scheme and vectors
    over ``axis`` for the per-channel scheme.  ``step`` may be a torch tensor
    with ``requires_grad`` while step sizes are being learned.
    """

    bits: int
    step: ArrayLike
    zero_point: ArrayLike
    scheme: str = ASYMMETRIC
    axis: int = 0

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        step = self.step.detach() if isinstance(self.step, torch.Tensor) else np.asarray(self.step, dtype=np.float64)
        if not bool(np.all(np.asarray(step) > 0)):
            raise ValueError("step must be positive element-wise")
        zp = np.asarray(self.zero_point)
        if np.any(zp < 0) or np.any(zp > qmax(self.bits)) or np.any(zp != np.round(zp)):
            raise ValueError(f"zero_point must be an integer in [0, {qmax(self.bits)}]")
        if self.scheme == SYMMETRIC and np.any(zp != symmetric_zero_point(self.bits)):
            raise ValueError("symmetric-per-channel requires zero_point = 2**(bits-1) - 1")

    @property
    def per_channel(self) -> bool:
        return self.scheme == SYMMETRIC and np.ndim(_detached(self.step)) > 0

    def to_dict(self) -> dict:
        step, zp = _detached(self.step), np.asarray(self.zero_point)
        return {
            "scheme": self.scheme,
            "bits": int(self.bits),
            "step": np.asarray(step, dtype=np.float64).tolist(),
            "zero_point": zp.astype(np.int64).tolist(),
            "axis": int(self.axis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        step, zp = d["step"], d["zero_point"]
        if isinstance(step, list):
            step = np.asarray(step, dtype=np.float64)
            zp = np.asarray(zp, dtype=np.int64)
        return cls(bits=int(d["bits"]), step=step, zero_point=zp, scheme=d["scheme"], axis=int(d.get("axis", 0)))


def _detached(v):
    if isinstance(v, torch.Tensor):
        return v.detach().cpu().numpy()
    return v


def _broadcast(v: ArrayLike, x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    t = v if isinstance(v, torch.Tensor) else as_tensor(v)
    t = t.to(torch.float64)
    if t.ndim == 0:
        return t
    axis = p.axis % x.ndim
    if t.ndim != 1 or t.shape[0] != x.shape[axis]:
        raise DimensionError(
            f"per-channel parameter of shape {tuple(t.shape)} does not match axis {axis} of tensor {tuple(x.shape)}"
        )
    shape = [1] * x.ndim
    shape[axis] = -1
    return t.reshape(shape)


def quantize(x: ArrayLike, p: QuantParams) -> torch.Tensor:
    """Integer codes ``clip(round(x / s) + z, 0, 2**b - 1)`` (float64 storage)."""
    x = as_tensor(x)
    s, z = _broadcast(p.step, x, p), _broadcast(p.zero_point, x, p)
    return torch.clamp(torch.round(x / s) + z, 0, qmax(p.bits))


def dequantize(q: ArrayLike, p: QuantParams) -> torch.Tensor:
    q = as_tensor(q)
    s, z = _broadcast(p.step, q, p), _broadcast(p.zero_point, q, p)
    return (q - z) * s


def fake_quant(x: ArrayLike, p: QuantParams) -> torch.Tensor:
    """``dequantize(quantize(x, p), p)`` in four passes.

    ``clip(round(x/s) + z, 0, qmax) - z == clip(round(x/s), -z, qmax - z)``
    holds exactly for the small integers involved.
    """
    x = as_tensor(x)
    s, z = _broadcast(p.step, x, p), _broadcast(p.zero_point, x, p)
    r = torch.round(x / s)
    if z.ndim == 0:
        zf = float(z)
        r.clamp_(-zf, qmax(p.bits) - zf)
    else:
        r = torch.clamp(r, -z, qmax(p.bits) - z)
    return r.mul_(s)


def params_from_range(r: ClipRange, bits: int, scheme: str = ASYMMETRIC, axis: int = 0) -> QuantParams:
    if scheme == ASYMMETRIC:
        lower, upper = float(r.lower), float(r.upper)
        if not upper > lower:
            raise DegenerateRangeError(f"degenerate clip range ({lower}, {upper})")
        step = (upper - lower) / qmax(bits)
        zp = min(max(round(-lower / step), 0), qmax(bits))
        return QuantParams(bits=bits, step=step, zero_point=int(zp), scheme=ASYMMETRIC)
    if scheme == SYMMETRIC:
        bound = np.maximum(np.abs(np.asarray(r.lower, dtype=np.float64)), np.abs(np.asarray(r.upper, dtype=np.float64)))
        if np.any(bound <= 0):
            raise DegenerateRangeError("symmetric range has a channel with zero magnitude")
        step = bound / symmetric_zero_point(bits)
        zp = np.full(np.shape(step), symmetric_zero_point(bits), dtype=np.int64)
        if np.ndim(step) == 0:
            step, zp = float(step), int(zp)
        return QuantParams(bits=bits, step=step, zero_point=zp, scheme=SYMMETRIC, axis=axis)
    raise ValueError(f"unknown scheme {scheme!r}")


def weight_params(w: ArrayLike, bits: int, axis: int = 0) -> QuantParams:
    """Symmetric per-channel MinMax parameters for a weight matrix."""
    w = as_tensor(w)
    dims = [d for d in range(w.ndim) if d != axis % w.ndim]
    lo = torch.amin(w, dim=dims).numpy()
    hi = torch.amax(w, dim=dims).numpy()
    return params_from_range(ClipRange(lo, np.maximum(hi, lo + np.finfo(np.float64).tiny)), bits, SYMMETRIC, axis)


def ste_step_grad(x: ArrayLike, p: QuantParams) -> torch.Tensor:
    """Per-element derivative of ``fake_quant(x, p)`` with respect to the step.

    Straight-through three-case form: ``(x_hat - x) / s`` inside the grid,
    ``-z`` when clipped low and ``2**b - 1 - z`` when clipped high.
    """
    if p.scheme != ASYMMETRIC:
        raise ValueError("step-size gradients are defined for asymmetric per-tensor quantizers")
    x = as_tensor(x)
    s = float(_detached(p.step))
    z = float(p.zero_point)
    code = torch.round(x / s) + z
    x_hat = (torch.clamp(code, 0, qmax(p.bits)) - z) * s
    grad = torch.where(code < 0, torch.full_like(x, -z), (x_hat - x) / s)
    return torch.where(code > qmax(p.bits), torch.full_like(x, qmax(p.bits) - z), grad)


class _FakeQuantSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, step, zero_point, bits):
        s = step.detach()
        code = torch.round(x / s) + zero_point
        ctx.save_for_backward(x, s)
        ctx.zero_point, ctx.bits = zero_point, bits
        return (torch.clamp(code, 0, qmax(bits)) - zero_point) * s

    @staticmethod
    def backward(ctx, grad_out):
        x, s = ctx.saved_tensors
        p = QuantParams(bits=ctx.bits, step=float(s), zero_point=int(ctx.zero_point))
        code = torch.round(x / s) + ctx.zero_point
        in_range = (code >= 0) & (code <= qmax(ctx.bits))
        grad_x = grad_out * in_range
        grad_s = (grad_out * ste_step_grad(x, p)).sum().reshape(s.shape)
        return grad_x, grad_s, None, None


def fake_quant_ste(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    """``fake_quant`` that back-propagates to ``p.step`` (per-tensor only)."""
    step = p.step if isinstance(p.step, torch.Tensor) else torch.tensor(float(p.step), dtype=torch.float64)
    return _FakeQuantSTE.apply(x, step, int(p.zero_point), int(p.bits))


