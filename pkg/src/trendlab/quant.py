"""Uniform midrise quantizers for inputs, weights and activations.

All three kinds share one rule. Given a range ``[lo, hi]`` and ``n`` bits the
bin width is ``(hi - lo) / 2**n`` and a value maps to the centre of its bin.
The backward pass of every quantizer is the identity (straight-through), which
is what lets gradient attacks see through a piecewise-constant forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("input", "weight", "activation")


class DegenerateRangeError(ValueError):
    """Raised when a quantization range collapses to a single value."""


@dataclass(frozen=True)
class QuantConfig:
    """Which tensor gets quantized and to how many bits.

    ``bits=None`` is the full-precision sentinel: the quantizer is skipped.
    Weight and activation widths of 32 or more are folded into it.
    """

    kind: str
    bits: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantization kind {self.kind!r}")
        if self.bits is not None and self.kind != "input" and self.bits >= 32:
            object.__setattr__(self, "bits", None)
        if self.bits is None:
            return
        if not isinstance(self.bits, (int, np.integer)) or self.bits < 1:
            raise ValueError(f"bit width must be a positive integer, got {self.bits!r}")
        if self.kind == "input" and self.bits > 8:
            raise ValueError("input quantization supports 1..8 bits")

    @property
    def is_fp(self) -> bool:
        return self.bits is None

    @property
    def tag(self) -> str:
        if self.is_fp:
            return "FP"
        prefix = {"input": "Q", "weight": "W", "activation": "A"}[self.kind]
        return f"{prefix}{self.bits}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bits": self.bits}

    @classmethod
    def from_dict(cls, d: dict | None) -> QuantConfig | None:
        if d is None:
            return None
        return cls(kind=d["kind"], bits=d.get("bits"))


def bin_width(lo: float, hi: float, bits: int) -> float:
    return (hi - lo) / 2.0**bits


def midrise(values: np.ndarray, lo: float, hi: float, bits: int) -> np.ndarray:
    """Quantize ``values`` onto the ``2**bits`` bin centres of ``[lo, hi]``.

    The bin index is clamped to ``2**bits - 1`` so that ``hi`` itself lands in
    the top bin rather than one past the grid.
    """
    if not hi > lo:
        raise DegenerateRangeError(f"quantization range is empty (lo={lo}, hi={hi})")
    b = bin_width(lo, hi, bits)
    k = np.floor((values - lo) / b)
    k = np.clip(k, 0, 2**bits - 1)
    return k * b + (0.5 * b + lo)


def quantize_input(batch: np.ndarray, bits: int | None, value_range=None) -> np.ndarray:
    """Quantize a normalized minibatch using its own min and max.

    Args:
        batch: Z-score normalized images, any shape.
        bits: bit width, or ``None`` for pass-through.
        value_range: optional fixed ``(lo, hi)``; by default the extremes of
            the whole minibatch are used.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if bits is None:
        return batch
    if value_range is None:
        lo, hi = float(batch.min()), float(batch.max())
    else:
        lo, hi = value_range
    return midrise(batch, lo, hi, bits)


def quantize_tensor(w: np.ndarray, bits: int | None) -> np.ndarray:
    """Symmetric per-tensor weight quantizer over ``[-max|w|, +max|w|]``.

    An all-zero tensor has no scale and is returned unchanged.
    """
    if bits is None:
        return w
    m = float(np.max(np.abs(w))) if w.size else 0.0
    if m == 0.0:
        return w
    return midrise(w, -m, m, bits)


def quantize_activation(a: np.ndarray, bits: int | None) -> np.ndarray:
    """Per-sample activation quantizer over each sample's own ``[min, max]``.

    Constant samples (for example an all-dead ReLU row) pass through.
    """
    if bits is None:
        return a
    flat = a.reshape(a.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    span = hi - lo
    live = span[:, 0] > 0
    out = flat.copy()
    if np.any(live):
        b = span[live] / 2.0**bits
        k = np.clip(np.floor((flat[live] - lo[live]) / b), 0, 2**bits - 1)
        out[live] = k * b + (0.5 * b + lo[live])
    return out.reshape(a.shape)


def straight_through(grad_out: np.ndarray) -> np.ndarray:
    """Backward of any quantizer: the incoming gradient, untouched."""
    return grad_out


def quantize_params(model, kind: str, bits: int | None):
    """Return a quantized view of ``model``.

    The full-precision parameters are shared, not copied; quantization is
    applied on the fly during the forward pass, so the view can be attacked
    with straight-through gradients like any other model.
    """
    if kind not in ("weight", "activation"):
        raise ValueError("quantize_params handles 'weight' or 'activation'")
    cfg = QuantConfig(kind, bits)
    if cfg.is_fp:
        return model
    return model.with_quant(cfg)
