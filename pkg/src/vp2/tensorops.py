"""Dense tensor primitives with reverse-mode gradients.

Thin, shape-checked wrappers over torch CPU tensors. Every forward op
validates operand shapes and rejects non-finite outputs, so numerical
blowups surface at the op that produced them instead of at the loss.

Precision is a build-wide switch: float32 by default, float64 for
gradient-check headroom (see :func:`set_precision` / :func:`precision`).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
import torch

torch.set_num_threads(max(1, torch.get_num_threads()))

_DTYPE = torch.float32


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def set_precision(mode: str) -> None:
    """Set the build-wide float precision: "float32" or "float64"."""
    global _DTYPE
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    _DTYPE = torch.float32 if mode == "float32" else torch.float64


def get_dtype() -> torch.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the build-wide precision."""
    old = "float32" if _DTYPE == torch.float32 else "float64"
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Create a tensor in the current precision from array-like data."""
    t = torch.as_tensor(np.asarray(data), dtype=_DTYPE)
    t = t.clone()
    t.requires_grad_(requires_grad)
    return t


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op non-finite detection. On by default; the training loop
    turns it off for throughput and instead aborts on a non-finite loss,
    which NaN/Inf propagation reaches anyway."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    old = _CHECK_FINITE
    set_finite_checks(enabled)
    try:
        yield
    finally:
        set_finite_checks(old)


def _check(out: torch.Tensor, op: str) -> torch.Tensor:
    if _CHECK_FINITE and not torch.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _shapes(*ts: torch.Tensor) -> str:
    return " vs ".join(str(tuple(t.shape)) for t in ts)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: non-conforming shapes {_shapes(a, b)}")
    return _check(torch.matmul(a, b), "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise add; the only broadcast allowed is rank-1 b onto a's last dim."""
    if a.shape != b.shape and not (b.dim() == 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add: non-conforming shapes {_shapes(a, b)}")
    return _check(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape and not (b.dim() == 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"mul: non-conforming shapes {_shapes(a, b)}")
    return _check(a * b, "mul")


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return _check(a * c, "scale")


def gelu(a: torch.Tensor) -> torch.Tensor:
    return _check(torch.nn.functional.gelu(a), "gelu")


def softmax_lastdim(a: torch.Tensor) -> torch.Tensor:
    return _check(torch.softmax(a, dim=-1), "softmax-lastdim")


def layernorm(a: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
              eps: float = 1e-5) -> torch.Tensor:
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm: gain/bias must be ({d},), got {_shapes(gain, bias)}")
    out = torch.nn.functional.layer_norm(a, (d,), gain, bias, eps)
    return _check(out, "layernorm")


def embedding_gather(table: torch.Tensor, ids) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding-gather: table must be rank 2, got {tuple(table.shape)}")
    idx = torch.as_tensor(ids, dtype=torch.long)
    if idx.numel() and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding-gather: id out of range for table of {table.shape[0]} rows")
    return _check(table[idx], "embedding-gather")


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    base = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        s[dim] = base[dim]
        if s != base:
            raise ShapeError(f"concat: non-conforming shapes {_shapes(*parts)}")
    return _check(torch.cat(list(parts), dim=dim), "concat")


def slice_rows(a: torch.Tensor, start: int, end: int, dim: int = 0) -> torch.Tensor:
    n = a.shape[dim]
    if not (0 <= start <= end <= n):
        raise ShapeError(f"slice: [{start}:{end}] out of range for extent {n}")
    return _check(a.narrow(dim, start, end - start), "slice")


def mean(a: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    out = a.mean() if dim is None else a.mean(dim=dim)
    return _check(out, "mean")


def cross_entropy_with_logits(logits: torch.Tensor, targets,
                              ignore_index: int = -1,
                              reduction: str = "mean") -> torch.Tensor:
    """Token-level cross entropy. `logits` is (..., V); `targets` holds ids
    (ignore_index entries are masked out)."""
    tgt = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:-1] != tgt.shape:
        raise ShapeError(
            f"cross-entropy-with-logits: logits {tuple(logits.shape)} vs "
            f"targets {tuple(tgt.shape)}")
    out = torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1),
        ignore_index=ignore_index, reduction=reduction)
    return _check(out, "cross-entropy-with-logits")


def pad_stack(seqs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack variable-length (L_i, E) sequences into (B, Lmax, E), zero-padded
    on the right. Gradients flow back to each input slice."""
    if not seqs:
        raise ShapeError("pad-stack: empty input list")
    e = seqs[0].shape[-1]
    if any(s.dim() != 2 or s.shape[-1] != e for s in seqs):
        raise ShapeError(f"pad-stack: non-conforming shapes {_shapes(*seqs)}")
    lmax = max(s.shape[0] for s in seqs)
    rows = [torch.nn.functional.pad(s, (0, 0, 0, lmax - s.shape[0])) for s in seqs]
    return _check(torch.stack(rows), "pad-stack")


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Reverse-mode pass from a scalar loss; grads accumulate until zeroed."""
    if loss.numel() != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward(retain_graph=retain_graph)


no_grad = torch.no_grad
