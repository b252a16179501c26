"""Named parameter store, Adam with decoupled weight decay, checkpoint IO.

The frozen-set realizes prompt-tuning style training where only soft
prompts and the observation projector receive updates while the language
model backbone stays fixed.
"""

from __future__ import annotations

import struct
from typing import Dict, Iterable, Iterator, Tuple

import numpy as np
import torch

from . import tensorops

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"VP2CKPT1"


class MissingGradError(RuntimeError):
    """A non-frozen parameter had no gradient at update time."""


class ParamStore:
    """Named trainable tensors with per-parameter Adam state and a frozen set.

    Iteration order over names is always sorted, so updates and checkpoints
    are deterministic. Adam moment arrays exist only for non-frozen
    parameters that have taken at least one step.
    """

    def __init__(self) -> None:
        self._params: Dict[str, torch.Tensor] = {}
        self._adam: Dict[str, dict] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = tensorops.tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset(self._frozen)

    def freeze(self, names: Iterable[str]) -> None:
        for name in names:
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            self._frozen.add(name)
            self._adam.pop(name, None)
            self._params[name].requires_grad_(False)

    def unfreeze(self, names: Iterable[str]) -> None:
        for name in names:
            self._frozen.discard(name)
            self._params[name].requires_grad_(True)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def values(self) -> Dict[str, np.ndarray]:
        """Detached float32 copies of all parameters, by name."""
        return {n: p.detach().cpu().numpy().astype(np.float32, copy=True)
                for n, p in self.items()}

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for name, arr in values.items():
                if name not in self._params:
                    raise KeyError(f"unknown parameter {name!r}")
                p = self._params[name]
                if tuple(p.shape) != tuple(arr.shape):
                    raise ValueError(
                        f"shape mismatch for {name!r}: {tuple(p.shape)} vs {arr.shape}")
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))


def adam_step(store: ParamStore, lr: float, weight_decay: float,
              clip: float | None = None,
              lr_map: Dict[str, float] | None = None,
              wd_map: Dict[str, float] | None = None) -> None:
    """One Adam update over all non-frozen parameters.

    Decoupled weight decay; grads are zeroed afterward. `lr_map` / `wd_map`
    override the base rate for individual parameter names (used to train
    soft prompts at a higher rate than the LM backbone).
    """
    with torch.no_grad():
        if clip is not None:
            total = torch.zeros((), dtype=torch.float64)
            for name in store.names():
                if name in store.frozen:
                    continue
                p = store[name]
                if p.grad is None:
                    raise MissingGradError(f"no gradient for parameter {name!r}")
                total += (p.grad.double() ** 2).sum()
            norm = float(total.sqrt())
            scale = min(1.0, clip / (norm + 1e-12))
        for name in store.names():
            if name in store.frozen:
                continue
            p = store[name]
            if p.grad is None:
                raise MissingGradError(f"no gradient for parameter {name!r}")
            g = p.grad
            if clip is not None:
                g = g * scale
            st = store._adam.setdefault(
                name, {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "t": 0})
            st["t"] += 1
            st["m"].mul_(ADAM_BETA1).add_(g, alpha=1 - ADAM_BETA1)
            st["v"].mul_(ADAM_BETA2).addcmul_(g, g, value=1 - ADAM_BETA2)
            t = st["t"]
            mhat = st["m"] / (1 - ADAM_BETA1 ** t)
            vhat = st["v"] / (1 - ADAM_BETA2 ** t)
            p_lr = (lr_map or {}).get(name, lr)
            p_wd = (wd_map or {}).get(name, weight_decay)
            if p_wd:
                p.mul_(1 - p_lr * p_wd)
            p.addcdiv_(mhat, vhat.sqrt() + ADAM_EPS, value=-p_lr)
        store.zero_grads()


def save_checkpoint(path, values: Dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, count, then (name length, UTF-8 name, rank,
    extents, raw f32 data), all integers u64 little-endian."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(values)))
        for name in sorted(values):
            arr = np.asarray(values[name], dtype="<f4")
            if not arr.flags["C_CONTIGUOUS"]:
                arr = arr.copy()
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<Q", f.read(8))
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", f.read(8))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.copy()
        return out
