"""Differentiable primitives, parameters, Adam and learning-rate schedules.

Tensors are ``torch.Tensor`` and reverse-mode differentiation is torch
autograd. This module adds the pieces the rest of the package relies on:
shape-checked primitives with fixed conventions, a ``Parameter`` with a
frozen flag and its own Adam moments, a central-difference gradient checker,
and the two schedules.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import torch

from .errors import NumericFault, ShapeError

LN_EPS = 1e-5


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes))


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
           "matmul", a.shape, b.shape)
    return a @ b


def _broadcastable(a, b) -> bool:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
        return True
    except RuntimeError:
        return False


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(_broadcastable(a, b), "add", a.shape, b.shape)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(_broadcastable(a, b), "mul", a.shape, b.shape)
    return a * b


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Row softmax over the last axis."""
    return torch.softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gain=None, bias=None) -> torch.Tensor:
    """Normalize rows of ``x``; a constant row maps to zeros before the affine part."""
    d = x.shape[-1]
    if gain is not None:
        _check(gain.shape == (d,), "layer_norm", x.shape, gain.shape)
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + LN_EPS)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    _check(table.dim() == 2, "embedding_lookup", table.shape, ids.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return table[ids]


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None = None, train: bool = True) -> torch.Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p)."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_id: int = -100,
                  label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not ``ignore_id``.

    With smoothing eps the target is (1 - eps) one-hot + eps / V uniform.
    """
    _check(logits.shape[:-1] == labels.shape, "cross_entropy", logits.shape, labels.shape)
    keep = labels != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    logp = torch.log_softmax(logits[keep], dim=-1)
    nll = -logp.gather(-1, labels[keep].unsqueeze(-1)).squeeze(-1)
    if label_smoothing:
        smooth = -logp.mean(dim=-1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    return nll.sum() / n


def smoothed_floor(vocab_size: int, label_smoothing: float) -> float:
    """Entropy of the smoothed target distribution: the lowest reachable smoothed loss."""
    eps = label_smoothing
    hit = 1.0 - eps + eps / vocab_size
    miss = eps / vocab_size
    total = -hit * math.log(hit)
    if miss > 0:
        total -= (vocab_size - 1) * miss * math.log(miss)
    return total


def check_finite(x: torch.Tensor, what: str = "tensor"):
    if not torch.isfinite(x).all():
        raise NumericFault(f"non-finite values in {what}")


def backward(loss: torch.Tensor):
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


class Parameter:
    """A named trainable array with a frozen flag and Adam state."""

    def __init__(self, name: str, value: torch.Tensor, frozen: bool = False):
        self.name = name
        self.frozen = frozen
        self.tensor = value.detach().clone().requires_grad_(not frozen)
        self.adam_m = torch.zeros_like(self.tensor)
        self.adam_v = torch.zeros_like(self.tensor)
        self.step_count = 0

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return tuple(self.tensor.shape)

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad_(False)
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class ParamStore(Mapping[str, Parameter]):
    """Ordered name -> Parameter table."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self._params[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, name: str, value: torch.Tensor, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(name, value, frozen)
        self._params[name] = p
        return p

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: p.tensor for k, p in self._params.items()}

    def scope(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: p.tensor for k, p in self._params.items() if k.startswith(prefix + ".")}

    def freeze(self):
        for p in self._params.values():
            p.freeze()

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.frozen]

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.detach().cpu().numpy().astype(np.float32) for k, p in self._params.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], frozen: bool = False, dtype=torch.float32):
        store = cls()
        for k, v in arrays.items():
            store.add(k, torch.tensor(np.asarray(v), dtype=dtype), frozen)
        return store

    def copy(self, dtype=None) -> "ParamStore":
        store = ParamStore()
        for k, p in self._params.items():
            v = p.tensor.detach()
            store.add(k, v.to(dtype) if dtype is not None else v, p.frozen)
        return store

    def num_elements(self) -> int:
        return sum(p.tensor.numel() for p in self._params.values())


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps_opt: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update with L2 decay folded into the gradient.

    Frozen parameters are skipped whatever their ``.grad`` holds.
    """
    params = [p for p in params if not p.frozen]
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"parameter {p.name} has no gradient")
    with torch.no_grad():
        for p in params:
            g = p.tensor.grad
            if weight_decay:
                g = g + weight_decay * p.tensor
            p.step_count += 1
            p.adam_m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            p.adam_v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
            v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
            p.tensor.sub_(lr * m_hat / (v_hat.sqrt() + eps_opt))


def inverse_sqrt_lr(step: int, peak_lr: float, warmup_steps: int, init_lr: float = 0.0) -> float:
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    if step <= warmup_steps:
        return init_lr + (peak_lr - init_lr) * step / warmup_steps
    return peak_lr * math.sqrt(warmup_steps / step)


def polynomial_decay_lr(step: int, peak_lr: float, warmup_steps: int, total_steps: int,
                        power: float = 1.0) -> float:
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps ({warmup_steps}) must be < total_steps ({total_steps})")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps if warmup_steps else peak_lr
    if step >= total_steps:
        return 0.0
    frac = (total_steps - step) / (total_steps - warmup_steps)
    return peak_lr * max(frac, 0.0) ** power


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``."""
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out):
        raise NumericFault("grad_check: non-finite function value")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    base = x.detach().clone()
    flat = base.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f(base))
            flat[i] = orig - eps
            lo = float(f(base))
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
    if not (torch.isfinite(numeric).all() and torch.isfinite(analytic).all()):
        raise NumericFault("grad_check: non-finite gradient")
    rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
    return float(rel.max()) if rel.numel() else 0.0
