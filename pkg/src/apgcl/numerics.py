"""Small differentiable kernel shared by every model component.

Everything here operates on torch tensors; autograd supplies the backward
pass and :func:`check_gradient` verifies it against central differences.
"""
from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from typing import Callable, Iterator

import torch
import torch.nn as nn


class NumericsError(ValueError):
    pass


def _require_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericsError(f"{what}: input contains NaN or Inf")


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax along ``dim``. Rejects non-finite input."""
    v = torch.as_tensor(v)
    _require_finite(v, "softmax")
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ w (+ b)`` where ``w`` is stored as (in_features, out_features)."""
    if x.shape[-1] != w.shape[0]:
        raise NumericsError(
            f"linear: shape mismatch, input {tuple(x.shape)} vs weight {tuple(w.shape)}"
        )
    out = x @ w
    if b is not None:
        if b.shape[-1] != w.shape[1]:
            raise NumericsError(
                f"linear: bias {tuple(b.shape)} does not match weight {tuple(w.shape)}"
            )
        out = out + b
    return out


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, std: float | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        if std is None:
            bound = 1.0 / math.sqrt(in_features)
            nn.init.uniform_(self.weight, -bound, bound)
        else:
            nn.init.trunc_normal_(self.weight, std=std, a=-2 * std, b=2 * std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class ParameterSet:
    """Named parameters with per-entry trainable flags.

    Freezing flips ``requires_grad`` so an optimizer built from
    :meth:`trainable` never sees frozen entries.
    """

    def __init__(self, params: dict[str, torch.Tensor] | None = None):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, p in (params or {}).items():
            self.add(name, p)

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParameterSet":
        return cls({prefix + n: p for n, p in module.named_parameters()})

    def add(self, name: str, p: torch.Tensor) -> None:
        if name in self._params:
            raise NumericsError(f"duplicate parameter name {name!r}")
        self._params[name] = p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return bool(self._params[name].requires_grad)

    def set_trainable(self, flag: bool, prefix: str = "") -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.requires_grad_(flag)

    def trainable(self) -> list[torch.Tensor]:
        return [p for p in self._params.values() if p.requires_grad]

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self._params.items()}


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default floating dtype (32 or 64 bit)."""
    dtype = {32: torch.float32, 64: torch.float64}.get(bits)
    if dtype is None:
        raise NumericsError(f"precision must be 32 or 64, got {bits}")
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(old)


def _scalar(f: Callable[[], torch.Tensor]) -> torch.Tensor:
    out = f()
    if out.numel() != 1:
        raise NumericsError(f"check_gradient: f must return a scalar, got shape {tuple(out.shape)}")
    if not bool(torch.isfinite(out)):
        raise NumericsError("check_gradient: f is non-finite at a probe point")
    return out.reshape(())


def check_gradient(
    f: Callable[[], torch.Tensor],
    params: ParameterSet | dict[str, torch.Tensor],
    eps: float = 1e-6,
    per_parameter: bool = False,
    order: int = 2,
    reference: tuple[Callable[[], torch.Tensor], ParameterSet | dict[str, torch.Tensor]] | None = None,
) -> float | dict[str, float]:
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` takes no arguments and reads the tensors in ``params`` (closure).
    Each parameter contributes ``||analytic - numeric|| / (||numeric|| + 1e-8)``;
    the maximum over parameters is returned. Frozen parameters are skipped.

    ``order=2`` is the usual ``(f(x+h) - f(x-h)) / 2h``. ``order=4`` uses the
    symmetric five-point stencil, whose O(h^4) truncation error allows the
    larger steps that 32-bit arithmetic needs.

    ``reference=(f_ref, params_ref)`` takes the central differences from a
    twin of ``f`` (typically the same instance in 64-bit), so a 32-bit
    analytic gradient can be measured against an oracle whose own roundoff
    is far below the tolerance. Names and shapes must match ``params``.
    """
    if order not in (2, 4):
        raise NumericsError("order must be 2 or 4")
    if not isinstance(params, ParameterSet):
        params = ParameterSet(params)
    names = [n for n, p in params.items() if p.requires_grad]
    f_num, num_params = f, params
    if reference is not None:
        f_num, num_params = reference
        if not isinstance(num_params, ParameterSet):
            num_params = ParameterSet(num_params)
        for n in names:
            if n not in num_params or num_params[n].shape != params[n].shape:
                raise NumericsError(f"check_gradient: reference lacks a matching parameter {n!r}")

    tensors = [params[n] for n in names]
    for t in tensors:
        t.grad = None
    out = _scalar(f)
    grads = torch.autograd.grad(out, tensors, allow_unused=True)

    errors: dict[str, float] = {}
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            p = num_params[name]
            analytic = torch.zeros_like(p) if g is None else g.detach().to(p.dtype)
            numeric = torch.zeros_like(p)
            flat = p.data.view(-1)
            nflat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def at(step):
                    flat[i] = orig + step
                    return _scalar(f_num).item()

                if order == 2:
                    nflat[i] = (at(eps) - at(-eps)) / (2 * eps)
                else:
                    nflat[i] = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                flat[i] = orig
            diff = torch.linalg.vector_norm((analytic - numeric).double())
            scale = torch.linalg.vector_norm(numeric.double())
            errors[name] = float(diff / (scale + 1e-8))
    if per_parameter:
        return errors
    return max(errors.values(), default=0.0)
