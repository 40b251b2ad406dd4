"""Named parameter storage, differentiable primitives, gradients and SGD.

Reverse-mode gradients come from torch's autograd tape. ``grad_check`` is a
separate central-difference route that never touches autograd, so the two can
be compared against each other.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

Gradients = dict  # name -> tensor shaped like the parameter


class ShapeError(ValueError):
    pass


class ParamStore:
    """Ordered mapping of named parameter tensors with per-parameter trainable flags."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: dict[str, torch.Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone()
        t.requires_grad_(trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n in self.names(prefix):
            self._trainable[n] = flag
            self._params[n].requires_grad_(flag)

    def remove(self, prefix: str) -> None:
        for n in self.names(prefix):
            del self._params[n]
            del self._trainable[n]

    def to(self, dtype: torch.dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n, t in self._params.items():
            out.add(n, t.detach().to(dtype), self._trainable[n])
        return out

    def copy(self) -> "ParamStore":
        return self.to(self.dtype)

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in self._params.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place (names and shapes must already match)."""
        with torch.no_grad():
            for n, a in arrays.items():
                dst = self._params[n]
                if tuple(dst.shape) != tuple(np.shape(a)):
                    raise ShapeError(f"{n}: stored shape {tuple(dst.shape)} vs loaded {np.shape(a)}")
                dst.copy_(torch.as_tensor(np.asarray(a), dtype=self.dtype))

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            h.update(n.encode())
            h.update(self._params[n].detach().cpu().numpy().tobytes())
        return h.hexdigest()


# Primitives -------------------------------------------------------------------


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.shape[-1] == b.shape[-2] if b.dim() > 1 else a.shape[-1] == b.shape[0],
           f"matmul: lhs {tuple(a.shape)} incompatible with rhs {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    _check(x.shape[-1] == weight.shape[1],
           f"linear: input width {x.shape[-1]} vs weight {tuple(weight.shape)}")
    y = x @ weight.T
    return y + bias if bias is not None else y


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"mul: {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a * b


def concat(tensors: Iterable[torch.Tensor], axis: int = -1) -> torch.Tensor:
    tensors = list(tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        _check(len(other) == len(ref), f"concat: rank mismatch {tuple(ref)} vs {tuple(other)}")
        ax = axis % len(ref)
        _check(other[:ax] + other[ax + 1:] == ref[:ax] + ref[ax + 1:],
               f"concat: {tuple(ref)} vs {tuple(other)} along axis {axis}")
    return torch.cat(tensors, dim=axis)


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel():
        _check(int(ids.min()) >= 0 and int(ids.max()) < table.shape[0],
               f"embedding: ids outside [0, {table.shape[0]})")
    return table[ids]


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=axis)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x, approximate="tanh")


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    _check(gain.shape[-1] == x.shape[-1], f"layer_norm: width {x.shape[-1]} vs gain {tuple(gain.shape)}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def causal_self_attention(x: torch.Tensor, w_qkv: torch.Tensor, b_qkv: torch.Tensor,
                          w_out: torch.Tensor, b_out: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Multi-head attention where position t sees positions <= t. ``x`` is (B, T, d)."""
    B, T, d = x.shape
    _check(d % n_heads == 0, f"attention: width {d} not divisible by {n_heads} heads")
    _check(w_qkv.shape == (3 * d, d), f"attention: qkv weight {tuple(w_qkv.shape)} for width {d}")
    hd = d // n_heads
    q, k, v = linear(x, w_qkv, b_qkv).split(d, dim=-1)
    q = q.view(B, T, n_heads, hd).transpose(1, 2)
    k = k.view(B, T, n_heads, hd).transpose(1, 2)
    v = v.view(B, T, n_heads, hd).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
    scores = scores.masked_fill(mask, float("-inf"))
    out = softmax(scores, -1) @ v
    out = out.transpose(1, 2).reshape(B, T, d)
    return linear(out, w_out, b_out)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of integer ``targets`` under softmax(``logits``) over the last axis."""
    _check(logits.shape[:-1] == targets.shape,
           f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    nll = -log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if reduction == "sum":
        return nll.sum()
    if reduction == "none":
        return nll
    return nll.mean()


def mse(y: torch.Tensor, y_hat: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    _check(y.shape == y_hat.shape, f"mse: targets {tuple(y.shape)} vs predictions {tuple(y_hat.shape)}")
    sq = (y - y_hat) ** 2
    return sq.sum() if reduction == "sum" else sq.mean()


# Gradients and updates ----------------------------------------------------------


def backward(loss: torch.Tensor, p: ParamStore, names: Iterable[str] | None = None) -> Gradients:
    """Exact gradients of a scalar ``loss`` for the trainable parameters in ``names``
    (default: every trainable parameter). Unreachable parameters get zeros."""
    if loss.dim() != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    wanted = [n for n in (names if names is not None else p.trainable_names()) if p.is_trainable(n)]
    tensors = [p[n] for n in wanted]
    if not tensors or not loss.requires_grad:
        return {n: torch.zeros_like(p[n]) for n in wanted}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(t)) for n, t, g in zip(wanted, tensors, grads)}


def sgd_step(p: ParamStore, g: Gradients, lr: float, clip: float | None = None) -> ParamStore:
    """In-place ``param -= lr * grad`` on trainable parameters; frozen ones are skipped."""
    if clip is not None:
        total = math.sqrt(sum(float((t.detach() ** 2).sum()) for t in g.values()))
        scale = min(1.0, clip / total) if total > 0 else 1.0
    else:
        scale = 1.0
    with torch.no_grad():
        for n, grad in g.items():
            if not p.is_trainable(n):
                continue
            param = p[n]
            if param.shape != grad.shape:
                raise ShapeError(f"sgd_step: {n} has shape {tuple(param.shape)}, gradient {tuple(grad.shape)}")
            param.sub_(grad.to(param.dtype), alpha=lr * scale)
    return p


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[ParamStore], torch.Tensor], p: ParamStore, step: float = 1e-5,
               tol: float = 1e-4, names: Iterable[str] | None = None,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences, parameter by parameter.

    ``max_entries`` caps the number of coordinates probed per parameter (chosen
    at random with ``seed``); None probes all of them.
    """
    names = list(names) if names is not None else p.trainable_names()
    analytic = backward(loss_fn(p), p, names)
    rng = np.random.default_rng(seed)
    report = {}
    for n in names:
        param = p[n]
        flat = param.detach().view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = rng.choice(flat.numel(), size=max_entries, replace=False)
        ana = analytic[n].reshape(-1)
        worst = 0.0
        for j in idx:
            j = int(j)
            with torch.no_grad():
                orig = flat[j].item()
                flat[j] = orig + step
                up = float(loss_fn(p))
                flat[j] = orig - step
                down = float(loss_fn(p))
                flat[j] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(float(ana[j]), numeric))
        report[n] = worst
    return GradCheckReport(report, tol)
