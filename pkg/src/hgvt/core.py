"""Dense f64 tensor primitives, define-by-run differentiation and gradient checking.

Tensors are ``torch.Tensor`` objects in float64; torch's autograd graph plays the
role of the tape.  This module adds the pieces the rest of the package relies
on: a closed primitive set with structured shape errors, a guard that names the
primitive producing a non-finite value, and a central-difference verifier that
is independent of the backward pass it checks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
from torch import Tensor
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64
NORM_EPS = 1e-6
MASK_VALUE = -1e30


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, shapes: Sequence[tuple[int, ...]], detail: str = ""):
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{primitive}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf from finite inputs."""

    def __init__(self, node: str):
        self.node = node
        super().__init__(f"non-finite value produced by {node}")


def _shapes(args) -> list[tuple[int, ...]]:
    out = []
    for a in args:
        if isinstance(a, Tensor):
            out.append(tuple(a.shape))
        elif isinstance(a, (list, tuple)):
            out.extend(_shapes(a))
    return out


def _all_finite(args) -> bool:
    for a in args:
        if isinstance(a, Tensor) and a.is_floating_point():
            if not bool(torch.isfinite(a).all()):
                return False
        elif isinstance(a, (list, tuple)) and not _all_finite(a):
            return False
    return True


class NanGuard(TorchFunctionMode):
    """Raise as soon as any torch function turns finite inputs into NaN/inf.

    Runtime shape failures inside the guarded region are re-raised as
    :class:`ShapeError` naming the torch function and operand shapes.
    """

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        try:
            out = func(*args, **kwargs)
        except RuntimeError as exc:
            msg = str(exc)
            if "size" in msg or "shape" in msg or "dimension" in msg:
                raise ShapeError(_name(func), _shapes(args), msg.splitlines()[0]) from exc
            raise
        outs = out if isinstance(out, (tuple, list)) else (out,)
        for o in outs:
            if isinstance(o, Tensor) and o.is_floating_point() and o.numel():
                if not bool(torch.isfinite(o).all()) and _all_finite(args) and _all_finite(kwargs.values()):
                    raise NonFiniteError(_name(func))
        return out


def _name(func) -> str:
    return getattr(func, "__qualname__", None) or getattr(func, "__name__", repr(func))


# -- primitive set ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    return a @ b


def transpose(a: Tensor) -> Tensor:
    return a.transpose(-1, -2)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("mul", a, b)
    return a * b


def _broadcastable(name: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(name, [a.shape, b.shape]) from None


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def masked_softmax(logits: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis with an additive mask (0 allowed, MASK_VALUE forbidden)."""
    if mask is not None:
        _broadcastable("masked_softmax", logits, mask)
        logits = logits + mask
    return torch.softmax(logits, dim=-1)


def rms_norm(x: Tensor, weight: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    if weight is not None and weight.shape[-1] != x.shape[-1]:
        raise ShapeError("rms_norm", [x.shape, weight.shape])
    y = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return y if weight is None else y * weight


def geglu(gate: Tensor, value: Tensor) -> Tensor:
    if gate.shape != value.shape:
        raise ShapeError("geglu", [gate.shape, value.shape])
    return torch.nn.functional.gelu(gate) * value


def silu_glu(gate: Tensor, value: Tensor) -> Tensor:
    if gate.shape != value.shape:
        raise ShapeError("silu_glu", [gate.shape, value.shape])
    return torch.nn.functional.silu(gate) * value


def concat(tensors: Sequence[Tensor]) -> Tensor:
    lead = {tuple(t.shape[:-1]) for t in tensors}
    if len(lead) != 1:
        raise ShapeError("concat", [t.shape for t in tensors])
    return torch.cat(list(tensors), dim=-1)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Row-normalise as ``x / (||x|| + eps)``."""
    return x / (x.norm(dim=-1, keepdim=True) + eps)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    return x.clamp(lo, hi)


def stop_sign(x: Tensor) -> Tensor:
    """Sign with an explicit gradient stop."""
    return torch.sign(x.detach())


def absolute(x: Tensor) -> Tensor:
    return x.abs()


# -- tape ------------------------------------------------------------------


@dataclass
class Tape:
    """One recorded evaluation: the leaf inputs and the outputs built from them."""

    inputs: dict[str, Tensor]
    outputs: dict[str, Tensor] = field(default_factory=dict)


def forward(
    expression: Callable[..., Tensor | Mapping[str, Tensor]],
    inputs: Mapping[str, Tensor],
    *,
    guard: bool = True,
) -> tuple[dict[str, Tensor], Tape]:
    """Evaluate ``expression(**inputs)`` on fresh leaves and record it on a tape."""
    leaves = {
        k: torch.as_tensor(v, dtype=DTYPE).detach().clone().requires_grad_(True)
        for k, v in inputs.items()
    }
    if guard:
        with NanGuard():
            out = expression(**leaves)
    else:
        out = expression(**leaves)
    outputs = dict(out) if isinstance(out, Mapping) else {"out": out}
    tape = Tape(inputs=leaves, outputs=outputs)
    return outputs, tape


def backward(tape: Tape, seed: Tensor | Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Gradients of the recorded outputs w.r.t. every input, contracted with ``seed``.

    ``seed`` may be omitted when the tape has a single scalar output.  Inputs the
    outputs do not depend on receive zeros.
    """
    names = list(tape.outputs)
    if seed is None:
        if len(names) != 1 or tape.outputs[names[0]].numel() != 1:
            raise ShapeError("backward", [o.shape for o in tape.outputs.values()], "seed required")
        seeds = {names[0]: torch.ones_like(tape.outputs[names[0]])}
    elif isinstance(seed, Mapping):
        seeds = dict(seed)
    else:
        if len(names) != 1:
            raise ShapeError("backward", [o.shape for o in tape.outputs.values()], "ambiguous seed")
        seeds = {names[0]: seed}
    outs, grads_out = [], []
    for name, s in seeds.items():
        o = tape.outputs[name]
        s = torch.as_tensor(s, dtype=o.dtype)
        if s.shape != o.shape:
            raise ShapeError("backward", [o.shape, s.shape], f"seed for {name!r}")
        if o.requires_grad:
            outs.append(o)
            grads_out.append(s)
    leaves = list(tape.inputs.values())
    if outs:
        grads = torch.autograd.grad(outs, leaves, grads_out, allow_unused=True)
    else:
        grads = [None] * len(leaves)
    return {
        k: (torch.zeros_like(v) if g is None else g)
        for (k, v), g in zip(tape.inputs.items(), grads)
    }


# -- finite differences ----------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_coordinate: tuple[int, ...] | None
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} at {self.worst_coordinate} ({self.n_checked} coords)"


def _analytic_grad(fn: Callable[[Tensor], Tensor], point: Tensor) -> Tensor:
    _, tape = forward(lambda x: fn(x), {"x": point}, guard=False)
    return backward(tape)["x"]


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    grad: Tensor | None = None,
    coords: Sequence[tuple[int, ...]] | None = None,
    abs_floor: float = 1e-5,
) -> GradcheckReport:
    """Compare the backward-pass gradient of a scalar function against central differences.

    A coordinate's error is ``|g - fd| / max(|g|, |fd|, abs_floor)``; the floor
    keeps near-zero derivatives from amplifying rounding noise.
    ``grad`` overrides the analytic gradient (useful for fault injection);
    ``coords`` restricts the probe to a subset of coordinates.
    """
    point = torch.as_tensor(point, dtype=DTYPE).detach()
    g = _analytic_grad(fn, point) if grad is None else torch.as_tensor(grad, dtype=DTYPE)
    if g.shape != point.shape:
        raise ShapeError("finite_diff_check", [point.shape, g.shape])
    if coords is None:
        coords = list(itertools.product(*[range(n) for n in point.shape]))
    worst, worst_at = 0.0, None
    with torch.no_grad():
        for idx in coords:
            x = point.clone()
            x[idx] += step
            fp = float(fn(x))
            x[idx] -= 2 * step
            fm = float(fn(x))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"finite_diff_check probe at {idx}")
            fd = (fp - fm) / (2 * step)
            gi = float(g[idx])
            err = abs(gi - fd) / max(abs(gi), abs(fd), abs_floor)
            if worst_at is None or err > worst:
                worst, worst_at = err, tuple(idx)
    return GradcheckReport(worst, worst_at, worst <= tol, len(coords))


def directional_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradcheckReport:
    """Finite-difference check of a loss over many parameters along one random direction.

    The directional derivative ``<grad, v>`` from backward is compared against
    ``(f(p + h v) - f(p - h v)) / 2h``.  Parameters are restored afterwards.
    """
    gen = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    loss = fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs) if gr is not None)
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(d, alpha=step)
        fp = float(fn())
        for p, d in zip(params, dirs):
            p.add_(d, alpha=-2 * step)
        fm = float(fn())
        for p, d in zip(params, dirs):
            p.add_(d, alpha=step)
    fd = (fp - fm) / (2 * step)
    err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-5)
    return GradcheckReport(err, None, err <= tol, 1)
