"""
Reverse-mode differentiation contract.

A thin layer over torch autograd in 64-bit floats: named parameter sets with
trainable and frozen leaves, gradient evaluation with forward-pass NaN
diagnostics, central finite differences, gradient checking and the 2D
convolution primitive used for PSF application.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Iterator, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.overrides import TorchFunctionMode

from rmfnet.errors import ContractViolation, NonFiniteError


logger = logging.getLogger(__name__)

DTYPE = torch.float64

Array = Tensor
Program = Callable[[Mapping[str, Tensor], Tensor], Tensor]

torch.set_default_dtype(DTYPE)


def as_array(values: Any) -> Tensor:
    """Convert array-like values to a float64 tensor."""
    return torch.as_tensor(values, dtype=DTYPE)


class ParamSet(Mapping[str, Tensor]):
    """
    Named float64 leaves, each flagged trainable or frozen.

    Frozen leaves are evaluated like any other input but never receive
    gradients.
    """

    def __init__(self, leaves: Mapping[str, Any], frozen: Iterable[str] = ()) -> None:
        self._leaves: Dict[str, Tensor] = {
            name: as_array(value).detach() for name, value in leaves.items()
        }
        frozen_names = frozenset(frozen)
        unknown = sorted(frozen_names - set(self._leaves))
        if unknown:
            raise ValueError(f"Frozen leaves not in parameter set: {', '.join(unknown)}")
        self._frozen = frozen_names

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamSet":
        """
        Build a parameter set from a module.

        Parameters with ``requires_grad`` are trainable; other parameters and
        all buffers are frozen.
        """
        leaves: Dict[str, Tensor] = {}
        frozen = []
        for name, param in module.named_parameters():
            leaves[name] = param
            if not param.requires_grad:
                frozen.append(name)
        for name, buf in module.named_buffers():
            leaves[name] = buf
            frozen.append(name)
        return cls(leaves, frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self._leaves[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._leaves)

    def __len__(self) -> int:
        return len(self._leaves)

    @property
    def trainable(self) -> Tuple[str, ...]:
        return tuple(name for name in self._leaves if name not in self._frozen)

    @property
    def frozen(self) -> Tuple[str, ...]:
        return tuple(name for name in self._leaves if name in self._frozen)

    def is_trainable(self, name: str) -> bool:
        return name in self._leaves and name not in self._frozen

    def replace(self, name: str, value: Any) -> "ParamSet":
        """Return a copy with one leaf replaced."""
        if name not in self._leaves:
            raise KeyError(name)
        leaves = dict(self._leaves)
        leaves[name] = as_array(value)
        return ParamSet(leaves, self._frozen)


class NonFiniteGuard(TorchFunctionMode):
    """Raise as soon as any torch primitive returns NaN."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, Tensor) and (out.is_floating_point() or out.is_complex()):
            if bool(torch.isnan(out).any()):
                name = getattr(func, '__name__', repr(func))
                raise NonFiniteError(f"NaN produced by primitive '{name}'")
        return out


def _reduce(value: Tensor, reduction: Optional[str]) -> Tensor:
    if reduction is None:
        if value.numel() != 1:
            raise ContractViolation(
                f"Program returned shape {tuple(value.shape)}; "
                "a scalar loss or an explicit reduction ('sum' or 'mean') is required"
            )
        return value.reshape(())
    if reduction == 'sum':
        return value.sum()
    if reduction == 'mean':
        return value.mean()
    raise ContractViolation(f"Unknown reduction '{reduction}'")


def evaluate_with_gradients(
    f: Program,
    params: ParamSet,
    inputs: Tensor,
    reduction: Optional[str] = None,
) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Evaluate a program and the gradient of its scalar value.

    Args:
        f: Callable ``f(leaves, inputs)`` built from torch primitives.
        params: Parameter set; only trainable leaves are differentiated.
        inputs: Program inputs (never differentiated).
        reduction: None for programs that already return a scalar, else
            ``'sum'`` or ``'mean'``.

    Returns:
        Tuple of (scalar value, gradients keyed by trainable leaf name).

    Raises:
        ContractViolation: If the value is not scalar and no reduction is given.
        NonFiniteError: If the forward pass produces NaN, naming the primitive.
    """
    leaves = {
        name: value.detach().clone().requires_grad_(params.is_trainable(name))
        for name, value in params.items()
    }
    with NonFiniteGuard():
        value = _reduce(f(leaves, inputs), reduction)

    trainable = params.trainable
    if not trainable or not value.requires_grad:
        return value.detach(), {name: torch.zeros_like(leaves[name]) for name in trainable}

    raw = torch.autograd.grad(value, [leaves[name] for name in trainable], allow_unused=True)
    grads = {
        name: torch.zeros_like(leaves[name]) if g is None else g.detach()
        for name, g in zip(trainable, raw)
    }
    return value.detach(), grads


def finite_difference_gradient(
    f: Program,
    params: ParamSet,
    inputs: Tensor,
    step: float = 1e-5,
    reduction: Optional[str] = None,
) -> Dict[str, Tensor]:
    """
    Central finite-difference gradient of every trainable scalar entry.

    Args:
        f: Program as for :func:`evaluate_with_gradients`.
        params: Parameter set.
        inputs: Program inputs.
        step: Perturbation applied to one entry at a time.
        reduction: As for :func:`evaluate_with_gradients`.

    Returns:
        Gradients keyed by trainable leaf name.

    Raises:
        ValueError: If step is not positive.
    """
    if step <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {step}")

    leaves = {name: value.detach().contiguous().clone() for name, value in params.items()}
    grads: Dict[str, Tensor] = {}
    with torch.no_grad():
        for name in params.trainable:
            flat = leaves[name].view(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = _reduce(f(leaves, inputs), reduction).item()
                flat[i] = original - step
                minus = _reduce(f(leaves, inputs), reduction).item()
                flat[i] = original
                grad[i] = (plus - minus) / (2.0 * step)
            grads[name] = grad.view_as(leaves[name])
    return grads


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic and finite-difference gradients."""

    max_rel_err: float
    passed: bool
    worst_leaf: Optional[str]
    per_leaf: Dict[str, float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'max_rel_err': self.max_rel_err,
            'pass': self.passed,
            'worst_leaf': self.worst_leaf,
            'per_leaf': self.per_leaf,
        }


def relative_error(a: Tensor, b: Tensor) -> float:
    """``|a-b| / max(1e-8, |a|+|b|)`` with 2-norms over the flattened leaf."""
    num = torch.linalg.vector_norm(a - b).item()
    den = torch.linalg.vector_norm(a).item() + torch.linalg.vector_norm(b).item()
    return num / max(1e-8, den)


def compare_gradients(
    analytic: Mapping[str, Tensor],
    numeric: Mapping[str, Tensor],
    rel_tol: float,
) -> GradCheckReport:
    """
    Compare two gradient sets leaf by leaf.

    Raises:
        ValueError: If rel_tol is not positive or the leaf names differ.
    """
    if rel_tol <= 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    if set(analytic) != set(numeric):
        raise ValueError("Analytic and numeric gradients cover different leaves")

    per_leaf = {name: relative_error(analytic[name], numeric[name]) for name in analytic}
    worst = max(per_leaf, key=per_leaf.get) if per_leaf else None
    max_err = per_leaf[worst] if worst is not None else 0.0
    return GradCheckReport(max_err, max_err <= rel_tol, worst, per_leaf)


def grad_check(
    f: Program,
    params: ParamSet,
    inputs: Tensor,
    rel_tol: float = 1e-4,
    step: float = 1e-5,
    reduction: Optional[str] = None,
) -> GradCheckReport:
    """
    Check analytic gradients against central finite differences.

    Args:
        f: Program as for :func:`evaluate_with_gradients`.
        params: Parameter set.
        inputs: Program inputs.
        rel_tol: Largest accepted per-leaf relative error.
        step: Finite-difference step.
        reduction: As for :func:`evaluate_with_gradients`.

    Returns:
        Report with the maximum relative error and pass flag.
    """
    _, analytic = evaluate_with_gradients(f, params, inputs, reduction)
    numeric = finite_difference_gradient(f, params, inputs, step, reduction)
    report = compare_gradients(analytic, numeric, rel_tol)
    logger.debug(f"Gradient check: max_rel_err={report.max_rel_err:.3e} leaf={report.worst_leaf}")
    return report


def module_program(module: nn.Module, loss: Callable[[Any], Tensor]) -> Program:
    """
    Turn a module and a loss on its output into a program over named leaves.

    Leaves are substituted with ``torch.func.functional_call``, so parameter
    names are the module's ``state_dict`` keys.
    """
    def program(leaves: Mapping[str, Tensor], inputs: Tensor) -> Tensor:
        return loss(torch.func.functional_call(module, dict(leaves), (inputs,)))

    return program


def conv2d(images: Tensor, kernel: Tensor, mode: str = 'zero') -> Tensor:
    """
    Same-size 2D convolution of one image or a batch of images.

    Args:
        images: Tensor of shape (H, W) or (B, H, W).
        kernel: Odd-sized (kh, kw) kernel.
        mode: ``'zero'`` for zero padding, ``'circular'`` for periodic wrap.

    Returns:
        Convolved tensor with the input's shape.

    Raises:
        ValueError: If the kernel is larger than the image, even-sized, or
            the mode is unknown.
    """
    kh, kw = kernel.shape
    height, width = images.shape[-2:]
    if kh > height or kw > width:
        raise ValueError(f"Kernel {kh}x{kw} larger than image {height}x{width}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"Kernel extents must be odd, got {kh}x{kw}")

    batch = images.reshape(-1, 1, height, width)
    weight = torch.flip(kernel, dims=(0, 1)).reshape(1, 1, kh, kw).to(batch.dtype)
    pad = (kw // 2, kw // 2, kh // 2, kh // 2)
    if mode == 'zero':
        batch = F.pad(batch, pad)
    elif mode == 'circular':
        batch = F.pad(batch, pad, mode='circular')
    else:
        raise ValueError(f"Unknown convolution mode '{mode}'")
    return F.conv2d(batch, weight).reshape(images.shape)
