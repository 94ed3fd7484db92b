"""Tensor primitives with reverse-mode autodiff.

Tensors are ``torch.Tensor`` in N,C,H,W layout; the autograd graph plays the
role of the tape. The functions here add the shape validation the rest of the
package relies on, a float64 mode for gradient checking, and the raw ``RTN1``
dump format used for debugging.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

RTN_MAGIC = b"RTN1"


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    dtype = dtype or torch.get_default_dtype()
    return torch.tensor(np.asarray(data), dtype=dtype, requires_grad=requires_grad)


@contextlib.contextmanager
def f64_mode() -> Iterator[None]:
    """Run the enclosed block with float64 as the default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"axis {axis} out of range for rank-{x.dim()} tensor")
    return axis % x.dim()


# -- layers -----------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({o},)")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def group_norm(x: Tensor, groups: int = 8, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if x.dim() < 2:
        raise ShapeError("group_norm needs a channel axis")
    if groups <= 0 or x.shape[1] % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {x.shape[1]} channels")
    return F.group_norm(x, groups, weight, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    if x.dim() != 4:
        raise ShapeError("maxpool2d expects N,C,H,W")
    if x.shape[2] % window or x.shape[3] % window:
        raise ShapeError(f"maxpool2d: spatial {tuple(x.shape[2:])} not divisible by window {window}")
    return F.max_pool2d(x, window)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if x.dim() != 4:
        raise ShapeError("upsample_bilinear expects N,C,H,W")
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=_check_axis(x, axis))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape[-1]} and {b.shape[-2]} differ")
    return a @ b


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty sequence")
    axis = _check_axis(tensors[0], axis)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {tuple(other)} differ off axis {axis}")
    return torch.cat(list(tensors), dim=axis)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if isinstance(b, Tensor) and b.dim() > 0 and a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ (no broadcasting)")


def add(a: Tensor, b) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def sub(a: Tensor, b) -> Tensor:
    _same_shape(a, b, "sub")
    return a - b


def mul(a: Tensor, b) -> Tensor:
    _same_shape(a, b, "mul")
    return a * b


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return x.abs()


def square(x: Tensor) -> Tensor:
    return x * x


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=_check_axis(x, axis))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=_check_axis(x, axis))


# -- differentiation --------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is evaluated at float64 copies of ``x``; the error per element is
    ``|auto - fd| / max(|fd|, 1e-8)``.
    """
    base = x.detach().to(torch.float64).clone()
    probe = base.clone().requires_grad_(True)
    out = f(probe)
    if out.numel() != 1:
        raise ShapeError("grad_check: f must return a scalar")
    (auto,) = torch.autograd.grad(out.reshape(()), probe, allow_unused=True)
    auto = torch.zeros_like(base) if auto is None else auto.detach()

    flat = base.reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = f(base).item()
            flat[i] = orig - step
            lo = f(base).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * step)
    err = (auto.reshape(-1) - fd).abs() / fd.abs().clamp_min(1e-8)
    return float(err.max()) if err.numel() else 0.0


# -- raw dump format --------------------------------------------------------

def dump_tensor(t: Tensor, path: str | Path) -> None:
    arr = t.detach().cpu().to(torch.float32).numpy()
    with open(path, "wb") as fh:
        fh.write(RTN_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != RTN_MAGIC:
        raise ValueError(f"{path}: not an RTN1 tensor dump")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 4 * count:
        raise ValueError(f"{path}: payload length does not match dims {dims}")
    arr = np.frombuffer(raw, dtype="<f4", offset=offset, count=count).reshape(dims)
    return torch.from_numpy(arr.copy())
