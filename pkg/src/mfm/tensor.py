"""Dense tensor primitives on top of torch autograd.

Every layer in the package is built from the closed set of primitives in
``PrimitiveId``. Each primitive validates shapes, rejects non-finite values
and then defers to torch for the actual computation and its vector-Jacobian
product. ``gradcheck`` is an independent central-difference check, and the
checkpoint helpers implement the manifest + raw blob format.
"""
from __future__ import annotations

import contextlib
import enum
import json
import math
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class PrimitiveId(str, enum.Enum):
    MATMUL = "matmul"
    CONV2D = "conv2d"
    TRANSPOSED_CONV2D = "transposed_conv2d"
    BILINEAR_RESIZE = "bilinear_resize"
    LINEAR = "linear"
    LAYER_NORM = "layer_norm"
    SOFTMAX = "softmax"
    GELU = "gelu"
    RELU = "relu"
    ADD = "add"
    HADAMARD = "hadamard"
    MEAN = "mean"
    CROSS_ENTROPY_WITH_IGNORE = "cross_entropy_with_ignore"


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a primitive or a training step."""


IGNORE_INDEX = 255

_CHECKS = True


@contextlib.contextmanager
def checks(enabled: bool):
    """Temporarily toggle the per-primitive finiteness checks."""
    global _CHECKS
    prev, _CHECKS = _CHECKS, enabled
    try:
        yield
    finally:
        _CHECKS = prev


def _shape_error(op, msg, *shapes):
    ext = ", ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{op}: {msg} (got {ext})")


def _finite(op, *tensors):
    if not _CHECKS:
        return
    for t in tensors:
        if t is not None and t.is_floating_point() and not torch.isfinite(t).all():
            raise NumericalError(f"{op}: non-finite value in tensor of shape {tuple(t.shape)}")


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def matmul(a, b):
    op = "matmul"
    _finite(op, a, b)
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error(op, "inner extents differ", a.shape, b.shape)
    out = torch.matmul(a, b)
    _finite(op, out)
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0):
    op = "conv2d"
    _finite(op, x, weight, bias)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error(op, "expected N×C×H×W input and O×C×k×k kernel with equal C",
                           x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error(op, "bias must have one entry per output channel", bias.shape, weight.shape)
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    _finite(op, out)
    return out


def transposed_conv2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    op = "transposed_conv2d"
    _finite(op, x, weight, bias)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise _shape_error(op, "expected N×C×H×W input and C×O×k×k kernel with equal C",
                           x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise _shape_error(op, "bias must have one entry per output channel", bias.shape, weight.shape)
    s, p, q = _pair(stride), _pair(padding), _pair(output_padding)
    if any(q[i] >= s[i] for i in range(2)):
        raise _shape_error(op, f"output_padding {q} must be smaller than stride {s}", x.shape)
    out = F.conv_transpose2d(x, weight, bias, stride=s, padding=p, output_padding=q)
    _finite(op, out)
    return out


def transposed_conv2d_out_size(size, kernel, stride=1, padding=0, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def bilinear_resize(x, size):
    op = "bilinear_resize"
    _finite(op, x)
    size = _pair(size)
    if x.dim() != 4 or min(size) <= 0:
        raise _shape_error(op, f"expected N×C×H×W input and positive target {size}", x.shape)
    if tuple(x.shape[-2:]) == size:
        return x
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    _finite(op, out)
    return out


def linear(x, weight, bias=None):
    op = "linear"
    _finite(op, x, weight, bias)
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise _shape_error(op, "last input extent must equal weight in-features", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error(op, "bias must match out-features", bias.shape, weight.shape)
    out = F.linear(x, weight, bias)
    _finite(op, out)
    return out


def layer_norm(x, weight, bias, eps=1e-5):
    op = "layer_norm"
    _finite(op, x, weight, bias)
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise _shape_error(op, "affine parameters must match last extent", x.shape, weight.shape, bias.shape)
    out = F.layer_norm(x, x.shape[-1:], weight, bias, eps)
    _finite(op, out)
    return out


def softmax(x, dim=-1):
    _finite("softmax", x)
    out = torch.softmax(x, dim=dim)
    _finite("softmax", out)
    return out


def gelu(x):
    _finite("gelu", x)
    return F.gelu(x)


def relu(x):
    _finite("relu", x)
    return F.relu(x)


def _broadcastable(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error(op, "extents do not broadcast", a.shape, b.shape) from None


def add(a, b):
    _finite("add", a, b)
    _broadcastable("add", a, b)
    out = a + b
    _finite("add", out)
    return out


def hadamard(a, b):
    _finite("hadamard", a, b)
    _broadcastable("hadamard", a, b)
    out = a * b
    _finite("hadamard", out)
    return out


def mean(x, dim=None, keepdim=False):
    _finite("mean", x)
    if dim is None:
        return x.mean()
    return x.mean(dim=dim, keepdim=keepdim)


def cross_entropy_with_ignore(logits, target, ignore_index=IGNORE_INDEX, weight=None):
    """Mean CE over pixels whose target differs from ``ignore_index``.

    Returns an exact zero (still attached to the graph) when every pixel is
    ignored. ``weight`` optionally scales each pixel's term before the sum.
    """
    op = "cross_entropy_with_ignore"
    _finite(op, logits)
    if logits.dim() < 2 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise _shape_error(op, "target must equal logits without the class axis", logits.shape, target.shape)
    target = target.long()
    valid = target != ignore_index
    bad = target[valid]
    if bad.numel() and (bad.min() < 0 or bad.max() >= logits.shape[1]):
        raise ValueError(f"{op}: label outside [0, {logits.shape[1]}) found")
    per_pixel = F.cross_entropy(logits, target.masked_fill(~valid, 0), reduction="none")
    per_pixel = per_pixel * valid.to(per_pixel.dtype)
    if weight is not None:
        per_pixel = per_pixel * weight
    count = valid.sum()
    out = per_pixel.sum() / count.clamp(min=1).to(per_pixel.dtype)
    _finite(op, out)
    return out


_REGISTRY = {
    PrimitiveId.MATMUL: matmul,
    PrimitiveId.CONV2D: conv2d,
    PrimitiveId.TRANSPOSED_CONV2D: transposed_conv2d,
    PrimitiveId.BILINEAR_RESIZE: bilinear_resize,
    PrimitiveId.LINEAR: linear,
    PrimitiveId.LAYER_NORM: layer_norm,
    PrimitiveId.SOFTMAX: softmax,
    PrimitiveId.GELU: gelu,
    PrimitiveId.RELU: relu,
    PrimitiveId.ADD: add,
    PrimitiveId.HADAMARD: hadamard,
    PrimitiveId.MEAN: mean,
    PrimitiveId.CROSS_ENTROPY_WITH_IGNORE: cross_entropy_with_ignore,
}


def forward(op, inputs, **attrs):
    """Apply primitive ``op`` to a list of input tensors."""
    return _REGISTRY[PrimitiveId(op)](*inputs, **attrs)


def _leaves(output):
    seen, found, stack = set(), [], [output.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        var = getattr(fn, "variable", None)
        if var is not None:
            found.append(var)
        stack.extend(f for f, _ in fn.next_functions)
    return found


def backward(output, seed=None):
    """Run reverse-mode differentiation from ``output``.

    Returns ``(leaf, grad)`` pairs for every leaf that requires grad.
    """
    if output.grad_fn is None:
        raise RuntimeError("backward: tensor was not produced by a recorded composition of primitives")
    if seed is None:
        seed = torch.ones_like(output)
    if seed.shape != output.shape:
        raise _shape_error("backward", "seed must match output", seed.shape, output.shape)
    torch.autograd.backward(output, seed)
    return [(leaf, leaf.grad) for leaf in _leaves(output)]


# ----------------------------------------------------------------------------
# gradient checking

def _case(op, gen):
    def r(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    op = PrimitiveId(op)
    if op is PrimitiveId.MATMUL:
        return [r(3, 4), r(4, 2)], {}
    if op is PrimitiveId.CONV2D:
        return [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)], {"stride": 1, "padding": 1}
    if op is PrimitiveId.TRANSPOSED_CONV2D:
        return [r(1, 2, 3, 3), r(2, 2, 3, 3), r(2)], {"stride": 2, "padding": 1, "output_padding": 1}
    if op is PrimitiveId.BILINEAR_RESIZE:
        return [r(1, 2, 3, 4)], {"size": (5, 7)}
    if op is PrimitiveId.LINEAR:
        return [r(4, 5), r(3, 5), r(3)], {}
    if op is PrimitiveId.LAYER_NORM:
        return [r(4, 6), 1 + 0.1 * r(6), r(6)], {}
    if op is PrimitiveId.SOFTMAX:
        return [r(3, 5)], {"dim": -1}
    if op in (PrimitiveId.GELU, PrimitiveId.RELU):
        x = r(4, 6)
        # keep away from the relu kink so central differences are meaningful
        x = x + torch.sign(x) * 0.05
        return [x], {}
    if op in (PrimitiveId.ADD, PrimitiveId.HADAMARD):
        return [r(3, 4), r(1, 4)], {}
    if op is PrimitiveId.MEAN:
        return [r(4, 5)], {"dim": 1}
    if op is PrimitiveId.CROSS_ENTROPY_WITH_IGNORE:
        target = torch.randint(0, 3, (1, 3, 4), generator=gen)
        target[0, 0, 0] = IGNORE_INDEX
        return [r(1, 3, 3, 4), target], {}
    raise KeyError(op)


def random_case(op, seed):
    """Seeded double-precision inputs (≤ 64 entries each) for ``op``."""
    gen = torch.Generator().manual_seed(seed)
    return _case(op, gen)


def gradcheck(op, inputs, eps=1e-6, attrs=None, seed=0):
    """Max relative error between autograd and central differences.

    The output is contracted with a fixed random cotangent so every output
    entry participates. Integer inputs are treated as constants.
    """
    attrs = attrs or {}
    xs = [x.detach().to(torch.float64).clone() if x.is_floating_point() else x for x in inputs]
    cot = None

    def f(args):
        nonlocal cot
        y = forward(op, args, **attrs)
        if cot is None:
            g = torch.Generator().manual_seed(seed + 1)
            cot = torch.randn(y.shape, generator=g, dtype=torch.float64)
        return (y * cot).sum()

    args = [x.requires_grad_(True) if x.is_floating_point() else x for x in xs]
    analytic = torch.autograd.grad(f(args), [a for a in args if a.is_floating_point()], allow_unused=True)
    worst = 0.0
    k = 0
    with torch.no_grad():
        for i, x in enumerate(xs):
            if not x.is_floating_point():
                continue
            ga = analytic[k] if analytic[k] is not None else torch.zeros_like(x)
            k += 1
            flat = x.detach().view(-1)
            for j in range(flat.numel()):
                old = flat[j].item()
                flat[j] = old + eps
                up = f([a.detach() if a.is_floating_point() else a for a in xs]).item()
                flat[j] = old - eps
                down = f([a.detach() if a.is_floating_point() else a for a in xs]).item()
                flat[j] = old
                num = (up - down) / (2 * eps)
                an = ga.reshape(-1)[j].item()
                err = abs(an - num) / max(1e-8, abs(an) + abs(num))
                worst = max(worst, err)
    return worst


def gradcheck_fn(fn, params, eps=1e-6, seed=0):
    """Central-difference check of a scalar-valued ``fn()`` w.r.t. ``params``.

    ``params`` must be float64 leaves that ``fn`` closes over; they are
    perturbed in place. Returns the max relative error over all entries.
    """
    loss = fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, ga in zip(params, analytic):
            ga = torch.zeros_like(p) if ga is None else ga
            flat = p.view(-1)
            for j in range(flat.numel()):
                old = flat[j].item()
                flat[j] = old + eps
                up = fn().item()
                flat[j] = old - eps
                down = fn().item()
                flat[j] = old
                num = (up - down) / (2 * eps)
                an = ga.reshape(-1)[j].item()
                worst = max(worst, abs(an - num) / max(1e-8, abs(an) + abs(num)))
    return worst


# ----------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def save_checkpoint(path, tensors):
    """Write ``{name: tensor}`` as manifest.json plus one little-endian f32 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = {}, 0
    with open(path / BLOB, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
            raw = arr.tobytes(order="C")
            fh.write(raw)
            entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "file": BLOB}
            offset += len(raw)
    with open(path / MANIFEST, "w") as fh:
        json.dump({"tensors": entries}, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    path = Path(path)
    with open(path / MANIFEST) as fh:
        manifest = json.load(fh)["tensors"]
    blobs = {}
    out = {}
    for name, e in manifest.items():
        if e["dtype"] != "f32":
            raise ValueError(f"{name}: unsupported dtype {e['dtype']}")
        if e["file"] not in blobs:
            blobs[e["file"]] = (path / e["file"]).read_bytes()
        count = math.prod(e["shape"])
        arr = np.frombuffer(blobs[e["file"]], dtype="<f4", count=count, offset=e["offset"])
        out[name] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return out


def strip_checkpoint(src, dst, prefix):
    """Copy a checkpoint without the tensors whose names start with ``prefix``."""
    kept = {k: v for k, v in load_checkpoint(src).items() if not k.startswith(prefix)}
    save_checkpoint(dst, kept)
    return sorted(kept)


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    os.environ.setdefault("PYTHONHASHSEED", str(seed))
