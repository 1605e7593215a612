"""Neural building blocks on top of :mod:`retr.autodiff`.

Layers own their parameters as named Tensors; ``named_parameters`` walks a
module tree in a fixed order so checkpoints and optimizer state line up.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Anything holding Tensors or sub-Modules as attributes / lists."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = _param(rng, (n_in, n_out), gain * math.sqrt(2.0 / (n_in + n_out)))
        self.bias = _zeros((1, n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[..., n_in] @ W + b; leading axes are folded into one for the matmul."""
    lead = x.shape[:-1]
    n_in, n_out = weight.shape
    if x.shape[-1] != n_in:
        raise ad.ShapeError(f"linear: input shape {x.shape} vs weight shape {weight.shape}")
    y = ad.matmul(ad.reshape(x, (-1, n_in)), weight) + bias
    return ad.reshape(y, lead + (n_out,))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones((1, dim)), requires_grad=True)
        self.shift = _zeros((1, dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    lead = x.shape[:-1]
    d = x.shape[-1]
    x2 = ad.reshape(x, (-1, d))
    mu = ad.mean(x2, axis=-1, keepdims=True)
    xc = x2 - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    y = xc / ad.sqrt(var + eps) * gain + shift
    return ad.reshape(y, lead + (d,))


class MLP(Module):
    """Stack of Linear layers, ReLU between them, none after the last.

    ``layer_norm`` flags add a LayerNorm in front of the matching layer.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: np.random.Generator,
        layer_norm: Optional[Sequence[bool]] = None,
        final_gain: float = 1.0,
    ):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.widths = list(widths)
        flags = list(layer_norm) if layer_norm is not None else [False] * (len(widths) - 1)
        if len(flags) != len(widths) - 1:
            raise ValueError("one layer-norm flag per layer")
        n = len(widths) - 1
        self.layers = [
            Linear(a, b, rng, gain=final_gain if i == n - 1 else 1.0)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.norms = [LayerNorm(a) if f else None for a, f in zip(widths[:-1], flags)]

    def named_parameters(self, prefix: str = ""):
        out = OrderedDict()
        for i, (norm, layer) in enumerate(zip(self.norms, self.layers)):
            if norm is not None:
                out.update(norm.named_parameters(f"{prefix}norms.{i}."))
            out.update(layer.named_parameters(f"{prefix}layers.{i}."))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(params: MLP, x: Tensor) -> Tensor:
    if x.shape[-1] != params.widths[0]:
        raise ad.ShapeError(f"mlp: input last dim {x.shape[-1]} != first width {params.widths[0]}")
    n = len(params.layers)
    for i, (norm, layer) in enumerate(zip(params.norms, params.layers)):
        if norm is not None:
            x = norm(x)
        x = layer(x)
        if i < n - 1:
            x = ad.relu(x)
    return x


class MultiHeadAttention(Module):
    """Projections for H-head attention over model dim D (D % H == 0)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def __call__(self, query, key, value, mask=None):
        return mha_forward(self, query, key, value, mask)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., L, D) -> (..., H, L, D/H)
    *lead, length, dim = x.shape
    x = ad.reshape(x, tuple(lead) + (length, heads, dim // heads))
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    return ad.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    x = ad.transpose(x, axes)
    return ad.reshape(x, tuple(lead) + (length, heads * dh))


def mha_forward(
    params: MultiHeadAttention,
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention with per-head scale 1/sqrt(D/H).

    Shapes: query (..., Q, D), key/value (..., S, D); ``mask`` (Q, S) or
    broadcastable, True where attention is permitted. Returns the output
    (..., Q, D) and the attention maps (..., H, Q, S).
    """
    d = params.dim
    for name, t in (("query", query), ("key", key), ("value", value)):
        if t.shape[-1] != d:
            raise ad.ShapeError(f"mha: {name} shape {t.shape} vs model dim {d}")
    if key.shape[:-1] != value.shape[:-1]:
        raise ad.ShapeError(f"mha: key shape {key.shape} vs value shape {value.shape}")
    h = params.heads
    q = _split_heads(params.q(query), h)
    k = _split_heads(params.k(key), h)
    v = _split_heads(params.v(value), h)
    logits = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(d // h))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        nq, ns = logits.shape[-2:]
        if mask.shape[-2:] != (nq, ns):
            raise ad.ShapeError(f"mha: mask shape {mask.shape} vs logits {(nq, ns)}")
        if not mask.any(axis=-1).all():
            raise ValueError("mha: a query row has no permitted keys")
        # insert the head axis so a (..., Q, S) mask lines up with (..., H, Q, S)
        if mask.ndim >= 3:
            mask = np.expand_dims(mask, -3)
    attn = ad.softmax(logits, axis=-1, mask=mask)
    out = _merge_heads(ad.matmul(attn, v))
    return params.o(out), attn


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """In-place Adam update with bias correction; returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam: params, grads and state differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam: grad shape {g.shape} vs param shape {p.shape}")
        if not np.isfinite(g).all():
            raise ad.NonFiniteError("adam: non-finite gradient; step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def cosine_lr(step: int, total_steps: int, lr_start: float = 1e-4, lr_end: float = 1e-6) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_end
    if step < 0:
        raise ValueError("step must be non-negative")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   magic b"RETRCKPT", uint32 version, uint32 record count, then per record:
#   uint32 name length, utf-8 name, uint32 ndim, int64 shape[ndim],
#   float64 data[prod(shape)] in row-major order.

CKPT_MAGIC = b"RETRCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named: Dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(named)))
        for name, t in named.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = read("<I")
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = read("<I")
        shape = read(f"<{ndim}q") if ndim else ()
        count_f = int(np.prod(shape)) if ndim else 1
        nbytes = 8 * count_f
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count_f, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    return out


def load_into(module: Module, state: Dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into a module; names and shapes must match."""
    named = module.named_parameters()
    missing = [k for k in named if k not in state]
    extra = [k for k in state if k not in named]
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, p in named.items():
        if state[k].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {state[k].shape} vs model {p.shape}")
        p.data[...] = state[k]
