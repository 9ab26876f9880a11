"""Layer kernels, parameter containers and the Adam optimizer.

Tensors are plain numpy arrays (float32 in production; the layers are dtype
generic so gradient checks can run in float64). Every layer follows the
``forward(...) -> (out, cache)`` / ``backward(cache, dout) -> grads`` pattern,
and accepts either a single ``(C, H, W)`` image or a channel-major
``(C, B, H, W)`` batch. Channel-major keeps every convolution a single GEMM
without transposes; :mod:`splitfed.segnet` converts at the network boundary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import FormatError, ShapeError, UnsupportedVersionError, ValidationError

DTYPE = np.float32


class ParamSet(Mapping):
    """Ordered, read-only mapping of parameter name -> array.

    The arrays are flagged non-writeable, so nothing can update a ParamSet in
    place; optimizers build a new one instead.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] | Mapping = ()):
        if isinstance(entries, Mapping):
            entries = entries.items()
        store = {}
        for name, value in entries:
            if not isinstance(name, str):
                raise ValidationError(f"parameter name must be str, got {type(name).__name__}")
            if name in store:
                raise ValidationError(f"duplicate parameter name {name!r}")
            arr = np.array(value, copy=True)
            if arr.dtype.kind != "f":
                arr = arr.astype(DTYPE)
            arr.flags.writeable = False
            store[name] = arr
        self._entries = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        if list(self) != list(other):
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )

    __hash__ = None

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}:{tuple(v.shape)}" for k, v in self.items())
        return f"ParamSet({inner})"

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(v.size for v in self.values()))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, v.astype(dtype)) for k, v in self.items())

    def replace(self, **updates: np.ndarray) -> "ParamSet":
        return ParamSet((k, updates.get(k, v)) for k, v in self.items())

    def merged(self, other: "ParamSet") -> "ParamSet":
        return ParamSet(list(self.items()) + list(other.items()))

    def subset(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet((k, self[k]) for k in names)

    def to_bytes(self) -> bytes:
        return params_to_bytes(self)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return ParamSet((k, np.zeros_like(v)) for k, v in params.items())


def _as_planes(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what}: expected rank 3 (C,H,W) or 4 (C,B,H,W), got rank {x.ndim}")


# ---------------------------------------------------------------- layers


def conv2d(x, weight, bias):
    """Stride-1 'same' convolution with a square 1x1 or 3x3 kernel.

    ``weight`` is ``(C_out, C_in, k, k)`` and the input is zero padded by
    ``(k - 1) // 2``. Returns ``(out, cache)``.
    """
    xb, squeeze = _as_planes(np.asarray(x), "conv2d input")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight: expected rank 4, got rank {weight.ndim}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d weight: kernel axes must be equal and in {{1, 3}}, got {k}x{k2}")
    if xb.shape[0] != c_in:
        raise ShapeError(f"conv2d: input channel axis is {xb.shape[0]} but weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias: output channel axis is {bias.shape} but weight has {c_out}")
    _, B, H, W = xb.shape
    xb = np.ascontiguousarray(xb, dtype=weight.dtype)
    cols = xb.reshape(c_in, B * H * W) if k == 1 else kernels.im2col(xb, k, (k - 1) // 2)
    out = weight.reshape(c_out, c_in * k * k) @ cols
    out += bias[:, None]
    out = out.reshape(c_out, B, H, W)
    cache = (cols, weight, xb.shape, squeeze)
    return (out[:, 0] if squeeze else out), cache


def conv2d_backward(cache, dout, need_dx=True, need_params=True):
    """Returns ``(dx, dweight, dbias)``; skipped parts come back as None."""
    cols, weight, xshape, squeeze = cache
    c_out, c_in, k, _ = weight.shape
    _, B, H, W = xshape
    d = np.asarray(dout)
    if squeeze and d.ndim == 3:
        d = d[:, None]
    if d.shape != (c_out, B, H, W):
        raise ShapeError(f"conv2d_backward: dout shape {np.shape(dout)} does not match the conv output")
    d2 = np.ascontiguousarray(d, dtype=weight.dtype).reshape(c_out, B * H * W)
    dweight = dbias = None
    if need_params:
        dweight = (d2 @ cols.T).reshape(weight.shape)
        dbias = d2.sum(axis=1)
    if not need_dx:
        return None, dweight, dbias
    dcols = weight.reshape(c_out, c_in * k * k).T @ d2
    if k == 1:
        dx = dcols.reshape(xshape)
    else:
        dx = kernels.col2im(dcols, xshape, k, (k - 1) // 2)
    return (dx[:, 0] if squeeze else dx), dweight, dbias


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False), x


def relu_backward(cache, dout):
    # subgradient at exactly 0 is 0
    return np.where(cache > 0, dout, 0).astype(np.result_type(dout), copy=False)


def maxpool2(x):
    """2x2/stride-2 max pool. Ties go to the first element in row-major order."""
    xb, squeeze = _as_planes(np.asarray(x), "maxpool2 input")
    if xb.shape[2] % 2 or xb.shape[3] % 2:
        raise ShapeError(f"maxpool2: spatial axes must be even, got H={xb.shape[2]} W={xb.shape[3]}")
    out, idx = kernels.maxpool2_forward(np.ascontiguousarray(xb))
    return (out[:, 0] if squeeze else out), (idx, squeeze)


def maxpool2_backward(cache, dout):
    idx, squeeze = cache
    d = np.asarray(dout)
    if squeeze and d.ndim == 3:
        d = d[:, None]
    if d.shape != idx.shape:
        raise ShapeError(f"maxpool2_backward: dout shape {np.shape(dout)} does not match the pooled output")
    dx = kernels.maxpool2_backward(np.ascontiguousarray(d), idx)
    return dx[:, 0] if squeeze else dx


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    xb, squeeze = _as_planes(np.asarray(x), "upsample2 input")
    out = kernels.upsample2_forward(np.ascontiguousarray(xb))
    return (out[:, 0] if squeeze else out), (xb.shape, squeeze)


def upsample2_backward(cache, dout):
    shape, squeeze = cache
    d = np.asarray(dout)
    if squeeze and d.ndim == 3:
        d = d[:, None]
    C, B, H, W = shape
    if d.shape != (C, B, 2 * H, 2 * W):
        raise ShapeError(f"upsample2_backward: dout shape {np.shape(dout)} does not match the upsampled output")
    dx = kernels.upsample2_backward(np.ascontiguousarray(d))
    return dx[:, 0] if squeeze else dx


# ---------------------------------------------------------------- init


def init_params(layout: Sequence[tuple[str, Sequence[int]]], seed: int) -> ParamSet:
    """He-normal weights (``std = sqrt(2 / fan_in)``) and zero biases.

    ``layout`` lists ``(name, dims)``; rank-1 entries are biases, anything of
    rank >= 2 is a weight with fan-in ``prod(dims[1:])``.
    """
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    entries = []
    for name, dims in layout:
        dims = tuple(int(d) for d in dims)
        if len(dims) == 1:
            entries.append((name, np.zeros(dims, dtype=DTYPE)))
        else:
            fan_in = int(np.prod(dims[1:]))
            w = rng.standard_normal(dims) * np.sqrt(2.0 / fan_in)
            entries.append((name, w.astype(DTYPE)))
    return ParamSet(entries)


# ---------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.t,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: ParamSet, grads: Mapping, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new ``(params, state)``.

    ``state`` is not modified.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} missing or mis-shaped")
    if len(grads) != len(params):
        extra = next(k for k in grads if k not in params)
        raise ShapeError(f"adam_step: gradient {extra!r} has no matching parameter")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_m, new_v, updated = {}, {}, []
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        updated.append((name, (p - state.lr * step).astype(p.dtype, copy=False)))
        new_m[name] = m
        new_v[name] = v
    return ParamSet(updated), AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


# ---------------------------------------------------------------- SFPS

SFPS_MAGIC = b"SFPS"
SFPS_VERSION = 1


def params_to_bytes(params: ParamSet) -> bytes:
    parts = [SFPS_MAGIC, struct.pack("<BI", SFPS_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over a bytes buffer."""

    def __init__(self, buf: bytes, base: int = 0):
        self.buf = memoryview(buf)
        self.pos = 0
        self.base = base

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                self.base + self.pos,
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def params_from_bytes(buf: bytes) -> ParamSet:
    r = _Reader(buf)
    if bytes(r.take(4, "magic")) != SFPS_MAGIC:
        raise FormatError("bad SFPS magic", 0)
    (version,) = r.unpack("<B", "version")
    if version != SFPS_VERSION:
        raise UnsupportedVersionError(f"unsupported SFPS version {version}", 4)
    (count,) = r.unpack("<I", "entry count")
    entries = []
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = bytes(r.take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"parameter name is not UTF-8: {exc}", start) from None
        if name in seen:
            raise FormatError(f"duplicate parameter name {name!r}", start)
        seen.add(name)
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4")
        entries.append((name, data.astype(DTYPE).reshape(dims)))
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes after SFPS payload", r.pos)
    return ParamSet(entries)


def save_params(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
