"""Length-prefixed binary protocol between encoder clients and the decoder server.

Frame layout (all little-endian)::

    u32 length      # = 1 + len(payload); at most 64 MiB
    u8  tag
    payload

Tensors inside payloads are ``u8 rank, rank * u32 dims, prod(dims) * f32``.
Every message has exactly one encoding, so ``encode(decode(b)) == b``.

Decoder attestation uses SHA-256 over the canonical SFPS serialization of the
decoder parameters; the 32-byte digest travels in ``DECODER_HASH``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .errors import FormatError, SplitFedError
from .nn import ParamSet, params_from_bytes, params_to_bytes

MAX_FRAME = 64 * 1024 * 1024
HASH_ALGORITHM = "sha256"


class ProtocolError(SplitFedError):
    """Malformed frame or payload."""


class IncompleteFrame(ProtocolError, ConnectionError):
    """The byte source ended in the middle of a frame."""

    def __init__(self, needed: int, context: str = "frame"):
        super().__init__(f"incomplete frame: {needed} more bytes needed to finish {context}")
        self.needed = needed


class FrameTooLarge(ProtocolError):
    pass


class UnknownTag(ProtocolError):
    def __init__(self, tag: int):
        super().__init__(f"unknown tag 0x{tag:02X}")
        self.tag = tag


class TensorSizeMismatch(ProtocolError):
    pass


# ---------------------------------------------------------------- tensors


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise ProtocolError("tensor rank above 255")
    head = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: memoryview, pos: int, last: bool) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``buf[pos:]``; returns ``(array, new_pos)``.

    With ``last=True`` the tensor must consume the buffer exactly.
    """
    end = len(buf)
    if pos + 1 > end:
        raise TensorSizeMismatch("tensor size mismatch: missing rank byte")
    rank = buf[pos]
    pos += 1
    if rank == 0:
        raise TensorSizeMismatch("tensor size mismatch: rank 0 tensor")
    if pos + 4 * rank > end:
        raise TensorSizeMismatch(f"tensor size mismatch: rank {rank} needs {4 * rank} dim bytes, {end - pos} left")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if 0 in dims:
        raise TensorSizeMismatch(f"tensor size mismatch: zero-length axis in dims {dims}")
    n = 1
    for d in dims:
        n *= d
    nbytes = 4 * n
    remaining = end - pos
    if nbytes > remaining or (last and nbytes != remaining):
        raise TensorSizeMismatch(
            f"tensor size mismatch: dims {dims} declare {nbytes} data bytes, payload has {remaining}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
    return arr, pos + nbytes


# ---------------------------------------------------------------- messages


class Message:
    TAG: ClassVar[int]

    def payload(self) -> bytes:
        return b""

    @classmethod
    def parse(cls, payload: memoryview) -> "Message":
        if len(payload):
            raise ProtocolError(f"{cls.__name__} carries no payload, got {len(payload)} bytes")
        return cls()

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.payload() == other.payload()

    __hash__ = None


def _utf8(payload: memoryview, what: str) -> str:
    try:
        return bytes(payload).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"{what} is not valid UTF-8: {exc.reason}") from None


@dataclass(eq=False)
class Hello(Message):
    client_id: str
    TAG: ClassVar[int] = 0x01

    def payload(self):
        return self.client_id.encode("utf-8")

    @classmethod
    def parse(cls, payload):
        return cls(_utf8(payload, "client id"))


@dataclass(eq=False)
class HelloAck(Message):
    """Server contract: latent ``(c, h, w)`` and image ``(h, w)``.

    The decoder hash served by ``DECODER_HASH`` is SHA-256 of the decoder's
    canonical SFPS bytes.
    """

    latent_c: int
    latent_h: int
    latent_w: int
    image_h: int
    image_w: int
    TAG: ClassVar[int] = 0x02

    def payload(self):
        return struct.pack("<5I", self.latent_c, self.latent_h, self.latent_w, self.image_h, self.image_w)

    @classmethod
    def parse(cls, payload):
        if len(payload) != 20:
            raise ProtocolError(f"HELLO_ACK payload must be 20 bytes, got {len(payload)}")
        return cls(*struct.unpack("<5I", payload))

    @property
    def latent_shape(self):
        return (self.latent_c, self.latent_h, self.latent_w)

    @property
    def image_shape(self):
        return (self.image_h, self.image_w)


@dataclass(eq=False)
class TrainStep(Message):
    """Batch latents ``(B,c,h,w)`` and ground-truth masks ``(B,1,H,W)``."""

    latents: np.ndarray
    masks: np.ndarray
    TAG: ClassVar[int] = 0x10

    def payload(self):
        return encode_tensor(self.latents) + encode_tensor(self.masks)

    @classmethod
    def parse(cls, payload):
        latents, pos = decode_tensor(payload, 0, last=False)
        masks, _ = decode_tensor(payload, pos, last=True)
        return cls(latents, masks)


@dataclass(eq=False)
class TrainResp(Message):
    loss: float
    d_latents: np.ndarray
    TAG: ClassVar[int] = 0x11

    def payload(self):
        return np.asarray(self.loss, dtype="<f4").tobytes() + encode_tensor(self.d_latents)

    @classmethod
    def parse(cls, payload):
        if len(payload) < 4:
            raise ProtocolError("TRAIN_RESP payload shorter than its loss field")
        # kept as float32 so every bit pattern, NaN payloads included, re-encodes unchanged
        loss = np.frombuffer(payload, dtype="<f4", count=1)[0].astype(np.float32)
        d, _ = decode_tensor(payload, 4, last=True)
        return cls(loss, d)


@dataclass(eq=False)
class Infer(Message):
    latents: np.ndarray
    TAG: ClassVar[int] = 0x20

    def payload(self):
        return encode_tensor(self.latents)

    @classmethod
    def parse(cls, payload):
        return cls(decode_tensor(payload, 0, last=True)[0])


@dataclass(eq=False)
class InferResp(Message):
    probs: np.ndarray
    TAG: ClassVar[int] = 0x21

    def payload(self):
        return encode_tensor(self.probs)

    @classmethod
    def parse(cls, payload):
        return cls(decode_tensor(payload, 0, last=True)[0])


class GetEncoderInit(Message):
    TAG: ClassVar[int] = 0x30

    def __repr__(self):
        return "GetEncoderInit()"


@dataclass(eq=False)
class EncoderWeights(Message):
    params: ParamSet
    TAG: ClassVar[int] = 0x31

    def payload(self):
        return params_to_bytes(self.params)

    @classmethod
    def parse(cls, payload):
        try:
            return cls(params_from_bytes(bytes(payload)))
        except FormatError as exc:
            raise ProtocolError(f"bad ENCODER_WEIGHTS payload: {exc}") from None


class GetDecoderHash(Message):
    TAG: ClassVar[int] = 0x40

    def __repr__(self):
        return "GetDecoderHash()"


@dataclass(eq=False)
class DecoderHash(Message):
    digest: bytes
    TAG: ClassVar[int] = 0x41

    def payload(self):
        if len(self.digest) != 32:
            raise ProtocolError("decoder hash must be 32 bytes")
        return bytes(self.digest)

    @classmethod
    def parse(cls, payload):
        if len(payload) != 32:
            raise ProtocolError(f"DECODER_HASH payload must be 32 bytes, got {len(payload)}")
        return cls(bytes(payload))


@dataclass(eq=False)
class Error(Message):
    code: int
    message: str
    TAG: ClassVar[int] = 0x7F

    def payload(self):
        return struct.pack("<H", self.code) + self.message.encode("utf-8")

    @classmethod
    def parse(cls, payload):
        if len(payload) < 2:
            raise ProtocolError("ERROR payload shorter than its code field")
        (code,) = struct.unpack_from("<H", payload, 0)
        return cls(code, _utf8(payload[2:], "error message"))


# error codes carried in ERROR frames
E_HANDSHAKE = 0x0001
E_SHAPE_CONTRACT = 0x0002
E_MASK_NOT_BINARY = 0x0003
E_NO_ENCODER = 0x0004
E_BAD_REQUEST = 0x0005
E_UNEXPECTED = 0x0006
E_INTERNAL = 0x0007

MESSAGE_TYPES = {
    cls.TAG: cls
    for cls in (Hello, HelloAck, TrainStep, TrainResp, Infer, InferResp,
                GetEncoderInit, EncoderWeights, GetDecoderHash, DecoderHash, Error)
}


@dataclass(frozen=True)
class Frame:
    tag: int
    payload: bytes

    @property
    def length(self) -> int:
        return 1 + len(self.payload)

    def to_bytes(self) -> bytes:
        if self.length > MAX_FRAME:
            raise FrameTooLarge(f"frame of {self.length} bytes exceeds the {MAX_FRAME}-byte limit")
        return struct.pack("<IB", self.length, self.tag) + self.payload


def to_frame(msg: Message) -> Frame:
    return Frame(msg.TAG, msg.payload())


def from_frame(frame: Frame) -> Message:
    cls = MESSAGE_TYPES.get(frame.tag)
    if cls is None:
        raise UnknownTag(frame.tag)
    return cls.parse(memoryview(frame.payload))


def encode_message(msg: Message) -> bytes:
    return to_frame(msg).to_bytes()


def _check_length(length: int) -> None:
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame declares {length} bytes, limit is {MAX_FRAME}")
    if length < 1:
        raise ProtocolError("frame length 0 leaves no room for the tag byte")


def decode_message(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    buf = memoryview(bytes(data))
    if len(buf) < 4:
        raise IncompleteFrame(4 - len(buf), "length prefix")
    (length,) = struct.unpack_from("<I", buf, 0)
    _check_length(length)
    if len(buf) < 4 + length:
        raise IncompleteFrame(4 + length - len(buf))
    if len(buf) > 4 + length:
        raise ProtocolError(f"{len(buf) - 4 - length} trailing bytes after frame")
    return from_frame(Frame(buf[4], bytes(buf[5:])))


# ---------------------------------------------------------------- streams


def _read_exact(stream, n: int, started: bool, context: str):
    """Read ``n`` bytes. Returns None on EOF before the first byte of a frame."""
    chunks = []
    got = 0
    recv = getattr(stream, "recv", None)
    while got < n:
        chunk = recv(n - got) if recv is not None else stream.read(n - got)
        if not chunk:
            if got == 0 and not started:
                return None
            raise IncompleteFrame(n - got, context)
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> Frame | None:
    """Read one frame from a socket or binary file.

    Returns None when the peer closed cleanly between frames; raises
    :class:`IncompleteFrame` when it closed mid-frame.
    """
    head = _read_exact(stream, 4, started=False, context="length prefix")
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    _check_length(length)
    body = _read_exact(stream, length, started=True, context="frame body")
    return Frame(body[0], body[1:])


def write_frame(stream, frame: Frame) -> None:
    data = frame.to_bytes()
    if hasattr(stream, "sendall"):
        stream.sendall(data)
    else:
        stream.write(data)
        flush = getattr(stream, "flush", None)
        if flush:
            flush()


def read_message(stream) -> Message | None:
    frame = read_frame(stream)
    return None if frame is None else from_frame(frame)


def write_message(stream, msg: Message) -> None:
    write_frame(stream, to_frame(msg))


def decoder_hash(params: ParamSet) -> bytes:
    """SHA-256 over the canonical SFPS serialization."""
    return hashlib.sha256(params_to_bytes(params)).digest()
