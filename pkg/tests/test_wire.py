import dataclasses
import io
import socket

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import fuzzing
from splitfed import nn, wire

GOLDEN_MESSAGES = {
    "HELLO": wire.Hello("c2"),
    "HELLO_ACK": wire.HelloAck(32, 4, 4, 32, 32),
    "TRAIN_STEP": wire.TrainStep(np.array([0.5, -1.0], np.float32).reshape(1, 2, 1, 1),
                                 np.array([0, 1, 1, 0], np.float32).reshape(1, 1, 2, 2)),
    "TRAIN_RESP": wire.TrainResp(np.float32(0.6931471824645996),
                                 np.array([0.25, -0.125], np.float32).reshape(1, 2, 1, 1)),
    "INFER": wire.Infer(np.array([42.0], np.float32)),
    "INFER_RESP": wire.InferResp(np.array([0.25, 0.75], np.float32).reshape(1, 1, 1, 2)),
    "GET_ENCODER_INIT": wire.GetEncoderInit(),
    "ENCODER_WEIGHTS": wire.EncoderWeights(nn.ParamSet([("enc.proj.b", np.array([1.0, -1.0], np.float32))])),
    "GET_DECODER_HASH": wire.GetDecoderHash(),
    "DECODER_HASH": wire.DecoderHash(bytes(range(32))),
    "ERROR": wire.Error(4, "no encoder hosted"),
}


def test_golden_set_covers_every_tag():
    assert {type(m).TAG for m in GOLDEN_MESSAGES.values()} == set(wire.MESSAGE_TYPES)
    assert set(GOLDEN_MESSAGES) == set(fuzzing.GOLDEN)


@pytest.mark.parametrize("name", sorted(GOLDEN_MESSAGES))
def test_golden_bytes(name):
    raw = fuzzing.GOLDEN[name]
    assert wire.encode_message(GOLDEN_MESSAGES[name]) == raw
    decoded = wire.decode_message(raw)
    assert decoded == GOLDEN_MESSAGES[name]
    assert wire.encode_message(decoded) == raw


def test_infer_scalar_layout():
    raw = wire.encode_message(wire.Infer(np.array([42.0], np.float32)))
    assert raw.hex() == "0a000000" "20" "01" "01000000" "00002842"


def test_hello_round_trip():
    assert wire.decode_message(wire.encode_message(wire.Hello("c2"))) == wire.Hello("c2")


tensors = hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=4),
                     elements=st.floats(width=32, allow_nan=True))


@given(tensors, tensors, st.floats(width=32), st.text(max_size=20), st.integers(0, 0xFFFF))
def test_round_trip_properties(a, b, loss, text, code):
    for msg in (wire.TrainStep(a, b), wire.TrainResp(np.float32(loss), a), wire.Infer(a), wire.InferResp(b),
                wire.Hello(text), wire.Error(code, text)):
        raw = wire.encode_message(msg)
        again = wire.decode_message(raw)
        assert type(again) is type(msg)
        assert wire.encode_message(again) == raw


def test_error_messages():
    with pytest.raises(wire.IncompleteFrame, match="incomplete frame") as ei:
        wire.decode_message(fuzzing.GOLDEN["HELLO"][:-1])
    assert ei.value.needed == 1
    with pytest.raises(wire.UnknownTag, match="unknown tag 0x55"):
        wire.decode_message(b"\x01\x00\x00\x00\x55")
    bad = bytearray(fuzzing.GOLDEN["INFER"])
    bad[6] = 2  # claims 2 elements, carries 1
    with pytest.raises(wire.TensorSizeMismatch, match="tensor size mismatch"):
        wire.decode_message(bytes(bad))
    with pytest.raises(wire.ProtocolError, match="trailing"):
        wire.decode_message(fuzzing.GOLDEN["HELLO"] + b"\x00")


def test_oversized_frame_rejected_before_payload():
    header = (65 * 1024 * 1024).to_bytes(4, "little") + b"\x20"

    class Stream(io.BytesIO):
        def read(self, n=-1):
            assert n <= 4, "payload read after an oversized length prefix"
            return super().read(n)

    with pytest.raises(wire.FrameTooLarge):
        wire.read_frame(Stream(header))
    with pytest.raises(wire.FrameTooLarge):
        wire.decode_message(header)


def test_stream_framing():
    stream = io.BytesIO(fuzzing.GOLDEN["HELLO"] + fuzzing.GOLDEN["INFER"])
    assert wire.read_message(stream) == GOLDEN_MESSAGES["HELLO"]
    assert wire.read_message(stream) == GOLDEN_MESSAGES["INFER"]
    assert wire.read_message(stream) is None  # clean close between frames
    dirty = io.BytesIO(fuzzing.GOLDEN["INFER"][:4 + 3])
    with pytest.raises(wire.IncompleteFrame) as ei:
        wire.read_frame(dirty)
    assert ei.value.needed == 7


def test_socket_partial_writes_are_reassembled():
    a, b = socket.socketpair()
    raw = wire.encode_message(GOLDEN_MESSAGES["TRAIN_STEP"])
    try:
        for i in range(len(raw)):
            a.sendall(raw[i:i + 1])
        assert wire.read_message(b) == GOLDEN_MESSAGES["TRAIN_STEP"]
        a.close()
        assert wire.read_message(b) is None
    finally:
        b.close()


def test_rank_zero_and_zero_dims_rejected():
    with pytest.raises(wire.TensorSizeMismatch):
        wire.decode_message(b"\x02\x00\x00\x00\x20\x00")
    with pytest.raises(wire.TensorSizeMismatch):
        wire.decode_message(b"\x06\x00\x00\x00\x20\x01\x00\x00\x00\x00")


def test_decoder_hash_properties():
    p = nn.ParamSet([("dec.head.w", np.arange(4, dtype=np.float32))])
    h = wire.decoder_hash(p)
    assert len(h) == 32 and h == wire.decoder_hash(p)
    assert wire.decoder_hash(nn.params_from_bytes(nn.params_to_bytes(p))) == h
    flipped = np.arange(4, dtype=np.float32)
    flipped.view(np.uint32)[2] ^= 1
    assert wire.decoder_hash(nn.ParamSet([("dec.head.w", flipped)])) != h


def test_no_message_carries_a_raw_image():
    # only latents, masks, probabilities, weights, hashes and text cross the wire
    fields = {cls: {f.name for f in dataclasses.fields(cls)} if dataclasses.is_dataclass(cls) else set()
              for cls in wire.MESSAGE_TYPES.values()}
    assert not any(f in ("image", "images", "pixels") for fs in fields.values() for f in fs)
    assert fields[wire.TrainStep] == {"latents", "masks"}


def test_fuzz_smoke():
    res = fuzzing.fuzz(5000, seed=1)
    assert res.crashes == []
    assert res.rejected > 0 and res.decoded > 0
