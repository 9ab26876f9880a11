import logging
import math
import re
import socket
import threading
import time

import numpy as np
import pytest

from splitfed import client, losses, nn, segnet, server, wire
from splitfed.segnet import DecoderSpec, EncoderSpec


def _raw(address):
    return socket.create_connection(address, timeout=10)


def _batch(seed, b=2):
    rng = np.random.default_rng(seed)
    lat = rng.random((b, 32, 4, 4), dtype=np.float32)
    masks = (rng.random((b, 1, 32, 32)) < 0.3).astype(np.float32)
    return lat, masks


def test_request_before_hello_is_rejected(live_server):
    with _raw(live_server.address) as s:
        wire.write_message(s, wire.TrainStep(*_batch(0)))
        reply = wire.read_message(s)
        assert reply == wire.Error(wire.E_HANDSHAKE, "handshake required")
        # the session survives and a late HELLO still works
        wire.write_message(s, wire.Hello("late"))
        assert wire.read_message(s) == wire.HelloAck(32, 4, 4, 32, 32)


def test_error_codes(live_server):
    with client.Connection(live_server.address, "t") as conn:
        lat, masks = _batch(1)
        with pytest.raises(client.RemoteError) as ei:
            conn.train_step(lat[:, :16], masks)
        assert ei.value.code == wire.E_SHAPE_CONTRACT and "shape contract" in str(ei.value)
        with pytest.raises(client.RemoteError) as ei:
            conn.train_step(lat, masks[:, :, :16])
        assert ei.value.code == wire.E_SHAPE_CONTRACT
        with pytest.raises(client.RemoteError) as ei:
            conn.train_step(lat, masks * 0.5)
        assert ei.value.code == wire.E_MASK_NOT_BINARY
        with pytest.raises(client.RemoteError) as ei:
            conn.infer(lat[:1, :, :2])
        assert ei.value.code == wire.E_SHAPE_CONTRACT
        bad = lat.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(client.RemoteError) as ei:
            conn.infer(bad)
        assert ei.value.code == wire.E_BAD_REQUEST
        # errors never end the session
        assert len(conn.decoder_hash()) == 32


def test_no_encoder_hosted(source_pair):
    state = server.ServerState.create(source_pair[1])
    assert server.respond(state, wire.GetEncoderInit()) == wire.Error(wire.E_NO_ENCODER, "no encoder hosted")


def test_garbage_frame_answered_not_fatal(live_server):
    with _raw(live_server.address) as s:
        s.sendall(b"\x02\x00\x00\x00\x77\x00")
        reply = wire.read_message(s)
        assert isinstance(reply, wire.Error) and reply.code == wire.E_BAD_REQUEST
        wire.write_message(s, wire.Hello("x"))
        assert isinstance(wire.read_message(s), wire.HelloAck)


def test_zero_latent_zero_bias_decoder_loss_is_ln2():
    state = server.ServerState.create(segnet.build_decoder(DecoderSpec(), 0))
    masks = (np.random.default_rng(0).random((3, 1, 32, 32)) < 0.5).astype(np.float32)
    loss, d_lat = server.handle_train_step(state, np.zeros((3, 32, 4, 4), np.float32), masks)
    assert abs(loss - math.log(2)) < 1e-6
    probs = server.handle_infer(state, np.zeros((1, 32, 4, 4), np.float32))
    assert np.all(probs == 0.5)


def test_train_step_matches_local_oracle_exactly(source_pair, live_server):
    dec = source_pair[1]
    lat, masks = _batch(2, b=3)
    logits, cache = segnet.decoder_forward(dec, lat)
    res = losses.bce_from_logits(logits, masks)
    d_ref, _ = segnet.decoder_backward(dec, cache, res.d_logits)
    with client.Connection(live_server.address, "t") as conn:
        first = conn.train_step(lat, masks)
        second = conn.train_step(lat, masks)
    for loss, d in (first, second):
        assert loss == np.float32(res.loss)
        assert d.dtype == np.float32 and d.tobytes() == d_ref.tobytes()


def test_skipping_decoder_grads_leaves_latent_grad_unchanged(source_pair):
    lat, masks = _batch(3)
    a = server.handle_train_step(server.ServerState.create(source_pair[1]), lat, masks)
    b = server.handle_train_step(server.ServerState.create(source_pair[1], compute_decoder_grads=True), lat, masks)
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()


def test_infer_range_and_oracle(source_pair, live_server):
    lat = np.random.default_rng(4).standard_normal((2, 32, 4, 4)).astype(np.float32) * 3
    ref = losses.sigmoid(segnet.decoder_forward(source_pair[1], lat)[0])
    with client.Connection(live_server.address, "t") as conn:
        probs = conn.infer(lat)
    assert probs.tobytes() == ref.tobytes()
    assert np.all((probs > 0) & (probs < 1))


def test_encoder_weights_shipped_bit_exact(source_pair, live_server):
    with client.Connection(live_server.address, "t") as conn:
        got = conn.encoder_weights()
    assert got == source_pair[0]
    assert nn.params_to_bytes(got) == nn.params_to_bytes(source_pair[0])


def _hammer(address, cid, steps, errors):
    try:
        rng = np.random.default_rng(int(cid[1:]))
        with client.Connection(address, cid) as conn:
            for _ in range(steps):
                lat = rng.random((2, 32, 4, 4), dtype=np.float32)
                masks = (rng.random((2, 1, 32, 32)) < 0.3).astype(np.float32)
                loss, d = conn.train_step(lat, masks)
                assert math.isfinite(loss) and d.shape == lat.shape
    except Exception as exc:  # surfaced in the main thread
        errors.append((cid, exc))


def test_four_concurrent_clients_leave_decoder_unchanged(source_pair, live_server):
    before = wire.decoder_hash(source_pair[1])
    with client.Connection(live_server.address, "probe") as conn:
        assert conn.decoder_hash() == before
    errors = []
    threads = [threading.Thread(target=_hammer, args=(live_server.address, f"c{i}", 50, errors)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    with client.Connection(live_server.address, "probe") as conn:
        assert conn.decoder_hash() == before
    assert wire.decoder_hash(live_server.state.decoder_params) == before
    assert live_server.requests_served >= 4 * 51


def test_decoder_params_are_read_only(source_pair):
    with pytest.raises(ValueError):
        source_pair[1]["dec.head.w"][...] = 0


def test_small_and_large_clients_interoperate(live_server):
    images = np.random.default_rng(5).random((2, 1, 32, 32), dtype=np.float32)
    masks = np.zeros((2, 1, 32, 32), np.float32)
    with client.Connection(live_server.address, "t") as conn:
        for variant in ("small", "large"):
            spec = EncoderSpec(variant)
            client.check_contract(spec, conn.contract)
            lat, _ = segnet.encoder_forward(segnet.build_encoder(spec, 0)[0], images)
            loss, d = conn.train_step(lat, masks)
            assert d.shape == lat.shape


def test_shutdown_lets_in_flight_response_finish(source_pair, monkeypatch):
    entered = threading.Event()
    real = server.handle_train_step

    def slow(*args):
        entered.set()
        time.sleep(0.3)
        return real(*args)

    monkeypatch.setattr(server, "handle_train_step", slow)
    srv, thread = server.start_server(server.ServerState.create(source_pair[1]))
    with _raw(srv.address) as s:
        wire.write_message(s, wire.Hello("t"))
        wire.read_message(s)
        wire.write_message(s, wire.TrainStep(*_batch(6)))
        assert entered.wait(5)
        stopper = threading.Thread(target=srv.stop)
        stopper.start()
        reply = wire.read_message(s)
        assert isinstance(reply, wire.TrainResp)
        assert wire.read_message(s) is None  # then the session is closed
        stopper.join(5)
    thread.join(5)
    assert not thread.is_alive()


def test_serve_writes_one_log_line_per_request(source_pair, tmp_path):
    log_path = tmp_path / "server.log"
    stop = threading.Event()
    ready = []
    state = server.ServerState.create(source_pair[1])
    t = threading.Thread(target=server.serve, args=(state, stop), kwargs={"log_path": log_path, "ready": ready.append})
    t.start()
    deadline = time.time() + 5
    while not ready and time.time() < deadline:
        time.sleep(0.01)
    with client.Connection(ready[0], "t") as conn:
        conn.train_step(*_batch(7))
        conn.decoder_hash()
    stop.set()
    t.join(5)
    lines = log_path.read_text().splitlines()
    assert len(lines) == 3
    pat = r"\d{4}-\d\d-\d\dT\d\d:\d\d:\d\d session=\d+ tag=0x(..) latency_us=\d+( loss=[0-9.]+)?"
    tags = []
    for line in lines:
        m = re.fullmatch(pat, line)
        assert m, line
        tags.append((m.group(1), m.group(2) is not None))
    assert tags == [("01", False), ("10", True), ("40", False)]


def test_bind_failure_raises(source_pair):
    srv, thread = server.start_server(server.ServerState.create(source_pair[1]))
    try:
        with pytest.raises(OSError):
            server.DecoderServer(server.ServerState.create(source_pair[1]), srv.address)
    finally:
        srv.stop()
        thread.join(5)


def test_state_from_files(source_pair, tmp_path):
    enc, dec = source_pair
    segnet.save_checkpoint(dec, tmp_path / "d.sfps", DecoderSpec().describe())
    segnet.save_checkpoint(enc, tmp_path / "e.sfps", EncoderSpec().describe())
    state = server.ServerState.from_files(tmp_path / "d.sfps", tmp_path / "e.sfps")
    assert state.decoder_hash == wire.decoder_hash(dec)
    assert state.hello_ack() == wire.HelloAck(32, 4, 4, 32, 32)
    assert state.source_encoder == enc


def test_request_log_is_silent_without_a_logger(source_pair, caplog):
    srv = server.DecoderServer(server.ServerState.create(source_pair[1]))
    try:
        with caplog.at_level(logging.INFO):
            srv.log_request(1, 0x10, 0.001, 0.5)
        assert srv.requests_served == 1 and caplog.records == []
    finally:
        srv.server_close()
