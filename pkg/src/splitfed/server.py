"""Frozen-decoder server.

Hosts one decoder ParamSet (read-only after load) and, optionally, the
source encoder for clients that want a pretrained initialisation. Each TCP
connection is one session served on its own thread; sessions share nothing
mutable except connection bookkeeping.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses, segnet, wire
from .errors import ShapeError, ValidationError
from .nn import ParamSet

log = logging.getLogger("splitfed.server")


class RequestError(Exception):
    """A request the server answers with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ServerState:
    decoder_params: ParamSet
    decoder_hash: bytes
    latent_contract: segnet.LatentShape
    image_contract: tuple[int, int]
    source_encoder: ParamSet | None = None
    compute_decoder_grads: bool = False

    @classmethod
    def create(cls, decoder_params: ParamSet, image_size=(32, 32), source_encoder: ParamSet | None = None,
               compute_decoder_grads: bool = False) -> "ServerState":
        spec = segnet.decoder_spec_from_params(decoder_params, image_size)
        return cls(decoder_params, wire.decoder_hash(decoder_params), spec.latent,
                   tuple(spec.image_size), source_encoder, compute_decoder_grads)

    @classmethod
    def from_files(cls, decoder_path, source_encoder_path=None) -> "ServerState":
        dec, desc = segnet.load_checkpoint(decoder_path)
        image_size = tuple(desc["image_size"]) if desc and "image_size" in desc else (32, 32)
        enc = segnet.load_checkpoint(source_encoder_path)[0] if source_encoder_path else None
        return cls.create(dec, image_size, enc)

    def hello_ack(self) -> wire.HelloAck:
        c, h, w = self.latent_contract
        return wire.HelloAck(c, h, w, *self.image_contract)


def _check_latents(state: ServerState, latents: np.ndarray) -> None:
    if latents.ndim != 4 or tuple(latents.shape[1:]) != tuple(state.latent_contract):
        raise RequestError(wire.E_SHAPE_CONTRACT,
                           f"shape contract: latents {latents.shape} != (B, {', '.join(map(str, state.latent_contract))})")
    if not np.all(np.isfinite(latents)):
        raise RequestError(wire.E_BAD_REQUEST, "latents contain non-finite values")


def handle_train_step(state: ServerState, latents: np.ndarray, masks: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and latent gradient for one batch; the decoder is never updated."""
    _check_latents(state, latents)
    h, w = state.image_contract
    if masks.shape != (latents.shape[0], 1, h, w):
        raise RequestError(wire.E_SHAPE_CONTRACT,
                           f"shape contract: masks {masks.shape} != ({latents.shape[0]}, 1, {h}, {w})")
    try:
        logits, cache = segnet.decoder_forward(state.decoder_params, latents)
        result = losses.bce_from_logits(logits, masks)
    except ValidationError as exc:
        raise RequestError(wire.E_MASK_NOT_BINARY, str(exc)) from None
    except ShapeError as exc:
        raise RequestError(wire.E_SHAPE_CONTRACT, f"shape contract: {exc}") from None
    # decoder grads (if computed) are dropped: the shared decoder stays frozen
    d_latent, _ = segnet.decoder_backward(state.decoder_params, cache, result.d_logits,
                                          param_grads=state.compute_decoder_grads)
    return result.loss, d_latent


def handle_infer(state: ServerState, latents: np.ndarray) -> np.ndarray:
    _check_latents(state, latents)
    logits, _ = segnet.decoder_forward(state.decoder_params, latents)
    return losses.sigmoid(logits)


def handle_encoder_init(state: ServerState) -> wire.Message:
    if state.source_encoder is None:
        return wire.Error(wire.E_NO_ENCODER, "no encoder hosted")
    return wire.EncoderWeights(state.source_encoder)


def respond(state: ServerState, msg: wire.Message) -> wire.Message:
    """Map one post-handshake request to its response."""
    try:
        if isinstance(msg, wire.TrainStep):
            loss, d_lat = handle_train_step(state, msg.latents, msg.masks)
            return wire.TrainResp(loss, d_lat)
        if isinstance(msg, wire.Infer):
            return wire.InferResp(handle_infer(state, msg.latents))
        if isinstance(msg, wire.GetEncoderInit):
            return handle_encoder_init(state)
        if isinstance(msg, wire.GetDecoderHash):
            return wire.DecoderHash(state.decoder_hash)
        if isinstance(msg, wire.Hello):
            return state.hello_ack()
    except RequestError as exc:
        return wire.Error(exc.code, str(exc))
    return wire.Error(wire.E_UNEXPECTED, f"unexpected message {type(msg).__name__}")


class _SessionHandler(socketserver.BaseRequestHandler):
    server: "DecoderServer"

    def setup(self):
        self.session_id = self.server.register(self.request)

    def finish(self):
        self.server.unregister(self.request)

    def handle(self):
        sock = self.request
        state = self.server.state
        greeted = False
        while True:
            try:
                frame = wire.read_frame(sock)
            except wire.FrameTooLarge as exc:
                self._send(wire.Error(wire.E_BAD_REQUEST, str(exc)))
                return  # cannot resynchronise after an oversized length prefix
            except (wire.IncompleteFrame, OSError):
                return
            if frame is None:
                return
            start = time.perf_counter()
            loss = None
            try:
                msg = wire.from_frame(frame)
            except wire.ProtocolError as exc:
                reply = wire.Error(wire.E_BAD_REQUEST, str(exc))
            else:
                if isinstance(msg, wire.Hello):
                    greeted = True
                    reply = state.hello_ack()
                elif not greeted:
                    reply = wire.Error(wire.E_HANDSHAKE, "handshake required")
                else:
                    try:
                        reply = respond(state, msg)
                    except Exception as exc:  # never let one request kill the server
                        log.exception("internal error in session %s", self.session_id)
                        reply = wire.Error(wire.E_INTERNAL, f"internal error: {exc}")
                if isinstance(reply, wire.TrainResp):
                    loss = reply.loss
            # logged before the reply goes out, so a client never sees an uncounted answer
            self.server.log_request(self.session_id, frame.tag, time.perf_counter() - start, loss)
            if not self._send(reply):
                return

    def _send(self, msg) -> bool:
        try:
            wire.write_message(self.request, msg)
            return True
        except OSError:
            return False


class DecoderServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; one thread per client session."""

    daemon_threads = True
    allow_reuse_address = True
    block_on_close = True

    def __init__(self, state: ServerState, address=("127.0.0.1", 0), request_log: logging.Logger | None = None):
        super().__init__(address, _SessionHandler)
        self.state = state
        self.request_log = request_log
        self._lock = threading.Lock()
        self._sessions: dict[socket.socket, int] = {}
        self._next_id = 0
        self.requests_served = 0

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def register(self, sock) -> int:
        with self._lock:
            self._next_id += 1
            self._sessions[sock] = self._next_id
            return self._next_id

    def unregister(self, sock) -> None:
        with self._lock:
            self._sessions.pop(sock, None)

    def log_request(self, session_id: int, tag: int, seconds: float, loss: float | None) -> None:
        with self._lock:
            self.requests_served += 1
        if self.request_log is not None:
            self.request_log.info(
                "%s session=%d tag=0x%02X latency_us=%d%s",
                time.strftime("%Y-%m-%dT%H:%M:%S"), session_id, tag, int(seconds * 1e6),
                "" if loss is None else f" loss={loss:.6f}",
            )

    def stop(self) -> None:
        """Stop accepting, let in-flight responses finish, then close sessions."""
        self.shutdown()
        with self._lock:
            socks = list(self._sessions)
        for s in socks:
            try:
                # a handler blocked on read sees EOF; one mid-request can still write its reply
                s.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        self.server_close()


def start_server(state: ServerState, address=("127.0.0.1", 0), request_log=None) -> tuple[DecoderServer, threading.Thread]:
    """Bind and serve on a background thread; returns ``(server, thread)``."""
    srv = DecoderServer(state, address, request_log)
    thread = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05},
                              name="splitfed-server", daemon=True)
    thread.start()
    return srv, thread


def serve(state: ServerState, shutdown: threading.Event, address=("127.0.0.1", 0), log_path=None,
          ready=None) -> None:
    """Serve until ``shutdown`` is set. ``ready(address)`` is called once bound."""
    req_log = None
    handler = None
    if log_path is not None:
        req_log = logging.getLogger(f"splitfed.requests.{id(shutdown)}")
        req_log.setLevel(logging.INFO)
        req_log.propagate = False
        handler = logging.FileHandler(Path(log_path))
        handler.setFormatter(logging.Formatter("%(message)s"))
        req_log.addHandler(handler)
    srv, thread = start_server(state, address, req_log)
    if ready is not None:
        ready(srv.address)
    try:
        shutdown.wait()
    finally:
        srv.stop()
        thread.join()
        if handler is not None:
            req_log.removeHandler(handler)
            handler.close()
