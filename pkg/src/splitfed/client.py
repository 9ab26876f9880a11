"""Target-centre trainer.

The client owns an encoder and nothing else. Each iteration it sends the
latents and masks of one batch to the server, gets back the loss and the
latent gradient, and applies one Adam step to the encoder locally.
"""
from __future__ import annotations

import logging
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, nn, segnet, wire
from .errors import ConfigError, SplitFedError
from .nn import ParamSet
from .synthdata import DatasetSplit, Sample
from .training import TrainConfig, TrainTrace, batch_schedule, predict, stack

log = logging.getLogger("splitfed.client")

INIT_MODES = ("random", "from_server")


class TransportError(SplitFedError, ConnectionError):
    """The server could not be reached after one retry."""


class RemoteError(SplitFedError):
    """The server answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"server error 0x{code:04X}: {message}")
        self.code = code


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


@dataclass(frozen=True)
class ClientConfig:
    centre_id: str
    server: tuple[str, int]
    variant: str = "small"
    init_mode: str = "random"
    train: TrainConfig = field(default_factory=TrainConfig)
    timeout: float = 60.0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if isinstance(self.server, str):
            object.__setattr__(self, "server", parse_address(self.server))

    @property
    def encoder_spec(self) -> segnet.EncoderSpec:
        return segnet.EncoderSpec(self.variant)


class Connection:
    """One session with the decoder server.

    A failed request reconnects, repeats the handshake and is resent once.
    Every request is stateless on the server side, so resending is safe.
    """

    def __init__(self, address: tuple[str, int], client_id: str, timeout: float = 60.0):
        self.address = address
        self.client_id = client_id
        self.timeout = timeout
        self.sock: socket.socket | None = None
        self.contract: wire.HelloAck | None = None

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def connect(self) -> wire.HelloAck:
        self.close()
        self.sock = socket.create_connection(self.address, timeout=self.timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ack = self._exchange(wire.Hello(self.client_id))
        if not isinstance(ack, wire.HelloAck):
            raise RemoteError(wire.E_HANDSHAKE, f"expected HELLO_ACK, got {type(ack).__name__}")
        self.contract = ack
        return ack

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def _exchange(self, msg: wire.Message) -> wire.Message:
        wire.write_message(self.sock, msg)
        reply = wire.read_message(self.sock)
        if reply is None:
            raise ConnectionResetError("server closed the connection")
        return reply

    def request(self, msg: wire.Message) -> wire.Message:
        try:
            if self.sock is None:
                self.connect()
            reply = self._exchange(msg)
        except (OSError, wire.ProtocolError) as first:
            log.warning("%s: transport error (%s), retrying once", self.client_id, first)
            try:
                self.connect()
                reply = self._exchange(msg)
            except (OSError, wire.ProtocolError) as second:
                self.close()
                raise TransportError(f"request failed twice: {second}") from second
        if isinstance(reply, wire.Error):
            raise RemoteError(reply.code, reply.message)
        return reply

    def train_step(self, latents: np.ndarray, masks: np.ndarray) -> tuple[float, np.ndarray]:
        reply = self.request(wire.TrainStep(latents, masks))
        if not isinstance(reply, wire.TrainResp):
            raise RemoteError(wire.E_UNEXPECTED, f"expected TRAIN_RESP, got {type(reply).__name__}")
        return reply.loss, reply.d_latents

    def infer(self, latents: np.ndarray) -> np.ndarray:
        reply = self.request(wire.Infer(latents))
        if not isinstance(reply, wire.InferResp):
            raise RemoteError(wire.E_UNEXPECTED, f"expected INFER_RESP, got {type(reply).__name__}")
        return reply.probs

    def decoder_hash(self) -> bytes:
        reply = self.request(wire.GetDecoderHash())
        if not isinstance(reply, wire.DecoderHash):
            raise RemoteError(wire.E_UNEXPECTED, f"expected DECODER_HASH, got {type(reply).__name__}")
        return reply.digest

    def encoder_weights(self) -> ParamSet:
        reply = self.request(wire.GetEncoderInit())
        if not isinstance(reply, wire.EncoderWeights):
            raise RemoteError(wire.E_UNEXPECTED, f"expected ENCODER_WEIGHTS, got {type(reply).__name__}")
        return reply.params


def check_contract(spec: segnet.EncoderSpec, contract: wire.HelloAck) -> None:
    if tuple(spec.latent_shape) != contract.latent_shape or tuple(spec.image_size) != contract.image_shape:
        raise ConfigError(
            f"encoder produces latents {tuple(spec.latent_shape)} for images {tuple(spec.image_size)}, "
            f"server expects {contract.latent_shape} for images {contract.image_shape}"
        )


def init_encoder(config: ClientConfig, conn: Connection | None = None) -> ParamSet:
    """Random weights (RandEn) or the server's source encoder (FtEn)."""
    spec = config.encoder_spec
    if config.init_mode == "random":
        return segnet.build_encoder(spec, config.train.seed)[0]
    own = conn is None
    conn = conn or Connection(config.server, config.centre_id, config.timeout)
    try:
        params = conn.encoder_weights()
    except RemoteError as exc:
        if exc.code == wire.E_NO_ENCODER:
            raise ConfigError("init from server requested but the server hosts no encoder") from exc
        raise
    finally:
        if own:
            conn.close()
    expected = dict(segnet.encoder_layout(spec))
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        raise ConfigError(f"server encoder does not match the {spec.variant!r} encoder layout")
    return params


def evaluate_remote(conn: Connection, encoder: ParamSet, samples: Sequence[Sample]) -> losses.MetricReport:
    if not samples:
        raise ConfigError("no samples to evaluate")
    images, masks = stack(samples)
    probs = predict(encoder, conn.infer, images)
    return losses.score(list(probs), list(masks))


@dataclass
class ClientResult:
    encoder: ParamSet
    best_encoder: ParamSet
    best_report: losses.MetricReport | None
    trace: TrainTrace


def train_remote(config: ClientConfig, split: DatasetSplit, out_dir=None,
                 encoder: ParamSet | None = None) -> ClientResult:
    """Train the local encoder against the server's frozen decoder.

    Returns the final and the best (by test mIoU) encoder. With ``out_dir``
    the best encoder is written there as ``<centre>_encoder.sfps``, also
    when training aborts on a transport error.
    """
    cfg = config.train
    spec = config.encoder_spec
    images, masks = stack(split.train)
    trace = TrainTrace()
    conn = Connection(config.server, config.centre_id, config.timeout)
    best_params = None
    best_report = None
    try:
        check_contract(spec, conn.connect())
        params = encoder if encoder is not None else init_encoder(config, conn)
        best_params = params
        state = nn.AdamState(lr=cfg.lr)
        for it, idx in enumerate(batch_schedule(len(images), cfg.batch_size, cfg.iterations, cfg.seed)):
            latents, cache = segnet.encoder_forward(params, images[idx])
            loss, d_latents = conn.train_step(latents, masks[idx])
            trace.record_loss(it, loss)
            grads = segnet.encoder_backward(params, cache, d_latents)
            state.lr = cfg.lr_at(it)
            params, state = nn.adam_step(params, grads, state)
            if split.test and cfg.eval_due(it):
                report = evaluate_remote(conn, params, split.test)
                trace.record_eval(it + 1, report)
                if best_report is None or report.miou > best_report.miou:
                    best_params, best_report = params, report
    finally:
        conn.close()
        if out_dir is not None and best_params is not None:
            path = Path(out_dir) / f"{config.centre_id}_encoder.sfps"
            path.parent.mkdir(parents=True, exist_ok=True)
            segnet.save_checkpoint(best_params, path, spec.describe())
            trace.checkpoint = path
    return ClientResult(params, best_params, best_report, trace)
