"""The server side: accept one session, train the side-network, serve
checkpoints.

Two workers share the connection. The receive worker only decodes frames
and feeds a bounded inbound queue (backpressure flows to the transport);
the train worker consumes messages strictly in arrival order, so
optimizer state needs no locking and checkpoint requests are always
served at an iteration boundary.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from io import BytesIO

from .backbone import BackboneConfig, forward_collect
from .device import DeviceConfig, load_device_backbone, make_batch
from .quantize import quantize
from .sidenet import SideConfig, init_side, save_side
from .training import (
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_EPS,
    DEFAULT_LR,
    TrainState,
    init_adam,
    train_iteration,
)
from .transport import TransportClosed, tcp_listen_one
from .wire import (
    ACK_BAD_DIGEST,
    ACK_BAD_GAMMA,
    ACK_BAD_VERSION,
    ACK_OK,
    ActBatch,
    Bye,
    CheckpointData,
    CheckpointRequest,
    DesyncError,
    FrameError,
    Hello,
    MessageReader,
    MetricsSnapshot,
    PROTOCOL_VERSION,
    SessionAck,
    encode,
)

log = logging.getLogger(__name__)

_session_counter = itertools.count(1)


@dataclass
class ServerConfig:
    backbone: BackboneConfig  # expected frozen-model identity
    bottleneck: int = 16
    classes: int = 2
    nonlinearity: str = "gelu"
    init_std: float = 0.02
    side_seed: int = 1
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    loss_kind: str = "cross_entropy"
    queue_depth: int = 4
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    metrics_interval: int = 0  # unsolicited snapshot every N iterations; 0 = off
    listen_addr: str | None = None  # "host:port" when no transport injected
    timeout_s: float = 10.0

    def __post_init__(self):
        if self.queue_depth < 1:
            raise ValueError("queue depth must be at least 1")

    def side_config(self) -> SideConfig:
        return SideConfig(
            hidden=self.backbone.hidden,
            bottleneck=self.bottleneck,
            adapters=self.backbone.num_blocks,
            classes=self.classes,
            nonlinearity=self.nonlinearity,
            init_std=self.init_std,
        )


@dataclass
class ServerReport:
    iterations: int = 0
    dropped: int = 0
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    rejected: int | None = None  # ack status when the handshake failed
    clean_shutdown: bool = False
    state: TrainState | None = None


def _make_state(config: ServerConfig) -> TrainState:
    side_cfg = config.side_config()
    params = init_side(side_cfg, config.side_seed)
    adam = init_adam(params, lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, eps=config.eps)
    return TrainState(config=side_cfg, params=params, adam=adam,
                      loss_kind=config.loss_kind)


def _validate_hello(config: ServerConfig, hello: Hello) -> int:
    if hello.protocol_version != PROTOCOL_VERSION:
        return ACK_BAD_VERSION
    if hello.config_digest != config.backbone.digest():
        return ACK_BAD_DIGEST
    if hello.gamma != config.backbone.gamma:
        return ACK_BAD_GAMMA
    return ACK_OK


def _checkpoint_bytes(state: TrainState) -> bytes:
    buf = BytesIO()
    save_side(buf, state.params, state.config)
    return buf.getvalue()


def run_server(config: ServerConfig, transport=None) -> ServerReport:
    """Serve exactly one training session; returns once the device says
    Bye or the connection dies."""
    own_transport = transport is None
    if own_transport:
        if not config.listen_addr:
            raise ValueError("need a transport or a listen address")
        host, _, port = config.listen_addr.rpartition(":")
        transport, _ = tcp_listen_one(host or "0.0.0.0", int(port))

    report = ServerReport()
    reader = MessageReader(transport)
    try:
        hello = reader.read_expected([Hello], timeout=config.timeout_s)
        status = _validate_hello(config, hello)
        transport.send(encode(SessionAck(session_id=next(_session_counter),
                                         status=status)))
        if status != ACK_OK:
            report.rejected = status
            return report

        state = _make_state(config)
        report.state = state
        sync = hello.sync
        inbound: queue.Queue = queue.Queue(maxsize=config.queue_depth)

        def receive_worker():
            try:
                while True:
                    msg = reader.read(timeout=None)
                    if msg is None:
                        inbound.put(("eof", None))
                        return
                    inbound.put(("msg", msg))
                    if isinstance(msg, Bye):
                        return
            except (FrameError, DesyncError, TransportClosed) as exc:
                inbound.put(("error", exc))

        rx = threading.Thread(target=receive_worker, name="server-recv", daemon=True)
        rx.start()

        metrics_fh = open(config.metrics_path, "w") if config.metrics_path else None
        try:
            while True:
                kind, msg = inbound.get()
                if kind == "error":
                    log.error("session reset: %s", msg)
                    break
                if kind == "eof":
                    log.warning("peer vanished without Bye")
                    break
                if isinstance(msg, Bye):
                    report.clean_shutdown = True
                    break
                if isinstance(msg, CheckpointRequest):
                    transport.send(encode(CheckpointData(data=_checkpoint_bytes(state))))
                    continue
                if isinstance(msg, ActBatch):
                    metrics = train_iteration(state, msg)
                    if metrics is None:  # out of order; logged and dropped
                        continue
                    report.iterations += 1
                    report.losses.append(metrics.loss)
                    report.metrics.append(metrics)
                    if metrics_fh:
                        metrics_fh.write(metrics.to_json() + "\n")
                    if sync or (config.metrics_interval
                                and state.iterations % config.metrics_interval == 0):
                        transport.send(encode(MetricsSnapshot(text=metrics.to_json())))
                    continue
                log.warning("ignoring unexpected %s", type(msg).__name__)
        finally:
            if metrics_fh:
                metrics_fh.close()
            rx.join(timeout=5.0)

        report.dropped = state.dropped
        if config.checkpoint_path:
            with open(config.checkpoint_path, "wb") as fh:
                fh.write(_checkpoint_bytes(state))
    finally:
        if own_transport:
            transport.close()
    return report


@dataclass
class LocalReport:
    iterations: int = 0
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    state: TrainState | None = None
    wall_s: float = 0.0


def local_mode(device_config: DeviceConfig, server_config: ServerConfig) -> LocalReport:
    """Single-process baseline: identical pipeline, no wire in between.

    Quantize/dequantize still runs (it is part of the model, not the
    transport), so with matching seeds the loss trajectory is bit-equal
    to a split run's.
    """
    if device_config.backbone != server_config.backbone:
        raise ValueError("device and server disagree on the backbone config")
    weights = load_device_backbone(device_config)
    state = _make_state(server_config)
    report = LocalReport(state=state)

    metrics_fh = open(server_config.metrics_path, "w") if server_config.metrics_path else None
    t0 = time.perf_counter()
    try:
        for i in range(device_config.total_iterations):
            tokens, labels = make_batch(device_config.task, i, device_config.batch_size)
            tap_set = forward_collect(weights, tokens)
            qtaps = tuple(
                (idx, quantize(act, device_config.scheme)) for idx, act in tap_set.taps
            )
            batch = ActBatch(batch_id=i, labels=tuple(int(v) for v in labels), taps=qtaps)
            metrics = train_iteration(state, batch)
            report.iterations += 1
            report.losses.append(metrics.loss)
            report.metrics.append(metrics)
            if metrics_fh:
                metrics_fh.write(metrics.to_json() + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
    report.wall_s = time.perf_counter() - t0
    return report
