"""The device side: forward-only backbone runs feeding a one-way uplink.

Two cooperating workers form the steady-state pipeline. The compute
worker samples a batch, runs the frozen backbone, quantizes the taps,
and pushes the result onto a bounded queue; the send worker pops,
encodes, and transmits. The queue bound is the backpressure mechanism:
when the uplink is the bottleneck, the compute worker blocks on `put`
instead of piling up payloads.

The device never touches gradients or optimizer state -- this module
deliberately has no import path into the backward/optimizer code -- and
raw tokens never enter any wire message.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from io import BytesIO

import numpy as np

from .backbone import BackboneConfig, BackboneWeights, forward_collect, init_backbone, load_backbone
from .quantize import SCALE_BYTES, TAP_HEADER_BYTES, quantize
from .sidenet import load_side
from .transport import TcpTransport, TransportClosed
from .wire import (
    ACK_OK,
    ACK_REASONS,
    ActBatch,
    Bye,
    CheckpointData,
    CheckpointRequest,
    HandshakeError,
    Hello,
    MessageReader,
    MetricsSnapshot,
    SessionAck,
    encode,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticTask:
    """Label = 1 when even token ids outnumber odd ones.

    Uniform tokens make the two classes symmetric, and an odd sequence
    length rules out ties, so labels are balanced in expectation.
    """

    vocab_size: int = 16
    seq_len: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.seq_len % 2 == 0:
            raise ValueError("sequence length must be odd to avoid ties")


@dataclass(frozen=True)
class CsvTask:
    """Pre-tokenized rows: S token-id columns followed by a label column."""

    tokens: np.ndarray  # [N, S]
    labels: np.ndarray  # [N]
    seq_len: int
    vocab_size: int


def load_csv_task(path) -> CsvTask:
    rows = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    if rows.shape[1] < 2:
        raise ValueError("csv rows need at least one token and a label")
    tokens, labels = rows[:, :-1], rows[:, -1]
    if tokens.min() < 0:
        raise ValueError("negative token id in csv")
    return CsvTask(tokens=tokens, labels=labels, seq_len=tokens.shape[1],
                   vocab_size=int(tokens.max()) + 1)


def make_batch(task, batch_index: int, batch_size: int):
    """Deterministic batch for (task.seed, batch_index); returns
    (tokens [B, S], labels [B])."""
    if isinstance(task, CsvTask):
        n = len(task.labels)
        idx = (batch_index * batch_size + np.arange(batch_size)) % n
        return task.tokens[idx], task.labels[idx]
    rng = np.random.Generator(np.random.PCG64([task.seed, batch_index]))
    tokens = rng.integers(0, task.vocab_size, size=(batch_size, task.seq_len),
                          dtype=np.int64)
    even = (tokens % 2 == 0).sum(axis=1)
    labels = (2 * even > task.seq_len).astype(np.int64)
    return tokens, labels


@dataclass
class DeviceConfig:
    backbone: BackboneConfig
    task: SyntheticTask | CsvTask
    backbone_seed: int = 7
    backbone_path: str | None = None
    scheme: str = "none_fp16"
    batch_size: int = 16
    epochs: int = 1
    samples_per_epoch: int = 256
    iterations: int = 0  # nonzero overrides epochs * (samples // batch)
    queue_depth: int = 4
    serial: bool = False  # wait for a per-iteration server ack (no overlap)
    fetch_checkpoint: bool = False
    log_path: str | None = None
    server_addr: str | None = None  # "host:port" when no transport is given
    timeout_s: float = 10.0

    def __post_init__(self):
        if self.queue_depth < 1:
            raise ValueError("queue depth must be at least 1")
        if self.task.seq_len > self.backbone.max_seq:
            raise ValueError("task sequence length exceeds backbone max_seq")
        if self.task.vocab_size > self.backbone.vocab_size:
            raise ValueError("task vocabulary exceeds backbone vocabulary")

    @property
    def total_iterations(self) -> int:
        if self.iterations:
            return self.iterations
        if isinstance(self.task, CsvTask):
            per_epoch = max(len(self.task.labels) // self.batch_size, 1)
        else:
            per_epoch = max(self.samples_per_epoch // self.batch_size, 1)
        return self.epochs * per_epoch


@dataclass
class DeviceReport:
    iterations: int
    wall_s: float
    bytes_sent: int
    max_queued_bytes: int
    entries: list = field(default_factory=list)
    fetched_checkpoint: object = None  # (SideConfig, SideNetworkParams)
    aborted: bool = False


def load_device_backbone(config: DeviceConfig) -> BackboneWeights:
    if config.backbone_path:
        return load_backbone(config.backbone_path, config.backbone)
    return init_backbone(config.backbone, config.backbone_seed)


def _batch_wire_bytes(msg: ActBatch) -> int:
    """Payload bytes a queued batch will occupy on the wire (codes, scales,
    per-tap headers, labels)."""
    taps = sum(len(q.codes) + TAP_HEADER_BYTES + SCALE_BYTES for _, q in msg.taps)
    return taps + 4 * len(msg.labels)


def _compute_batch(weights, config, i):
    t0 = time.perf_counter()
    tokens, labels = make_batch(config.task, i, config.batch_size)
    tap_set = forward_collect(weights, tokens)
    t1 = time.perf_counter()
    qtaps = tuple((idx, quantize(act, config.scheme)) for idx, act in tap_set.taps)
    t2 = time.perf_counter()
    msg = ActBatch(batch_id=i, labels=tuple(int(v) for v in labels), taps=qtaps)
    timing = {"iter": i, "t_fwd_ms": (t1 - t0) * 1e3, "t_quant_ms": (t2 - t1) * 1e3}
    return msg, timing


def _do_handshake(config: DeviceConfig, transport, reader: MessageReader) -> None:
    hello = Hello(config_digest=config.backbone.digest(), scheme=config.scheme,
                  gamma=config.backbone.gamma, sync=config.serial)
    transport.send(encode(hello))
    ack = reader.read_expected([SessionAck], timeout=config.timeout_s)
    if ack.status != ACK_OK:
        raise HandshakeError(
            f"server rejected session: {ACK_REASONS.get(ack.status, ack.status)}"
        )


def request_checkpoint(transport, reader: MessageReader, timeout: float):
    """Fetch the server's current side-network parameters."""
    transport.send(encode(CheckpointRequest()))
    msg = reader.read_expected([CheckpointData], timeout=timeout)
    return load_side(BytesIO(msg.data))


def run_device(config: DeviceConfig, transport=None) -> DeviceReport:
    """Drive a full training session from the device end."""
    own_transport = transport is None
    if own_transport:
        if not config.server_addr:
            raise ValueError("need a transport or a server address")
        host, _, port = config.server_addr.rpartition(":")
        transport = TcpTransport.connect(host or "127.0.0.1", int(port),
                                         timeout=config.timeout_s)
    weights = load_device_backbone(config)
    reader = MessageReader(transport)
    report = DeviceReport(iterations=0, wall_s=0.0, bytes_sent=0, max_queued_bytes=0)

    try:
        _do_handshake(config, transport, reader)
        t_start = time.perf_counter()
        try:
            if config.serial:
                _run_serial(config, weights, transport, reader, report)
            else:
                _run_pipelined(config, weights, transport, reader, report)
        except TransportClosed as exc:
            log.error("transport failed after %d iterations: %s", report.iterations, exc)
            report.aborted = True
        report.wall_s = time.perf_counter() - t_start
        if not report.aborted:
            if config.fetch_checkpoint:
                report.fetched_checkpoint = request_checkpoint(
                    transport, reader, config.timeout_s
                )
            transport.send(encode(Bye()))
    finally:
        if own_transport:
            transport.close()
        if config.log_path:
            with open(config.log_path, "w") as fh:
                for entry in report.entries:
                    fh.write(json.dumps(entry) + "\n")
    return report


def _run_pipelined(config, weights, transport, reader, report) -> None:
    depth = config.queue_depth
    work: queue.Queue = queue.Queue(maxsize=depth)
    lock = threading.Lock()
    state = {"queued": 0, "max_queued": 0, "error": None, "abort": False}

    def compute_worker():
        try:
            for i in range(config.total_iterations):
                if state["abort"]:
                    break
                msg, timing = _compute_batch(weights, config, i)
                size = _batch_wire_bytes(msg)
                t0 = time.perf_counter()
                work.put((msg, size, timing))
                timing["t_queue_ms"] = (time.perf_counter() - t0) * 1e3
                with lock:
                    state["queued"] += size
                    state["max_queued"] = max(state["max_queued"], state["queued"])
        except Exception as exc:  # surfaced by the send loop
            state["error"] = exc
        finally:
            work.put(None)

    worker = threading.Thread(target=compute_worker, name="device-compute", daemon=True)
    worker.start()
    try:
        while True:
            item = work.get()
            if item is None:
                break
            msg, size, timing = item
            depth_seen = work.qsize()
            with lock:
                state["queued"] -= size
            t0 = time.perf_counter()
            data = encode(msg)
            transport.send(data)
            t1 = time.perf_counter()
            timing.update(t_send_ms=(t1 - t0) * 1e3, queue_depth=depth_seen)
            report.entries.append(timing)
            report.bytes_sent += len(data)
            report.iterations += 1
    except BaseException:
        # unblock the producer so it can reach its sentinel and exit
        state["abort"] = True
        while work.get() is not None:
            pass
        worker.join()
        raise
    worker.join()
    report.max_queued_bytes = state["max_queued"]
    if state["error"] is not None:
        report.aborted = True
        raise state["error"]


def _run_serial(config, weights, transport, reader, report) -> None:
    """Conventional interleave: one forward, one upload, one server update,
    all strictly in sequence. Exists as the overlap baseline."""
    for i in range(config.total_iterations):
        msg, timing = _compute_batch(weights, config, i)
        t0 = time.perf_counter()
        data = encode(msg)
        transport.send(data)
        reader.read_expected([MetricsSnapshot], timeout=config.timeout_s, skip=())
        t1 = time.perf_counter()
        timing.update(t_send_ms=(t1 - t0) * 1e3, queue_depth=0, t_queue_ms=0.0)
        report.entries.append(timing)
        report.bytes_sent += len(data)
        report.iterations += 1
