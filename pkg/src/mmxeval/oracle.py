"""Black-box model interface: builtin analytic oracles and a wire-protocol client.

The wire protocol is newline-delimited JSON, one message per line:

    client -> {"type": "hello", "version": 1}
    server -> {"type": "meta", "version": 1, "num_classes": C,
               "input_shape": [M, H, W], "name": "..."}   (null = any size)
    client -> {"type": "predict", "id": N,
               "inputs": [{"shape": [...], "data_b64": "..."}, ...]}
    server -> {"type": "result", "id": N, "probs": [[...], ...]}
    either -> {"type": "error", "id": N or null, "message": "..."}

Array payloads are little-endian float32, C-order, base64-encoded. Requests
are matched to responses by id, so servers may reply out of order. At most
64 inputs travel per predict message.
"""

import base64
import json
import math
import os
import selectors
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .data import DatasetManifest
from .shapeops import _MS_LUT, BLUR_TRUNCATE, largest_component

PROTOCOL_VERSION = 1
MAX_BATCH = 64
DEFAULT_TIMEOUT = 60.0
TIMEOUT_ENV = "MMXEVAL_ORACLE_TIMEOUT"


class OracleError(RuntimeError):
    """Transport, protocol, or model failure while talking to an oracle."""


@dataclass(frozen=True)
class OracleMeta:
    """Handshake metadata: class count, expected input shape, model name."""

    num_classes: int
    input_shape: tuple  # ints, or None for any size along that axis
    name: str

    def accepts(self, shape: Sequence[int]) -> bool:
        if len(shape) != len(self.input_shape):
            return False
        return all(e is None or e == s for e, s in zip(self.input_shape, shape))


@dataclass(frozen=True)
class ProbeAccuracy:
    """Accuracies on the two single-modality-aligned probe datasets."""

    acc_t1c: float
    acc_flair: float


def encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(a.shape), "data_b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    try:
        shape = tuple(int(d) for d in obj["shape"])
        raw = base64.b64decode(obj["data_b64"])
    except (KeyError, TypeError, ValueError) as exc:
        raise OracleError(f"malformed array payload: {exc}") from None
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(raw) != 4 * count:
        raise OracleError(f"array payload length {len(raw)} != 4*{count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _validate_probs(probs: np.ndarray, num_classes: int, n_inputs: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n_inputs, num_classes):
        raise OracleError(f"expected {n_inputs}x{num_classes} probabilities, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise OracleError("oracle returned non-finite probabilities")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise OracleError(f"probabilities do not sum to 1 (worst sum {sums[np.argmax(np.abs(sums - 1))]:.6f})")
    return probs


class Oracle:
    """Common interface: metadata plus batched prediction."""

    meta: OracleMeta

    def predict(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# builtin analytic oracles
# ---------------------------------------------------------------------------

def _batched_blob_compactness(channels: np.ndarray, blur_sigma: float,
                              smooth_sigma: float) -> List[Optional[float]]:
    """Compactness of the regularized half-max blob for a (B, H, W) stack.

    Same pipeline as shapeops.blob_compactness, vectorized over the batch
    axis. Blurs run in float32: decision margins sit orders of magnitude
    above float32 noise, and per-image results are independent of batching
    because the batch axis uses sigma 0.
    """
    chan = np.asarray(channels, dtype=np.float32)
    blurred = ndimage.gaussian_filter(chan, (0, blur_sigma, blur_sigma),
                                  mode="constant", truncate=BLUR_TRUNCATE)
    peaks = blurred.max(axis=(1, 2))
    blobs = np.zeros(chan.shape, dtype=bool)
    alive = peaks > 0
    if alive.any():
        blobs[alive] = blurred[alive] >= 0.5 * peaks[alive, None, None]
        for i in np.nonzero(alive)[0]:
            blobs[i] = largest_component(blobs[i])
        if smooth_sigma > 0:
            blobs = ndimage.gaussian_filter(
                blobs.astype(np.float32), (0, smooth_sigma, smooth_sigma),
                mode="constant", truncate=BLUR_TRUNCATE,
            ) >= 0.5
    padded = np.pad(blobs.astype(np.uint8), ((0, 0), (1, 1), (1, 1)))
    case = (padded[:, :-1, :-1] + 2 * padded[:, :-1, 1:]
            + 4 * padded[:, 1:, :-1] + 8 * padded[:, 1:, 1:])
    perims = _MS_LUT[case].sum(axis=(1, 2))
    areas = blobs.sum(axis=(1, 2)).astype(np.float64)
    out: List[Optional[float]] = []
    for i in range(chan.shape[0]):
        if areas[i] == 0:
            out.append(None)
        else:
            out.append(float(perims[i] ** 2 / (4.0 * math.pi * areas[i])))
    return out


class BuiltinOracle(Oracle):
    """Base for in-process oracles: validates inputs, stacks them, delegates."""

    def predict(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        if len(inputs) == 0:
            return np.zeros((0, self.meta.num_classes), dtype=np.float64)
        batch = []
        for arr in inputs:
            a = np.asarray(arr, dtype=np.float32)  # wire precision for parity
            if not self.meta.accepts(a.shape):
                raise OracleError(
                    f"input shape {a.shape} incompatible with oracle shape {self.meta.input_shape}"
                )
            batch.append(a)
        probs = self._predict_stack(np.stack(batch))
        return _validate_probs(probs, self.meta.num_classes, len(inputs))

    def _predict_stack(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def hard_probs(classes: Sequence[int], num_classes: int = 2,
               confidence: float = 0.99) -> np.ndarray:
    """Near-one-hot probability rows for a vector of class decisions."""
    rest = (1.0 - confidence) / (num_classes - 1)
    out = np.full((len(classes), num_classes), rest, dtype=np.float64)
    out[np.arange(len(classes)), np.asarray(classes, dtype=int)] = confidence
    return out


class T1cShapeOracle(BuiltinOracle):
    """Shape-rule classifier that reads only the T1C channel.

    Extracts the half-max blob of the (blurred) T1C channel and predicts
    class 1 when its compactness exceeds ``theta``, class 0 otherwise. An
    empty channel falls back to ``default_class``. Decisions are emitted as
    hard 0.99/0.01 probabilities.
    """

    def __init__(self, theta: float = 1.6, default_class: int = 0, channel: int = 1,
                 blur_sigma: float = 1.5, smooth_sigma: float = 1.0,
                 num_modalities: int = 4):
        self.theta = theta
        self.default_class = default_class
        self.channel = channel
        self.blur_sigma = blur_sigma
        self.smooth_sigma = smooth_sigma
        self.meta = OracleMeta(2, (num_modalities, None, None), "t1c-shape")

    def decisions(self, batch: np.ndarray) -> np.ndarray:
        comps = _batched_blob_compactness(
            batch[:, self.channel], self.blur_sigma, self.smooth_sigma
        )
        return np.array(
            [self.default_class if c is None else (1 if c > self.theta else 0) for c in comps],
            dtype=int,
        )

    def _predict_stack(self, batch: np.ndarray) -> np.ndarray:
        return hard_probs(self.decisions(batch))


class DualModalityOracle(BuiltinOracle):
    """Weighted combination of independent shape decisions on T1C and FLAIR.

    Each channel contributes a saturated score in [0.01, 0.99] based on its
    blob compactness margin against ``theta``; the final class-1 probability
    is the weight-normalized mix. Weights (1, 0) reproduce the T1C-only
    oracle's decisions exactly.
    """

    def __init__(self, w_t1c: float, w_flair: float, theta: float = 1.6,
                 default_class: int = 0, channels=(1, 3), tau: float = 0.25,
                 blur_sigma: float = 1.5, smooth_sigma: float = 1.0,
                 num_modalities: int = 4):
        if w_t1c < 0 or w_flair < 0 or (w_t1c + w_flair) == 0:
            raise ValueError("weights must be non-negative and not both zero")
        self.w = (w_t1c, w_flair)
        self.theta = theta
        self.default_class = default_class
        self.channels = channels
        self.tau = tau
        self.blur_sigma = blur_sigma
        self.smooth_sigma = smooth_sigma
        self.meta = OracleMeta(2, (num_modalities, None, None), "dual-modality")

    def _channel_scores(self, batch: np.ndarray, channel: int) -> np.ndarray:
        comps = _batched_blob_compactness(batch[:, channel], self.blur_sigma, self.smooth_sigma)
        default_score = 0.99 if self.default_class == 1 else 0.01
        scores = np.empty(len(comps))
        for i, c in enumerate(comps):
            if c is None:
                scores[i] = default_score
            else:
                scores[i] = np.clip(0.5 * (1.0 + math.tanh((c - self.theta) / self.tau)), 0.01, 0.99)
        return scores

    def _predict_stack(self, batch: np.ndarray) -> np.ndarray:
        s_t1c = self._channel_scores(batch, self.channels[0])
        s_flair = self._channel_scores(batch, self.channels[1])
        w_sum = self.w[0] + self.w[1]
        p1 = (self.w[0] * s_t1c + self.w[1] * s_flair) / w_sum
        return np.stack([1.0 - p1, p1], axis=1)


class LinearOracle(BuiltinOracle):
    """Linear scoring oracle: class-1 probability from w . x + bias.

    ``link='identity'`` emits the clipped score directly (keeps score
    differences exactly linear while the score stays inside (0, 1));
    ``link='logistic'`` applies the logistic function.
    """

    def __init__(self, weights: np.ndarray, bias: float = 0.5, link: str = "identity",
                 name: str = "linear"):
        if link not in ("identity", "logistic"):
            raise ValueError("link must be 'identity' or 'logistic'")
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.link = link
        self.meta = OracleMeta(2, self.weights.shape, name)

    def _predict_stack(self, batch: np.ndarray) -> np.ndarray:
        scores = np.tensordot(batch.astype(np.float64), self.weights,
                              axes=(tuple(range(1, batch.ndim)),
                                    tuple(range(self.weights.ndim)))) + self.bias
        if self.link == "identity":
            p1 = np.clip(scores, 0.0, 1.0)
        else:
            p1 = 1.0 / (1.0 + np.exp(-scores))
        return np.stack([1.0 - p1, p1], axis=1)


class ConstantOracle(BuiltinOracle):
    """Ignores its input; useful as a null model in tests."""

    def __init__(self, probs=(0.5, 0.5), num_modalities: int = 4):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.meta = OracleMeta(len(self.probs), (num_modalities, None, None), "constant")

    def _predict_stack(self, batch: np.ndarray) -> np.ndarray:
        return np.tile(self.probs, (batch.shape[0], 1))


# ---------------------------------------------------------------------------
# wire client
# ---------------------------------------------------------------------------

class _LineTransport:
    """One newline-delimited JSON connection with deadline-based reads."""

    def send_line(self, line: bytes) -> None:
        raise NotImplementedError

    def read_line(self, deadline: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class _SubprocessTransport(_LineTransport):
    def __init__(self, argv: List[str]):
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise OracleError(f"cannot start oracle process {argv!r}: {exc}") from None
        self._buf = b""
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)

    def send_line(self, line: bytes) -> None:
        if self.proc.poll() is not None:
            raise OracleError(f"oracle process exited with code {self.proc.returncode}")
        try:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle process pipe closed: {exc}") from None

    def read_line(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise OracleError("timeout waiting for oracle reply")
            if not self._sel.select(timeout=min(remaining, 0.5)):
                if self.proc.poll() is not None:
                    raise OracleError(f"oracle process exited with code {self.proc.returncode}")
                continue
            chunk = os.read(self.proc.stdout.fileno(), 1 << 20)
            if not chunk:
                raise OracleError("oracle process closed stdout")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        self._sel.close()
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class _TcpTransport(_LineTransport):
    def __init__(self, host: str, port: int):
        try:
            self.sock = socket.create_connection((host, port), timeout=10.0)
        except OSError as exc:
            raise OracleError(f"cannot connect to oracle at {host}:{port}: {exc}") from None
        self._buf = b""

    def send_line(self, line: bytes) -> None:
        try:
            self.sock.sendall(line)
        except OSError as exc:
            raise OracleError(f"oracle connection lost: {exc}") from None

    def read_line(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise OracleError("timeout waiting for oracle reply")
            self.sock.settimeout(min(remaining, 0.5))
            try:
                chunk = self.sock.recv(1 << 20)
            except socket.timeout:
                continue
            except OSError as exc:
                raise OracleError(f"oracle connection lost: {exc}") from None
            if not chunk:
                raise OracleError("oracle closed the connection")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class WireOracle(Oracle):
    """Client for external oracles speaking the NDJSON protocol.

    Pipelines one predict message per <=64-input chunk and matches replies
    by id, so out-of-order responses are handled.
    """

    def __init__(self, transport: _LineTransport, timeout: Optional[float] = None):
        self.transport = transport
        env = os.environ.get(TIMEOUT_ENV)
        self.timeout = timeout if timeout is not None else (float(env) if env else DEFAULT_TIMEOUT)
        self._next_id = 1
        self.meta = self._handshake()

    def _send(self, obj: dict) -> None:
        self.transport.send_line(json.dumps(obj, separators=(",", ":")).encode() + b"\n")

    def _recv(self, deadline: float) -> dict:
        line = self.transport.read_line(deadline)
        try:
            msg = json.loads(line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OracleError(f"malformed oracle message: {exc}") from None
        if not isinstance(msg, dict) or "type" not in msg:
            raise OracleError(f"malformed oracle message: {line[:200]!r}")
        if msg["type"] == "error":
            raise OracleError(f"oracle error: {msg.get('message', '<no message>')}")
        return msg

    def _handshake(self) -> OracleMeta:
        self._send({"type": "hello", "version": PROTOCOL_VERSION})
        msg = self._recv(time.monotonic() + self.timeout)
        if msg["type"] != "meta":
            raise OracleError(f"expected meta reply, got {msg['type']!r}")
        version = msg.get("version")
        if version != PROTOCOL_VERSION:
            raise OracleError(f"protocol version mismatch: server={version!r}, client={PROTOCOL_VERSION}")
        try:
            shape = tuple(None if d is None else int(d) for d in msg["input_shape"])
            return OracleMeta(int(msg["num_classes"]), shape, str(msg.get("name", "remote")))
        except (KeyError, TypeError, ValueError) as exc:
            raise OracleError(f"malformed meta reply: {exc}") from None

    def predict(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        if len(inputs) == 0:
            return np.zeros((0, self.meta.num_classes), dtype=np.float64)
        for arr in inputs:
            if not self.meta.accepts(np.shape(arr)):
                raise OracleError(
                    f"input shape {np.shape(arr)} incompatible with oracle shape {self.meta.input_shape}"
                )
        chunks = [list(range(i, min(i + MAX_BATCH, len(inputs))))
                  for i in range(0, len(inputs), MAX_BATCH)]
        pending = {}
        for idxs in chunks:
            msg_id = self._next_id
            self._next_id += 1
            pending[msg_id] = idxs
            self._send({
                "type": "predict",
                "id": msg_id,
                "inputs": [encode_array(inputs[i]) for i in idxs],
            })
        out = np.zeros((len(inputs), self.meta.num_classes), dtype=np.float64)
        deadline = time.monotonic() + self.timeout
        while pending:
            msg = self._recv(deadline)
            if msg["type"] != "result":
                raise OracleError(f"unexpected message type {msg['type']!r}")
            msg_id = msg.get("id")
            if msg_id not in pending:
                raise OracleError(f"result for unknown request id {msg_id!r}")
            idxs = pending.pop(msg_id)
            probs = _validate_probs(np.asarray(msg.get("probs"), dtype=np.float64),
                                    self.meta.num_classes, len(idxs))
            out[idxs] = probs
        return out

    def close(self) -> None:
        self.transport.close()


# ---------------------------------------------------------------------------
# server loop (used by the CLI `serve` subcommand and loopback tests)
# ---------------------------------------------------------------------------

def serve_stream(oracle: Oracle, read_line, write_line) -> None:
    """Serve the NDJSON protocol over arbitrary line callables until EOF."""
    while True:
        line = read_line()
        if not line:
            return
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            write_line(json.dumps({"type": "error", "id": None,
                                   "message": "malformed JSON"}) + "\n")
            continue
        mtype = msg.get("type")
        if mtype == "hello":
            if msg.get("version") != PROTOCOL_VERSION:
                write_line(json.dumps({
                    "type": "error", "id": None,
                    "message": f"unsupported protocol version {msg.get('version')!r}",
                }) + "\n")
                continue
            meta = oracle.meta
            write_line(json.dumps({
                "type": "meta", "version": PROTOCOL_VERSION,
                "num_classes": meta.num_classes,
                "input_shape": [d for d in meta.input_shape],
                "name": meta.name,
            }) + "\n")
        elif mtype == "predict":
            msg_id = msg.get("id")
            try:
                arrays = [decode_array(o) for o in msg.get("inputs", [])]
                probs = oracle.predict(arrays)
                write_line(json.dumps({
                    "type": "result", "id": msg_id,
                    "probs": [[float(p) for p in row] for row in probs],
                }) + "\n")
            except (OracleError, ValueError) as exc:
                write_line(json.dumps({"type": "error", "id": msg_id,
                                       "message": str(exc)}) + "\n")
        else:
            write_line(json.dumps({"type": "error", "id": msg.get("id"),
                                   "message": f"unknown message type {mtype!r}"}) + "\n")


def serve_stdio(oracle: Oracle) -> None:
    import sys

    def write_line(s: str) -> None:
        sys.stdout.write(s)
        sys.stdout.flush()

    serve_stream(oracle, sys.stdin.readline, write_line)


def serve_tcp(oracle: Oracle, host: str = "127.0.0.1", port: int = 0,
              ready_callback=None, max_connections: Optional[int] = None) -> None:
    """Accept connections and serve each sequentially until interrupted."""
    srv = socket.create_server((host, port))
    if ready_callback is not None:
        ready_callback(srv.getsockname()[1])
    served = 0
    try:
        while max_connections is None or served < max_connections:
            conn, _ = srv.accept()
            served += 1
            with conn:
                reader = conn.makefile("r", encoding="utf-8")

                def write_line(s: str, _conn=conn) -> None:
                    _conn.sendall(s.encode())

                serve_stream(oracle, reader.readline, write_line)
    finally:
        srv.close()


# ---------------------------------------------------------------------------
# oracle construction and dataset-level helpers
# ---------------------------------------------------------------------------

def open_oracle(spec: str, timeout: Optional[float] = None) -> Oracle:
    """Build an oracle from a CLI spec string.

    Forms: ``builtin:t1c-shape``, ``builtin:dual:<w_t1c>,<w_flair>``,
    ``builtin:linear:<weights.npy>``, ``builtin:constant``,
    ``exec:<command line>``, ``tcp:<host>:<port>``.
    """
    if spec.startswith("builtin:"):
        rest = spec[len("builtin:"):]
        if rest == "t1c-shape":
            return T1cShapeOracle()
        if rest == "constant":
            return ConstantOracle()
        if rest.startswith("dual:"):
            try:
                w1, w2 = (float(x) for x in rest[len("dual:"):].split(","))
            except ValueError:
                raise OracleError(f"bad dual oracle spec {spec!r} (want builtin:dual:W1,W2)") from None
            return DualModalityOracle(w1, w2)
        if rest.startswith("linear:"):
            from .npyio import read_array
            weights = read_array(rest[len("linear:"):])
            return LinearOracle(weights)
        raise OracleError(f"unknown builtin oracle {rest!r}")
    if spec.startswith("exec:"):
        return WireOracle(_SubprocessTransport(shlex.split(spec[len("exec:"):])), timeout)
    if spec.startswith("tcp:"):
        rest = spec[len("tcp:"):]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise OracleError(f"bad tcp oracle spec {spec!r} (want tcp:host:port)")
        return WireOracle(_TcpTransport(host, int(port)), timeout)
    raise OracleError(f"unknown oracle spec {spec!r}")


def predict_dataset(oracle: Oracle, manifest: DatasetManifest,
                    transform=None) -> np.ndarray:
    """Class predictions for every case, in manifest order."""
    preds = np.empty(len(manifest.cases), dtype=int)
    batch_arrays, batch_pos = [], []

    def flush():
        if not batch_arrays:
            return
        probs = oracle.predict(batch_arrays)
        preds[batch_pos] = np.argmax(probs, axis=1)
        batch_arrays.clear()
        batch_pos.clear()

    for pos, case in enumerate(manifest.cases):
        arr = case.image.data
        if transform is not None:
            arr = transform(case)
        batch_arrays.append(arr)
        batch_pos.append(pos)
        if len(batch_arrays) >= MAX_BATCH:
            flush()
    flush()
    return preds


def dataset_accuracy(oracle: Oracle, manifest: DatasetManifest, transform=None) -> float:
    preds = predict_dataset(oracle, manifest, transform)
    labels = np.array([c.label for c in manifest.cases])
    return float((preds == labels).mean())


def probe_mi(oracle: Oracle, probe_t1c: DatasetManifest,
             probe_flair: DatasetManifest) -> ProbeAccuracy:
    """Ground-truth modality importance readout from the two probe datasets."""
    return ProbeAccuracy(
        acc_t1c=dataset_accuracy(oracle, probe_t1c),
        acc_flair=dataset_accuracy(oracle, probe_flair),
    )
