"""Server side of the newline-delimited JSON prediction protocol (version 1).

Message flow: the client opens with {"type": "hello", "version": 1} and gets
{"type": "meta", ...} describing the model; each {"type": "predict", "id",
"inputs": [{shape, data_b64}]} is answered by {"type": "result", "id",
"probs"} carrying one probability row per input. Array payloads are
little-endian float32, base64-encoded. Replies carry the request id, so
clients may pipeline.
"""

import base64
import json
import socket
import sys
from typing import Optional

import numpy as np

PROTOCOL_VERSION = 1


def decode_array(obj: dict) -> np.ndarray:
    shape = tuple(int(d) for d in obj["shape"])
    raw = base64.b64decode(obj["data_b64"])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(raw) != 4 * count:
        raise ValueError(f"payload length {len(raw)} != 4*{count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _shape_accepts(expected, shape) -> bool:
    if len(shape) != len(expected):
        return False
    return all(e is None or e == s for e, s in zip(expected, shape))


def _error(msg_id, message: str) -> str:
    return json.dumps({"type": "error", "id": msg_id, "message": message}) + "\n"


def serve_lines(model, read_line, write_line) -> None:
    """Serve the protocol over line callables until EOF."""
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
            write_line(_error(None, "malformed JSON"))
            continue
        mtype = msg.get("type")
        if mtype == "hello":
            if msg.get("version") != PROTOCOL_VERSION:
                write_line(_error(None, f"unsupported protocol version {msg.get('version')!r}"))
                continue
            write_line(json.dumps({
                "type": "meta",
                "version": PROTOCOL_VERSION,
                "num_classes": model.num_classes,
                "input_shape": list(model.input_shape),
                "name": model.name,
            }) + "\n")
        elif mtype == "predict":
            msg_id = msg.get("id")
            try:
                arrays = [decode_array(o) for o in msg.get("inputs", [])]
                for arr in arrays:
                    if not _shape_accepts(model.input_shape, arr.shape):
                        raise ValueError(
                            f"input shape {arr.shape} incompatible with model shape "
                            f"{model.input_shape}"
                        )
                if arrays:
                    probs = model.predict_probs(np.stack(arrays))
                else:
                    probs = np.zeros((0, model.num_classes))
                write_line(json.dumps({
                    "type": "result", "id": msg_id,
                    "probs": [[float(p) for p in row] for row in probs],
                }) + "\n")
            except (ValueError, KeyError, TypeError) as exc:
                write_line(_error(msg_id, str(exc)))
        else:
            write_line(_error(msg.get("id"), f"unknown message type {mtype!r}"))


def serve_stdio(model) -> None:
    def write_line(s: str) -> None:
        sys.stdout.write(s)
        sys.stdout.flush()

    serve_lines(model, sys.stdin.readline, write_line)


def serve_tcp(model, host: str = "127.0.0.1", port: int = 0,
              max_connections: Optional[int] = None) -> None:
    srv = socket.create_server((host, port))
    print(f"listening on {host}:{srv.getsockname()[1]}", flush=True)
    served = 0
    try:
        while max_connections is None or served < max_connections:
            conn, _ = srv.accept()
            served += 1
            with conn:
                reader = conn.makefile("r", encoding="utf-8")

                def write_line(s: str, _conn=conn) -> None:
                    _conn.sendall(s.encode())

                serve_lines(model, reader.readline, write_line)
    finally:
        srv.close()
