"""Client side of the evaluation-server wire protocol.

Framing: every message is one UTF-8 JSON object behind a 4-byte big-endian
length prefix, over a local stream socket. A connection opens with a hello
carrying vocabulary size and fingerprint; the server rejects mismatches.
Request types: eval, train, save, load, param_count, shutdown. Every request
carries an id which the response (or error) echoes back.

The train message holds the joint-update batch plus "lr" and "c"; an optional
"value_weight" field (default 1) scales the value term so the same message
drives policy-only and value-only updates.

run_conformance_suite() is the golden-message checklist any server
implementation has to pass; the test suites of both this package and the
neural backend run it unchanged.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .corpus import BOS_ID
from .model import Evaluation, LossReport, State, TrainingSample, TrainParams

MAX_MESSAGE = 64 * 1024 * 1024


class ProtocolError(Exception):
    pass


def send_message(sock: socket.socket, obj) -> None:
    payload = json.dumps(obj).encode("utf-8")
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        buf += chunk
    return buf


def recv_message(sock: socket.socket):
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_MESSAGE:
        raise ProtocolError(f"message of {length} bytes exceeds limit")
    return json.loads(_recv_exact(sock, length).decode("utf-8"))


def state_to_wire(state: State) -> dict:
    return {"src": list(state.src), "prefix": list(state.prefix)}


def sample_to_wire(s: TrainingSample) -> dict:
    return {
        "src": list(s.state.src),
        "prefix": list(s.state.prefix),
        "probs": {str(a): p for a, p in sorted(s.visit_probs.items())},
        "bleu": s.bleu,
    }


class RemoteModel:
    """evaluate_batch/apply_update backed by a protocol server.

    Server-side float32 rounding can leave prior rows a hair off a unit sum;
    rows within 1e-4 are renormalized (and values clipped into [0,1]) so the
    rest of the system sees exact distributions.
    """

    kind = "remote"
    trainable = True

    def __init__(self, host: str, port: int, vocab_size: int, vocab_fingerprint: str = "", timeout: float = 60.0):
        self.host = host
        self.port = port
        self.vocab_size = vocab_size
        self.vocab_fingerprint = vocab_fingerprint
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise ConnectionError(f"remote model unreachable at {host}:{port}: {e}") from None
        hello = self._request(
            {"type": "hello", "vocab_size": vocab_size, "fingerprint": vocab_fingerprint},
            "hello_ok",
        )
        if hello.get("vocab_size") != vocab_size:
            self.close()
            raise ProtocolError(f"server at {host}:{port} reports vocab {hello.get('vocab_size')}, want {vocab_size}")

    def _request(self, msg: dict, expect: str) -> dict:
        with self._lock:
            msg = dict(msg)
            msg["id"] = self._next_id
            self._next_id += 1
            try:
                send_message(self._sock, msg)
                resp = recv_message(self._sock)
            except (OSError, ConnectionError) as e:
                raise ConnectionError(f"remote model unreachable at {self.host}:{self.port}: {e}") from None
        if resp.get("type") == "error":
            raise ProtocolError(
                f"server {self.host}:{self.port} error {resp.get('code')}: {resp.get('message')} (request {resp.get('id')})"
            )
        if resp.get("type") != expect or resp.get("id") != msg["id"]:
            raise ProtocolError(f"expected {expect} for request {msg['id']}, got {resp.get('type')}/{resp.get('id')}")
        return resp

    def evaluate_batch(self, states) -> list[Evaluation]:
        if not states:
            raise ValueError("evaluate_batch needs at least one state")
        resp = self._request({"type": "eval", "states": [state_to_wire(s) for s in states]}, "eval_ok")
        priors, values = resp["priors"], resp["values"]
        if len(priors) != len(states) or len(values) != len(states):
            raise ProtocolError(f"eval answered {len(priors)} rows for {len(states)} states")
        out = []
        for row, v in zip(priors, values):
            p = np.asarray(row, dtype=float)
            if len(p) != self.vocab_size:
                raise ProtocolError(f"prior row of length {len(p)}, want {self.vocab_size}")
            s = float(p.sum())
            if abs(s - 1.0) > 1e-4:
                raise ProtocolError(f"prior row sums to {s}")
            p = p / s
            p.flags.writeable = False
            out.append(Evaluation(p, min(1.0, max(0.0, float(v)))))
        return out

    def apply_update(self, batch, tp: TrainParams) -> LossReport:
        msg = {
            "type": "train",
            "lr": tp.learning_rate,
            "c": tp.l2_coeff,
            "samples": [sample_to_wire(s) for s in batch],
        }
        if tp.value_loss_weight != 1.0:
            msg["value_weight"] = tp.value_loss_weight
        resp = self._request(msg, "train_ok")
        loss = resp["loss"]
        return LossReport(
            float(loss["total"]), float(loss["value_term"]), float(loss["policy_term"]), float(loss["l2_term"])
        )

    def save(self, path: str) -> None:
        self._request({"type": "save", "path": str(path)}, "save_ok")

    def load(self, path: str) -> None:
        self._request({"type": "load", "path": str(path)}, "load_ok")

    def param_count(self) -> dict:
        resp = self._request({"type": "param_count"}, "param_count_ok")
        return {"total": int(resp["total"]), "components": dict(resp.get("components", {}))}

    def shutdown(self) -> None:
        self._request({"type": "shutdown"}, "shutdown_ok")
        self.close()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- golden-message conformance suite ------------------------------------------


@dataclass(frozen=True)
class ConformanceResult:
    name: str
    passed: bool
    detail: str = ""


def _raw_roundtrip(host, port, messages):
    """Open a bare connection, send each message, collect one response each."""
    with socket.create_connection((host, port), timeout=30.0) as sock:
        out = []
        for m in messages:
            if isinstance(m, bytes):  # pre-framed garbage
                sock.sendall(m)
            else:
                send_message(sock, m)
            out.append(recv_message(sock))
        return out


def run_conformance_suite(host, port, vocab_size, fingerprint, tmp_dir, include_shutdown=False):
    """Check a protocol server against the golden message exchanges.

    Returns one ConformanceResult per check. include_shutdown kills the
    server as the final check, so leave it off while the server is shared.
    """
    results = []

    def check(name, fn):
        try:
            fn()
            results.append(ConformanceResult(name, True))
        except Exception as e:
            results.append(ConformanceResult(name, False, f"{type(e).__name__}: {e}"))

    src = [5, 6] if vocab_size > 6 else [4, 4]
    states = [
        {"src": src, "prefix": [BOS_ID]},
        {"src": src, "prefix": [BOS_ID, src[-1]]},
    ]

    def handshake():
        (resp,) = _raw_roundtrip(host, port, [{"type": "hello", "id": 1, "vocab_size": vocab_size, "fingerprint": fingerprint}])
        assert resp["type"] == "hello_ok" and resp["id"] == 1, resp
        assert resp["vocab_size"] == vocab_size, resp

    def vocab_mismatch_rejected():
        (resp,) = _raw_roundtrip(host, port, [{"type": "hello", "id": 2, "vocab_size": vocab_size + 1, "fingerprint": fingerprint}])
        assert resp["type"] == "error" and resp["id"] == 2, resp

    def eval_shape():
        with RemoteModel(host, port, vocab_size, fingerprint) as m:
            evs = m.evaluate_batch([State(tuple(s["src"]), tuple(s["prefix"])) for s in states])
            assert len(evs) == 2
            # RemoteModel already enforced row length, 1e-4 sums, [0,1] values

    def train_ok():
        with RemoteModel(host, port, vocab_size, fingerprint) as m:
            batch = [
                TrainingSample(State(tuple(src), (BOS_ID,)), {4: 0.5, 2: 0.25}, 0.5),
                TrainingSample(State(tuple(src), (BOS_ID, 4)), {2: 0.9}, 0.5),
            ]
            rep = m.apply_update(batch, TrainParams(learning_rate=1e-3))
            assert rep.total == rep.total  # finite, real response
            assert rep.value_term >= 0.0 and rep.policy_term >= 0.0

    def train_empty_is_noop():
        with RemoteModel(host, port, vocab_size, fingerprint) as m:
            st = State(tuple(src), (BOS_ID,))
            before = m.evaluate_batch([st])[0]
            rep = m.apply_update([], TrainParams(learning_rate=1e-3))
            assert rep.total == 0.0, rep
            after = m.evaluate_batch([st])[0]
            assert np.array_equal(before.priors, after.priors) and before.value == after.value

    def error_echoes_id():
        (resp,) = _raw_roundtrip(host, port, [{"type": "no_such_type", "id": 77}])
        assert resp["type"] == "error" and resp["id"] == 77, resp
        assert resp.get("code"), resp

    def malformed_payload():
        payload = b"this is not json"
        framed = struct.pack(">I", len(payload)) + payload
        (resp,) = _raw_roundtrip(host, port, [framed])
        assert resp["type"] == "error", resp

    def save_load_roundtrip():
        path = str(tmp_dir / "conformance_ckpt")
        with RemoteModel(host, port, vocab_size, fingerprint) as m:
            st = State(tuple(src), (BOS_ID,))
            before = m.evaluate_batch([st])[0]
            m.save(path)
            m.apply_update([TrainingSample(st, {4: 1.0}, 1.0)], TrainParams(learning_rate=0.5))
            m.load(path)
            after = m.evaluate_batch([st])[0]
            assert np.allclose(before.priors, after.priors, atol=1e-6), "load did not restore parameters"
            assert abs(before.value - after.value) <= 1e-6

    def param_count_reported():
        with RemoteModel(host, port, vocab_size, fingerprint) as m:
            counts = m.param_count()
            assert counts["total"] > 0

    def shutdown_stops_server():
        m = RemoteModel(host, port, vocab_size, fingerprint)
        m.shutdown()

    check("handshake", handshake)
    check("handshake_rejects_vocab_mismatch", vocab_mismatch_rejected)
    check("eval_shape_and_ranges", eval_shape)
    check("train_returns_loss_terms", train_ok)
    check("train_empty_batch_is_noop", train_empty_is_noop)
    check("error_echoes_request_id", error_echoes_id)
    check("malformed_payload_gets_error", malformed_payload)
    check("save_load_roundtrip", save_load_roundtrip)
    check("param_count_reported", param_count_reported)
    if include_shutdown:
        check("shutdown", shutdown_stops_server)
    return results
