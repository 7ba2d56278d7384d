"""Stream-socket model server.

Speaks the search engine's evaluation protocol: length-prefixed JSON
messages, hello handshake carrying vocabulary size and fingerprint, then
eval / train / save / load / param_count / shutdown requests, each answered
with a matching *_ok response or an error echoing the request id.

The network is materialized on the first hello (or eagerly when serve() is
given a vocab_size); later hellos must agree with it. Connections are served
one at a time, one request at a time, which is all the client ever sends.
Parameter updates run through Adam at the configured learning rate; the
train message's lr field is advisory and ignored.
"""
from __future__ import annotations

import json
import socket
import struct

import torch

from .config import ServerConfig
from .net import PolicyValueNet

MAX_MESSAGE = 64 * 1024 * 1024


class _Shutdown(Exception):
    pass


class _RequestError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _send(sock: socket.socket, obj) -> None:
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


class ModelServer:
    def __init__(self, cfg: ServerConfig, vocab_size: int | None = None):
        self.cfg = cfg
        self.net: PolicyValueNet | None = None
        self.optimizer: torch.optim.Adam | None = None
        self.fingerprint: str | None = None
        if vocab_size is not None:
            self._materialize(vocab_size)

    def _materialize(self, vocab_size: int) -> None:
        self.net = PolicyValueNet(vocab_size, self.cfg)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=self.cfg.learning_rate)

    def _require_net(self) -> PolicyValueNet:
        if self.net is None:
            raise _RequestError("no_model", "no hello received yet, model not materialized")
        return self.net

    # -- request handlers ----------------------------------------------------

    def _on_hello(self, msg) -> dict:
        vocab = msg.get("vocab_size")
        if not isinstance(vocab, int) or vocab < 2:
            raise _RequestError("bad_request", f"hello needs an integer vocab_size >= 2, got {vocab!r}")
        fingerprint = str(msg.get("fingerprint", ""))
        if self.net is None:
            self._materialize(vocab)
            self.fingerprint = fingerprint
        else:
            if vocab != self.net.vocab_size:
                raise _RequestError(
                    "vocab_mismatch", f"server holds vocab {self.net.vocab_size}, client sent {vocab}"
                )
            if self.fingerprint is None:
                self.fingerprint = fingerprint
            elif fingerprint != self.fingerprint:
                raise _RequestError("vocab_mismatch", "vocabulary fingerprint does not match the served model")
        return {"type": "hello_ok", "vocab_size": vocab}

    def _states_from_wire(self, raw) -> list[dict]:
        net = self._require_net()
        if not isinstance(raw, list):
            raise _RequestError("bad_request", "states must be a list")
        states = []
        for s in raw:
            src, prefix = s.get("src"), s.get("prefix")
            if not isinstance(src, list) or not isinstance(prefix, list) or not prefix:
                raise _RequestError("bad_request", "each state needs src and a non-empty prefix")
            for tok in src + prefix:
                if not isinstance(tok, int) or not 0 <= tok < net.vocab_size:
                    raise _RequestError("bad_request", f"token {tok!r} outside vocabulary of {net.vocab_size}")
            states.append({"src": src, "prefix": prefix})
        return states

    def _on_eval(self, msg) -> dict:
        net = self._require_net()
        states = self._states_from_wire(msg.get("states"))
        if not states:
            return {"type": "eval_ok", "priors": [], "values": []}
        priors, values = net.evaluate(states)
        return {"type": "eval_ok", "priors": priors, "values": values}

    def _on_train(self, msg) -> dict:
        net = self._require_net()
        assert self.optimizer is not None
        raw = msg.get("samples")
        if not isinstance(raw, list):
            raise _RequestError("bad_request", "train needs a samples list")
        l2_coeff = float(msg.get("c", 0.0))
        value_weight = float(msg.get("value_weight", 1.0))
        if not raw:
            zero = {"total": 0.0, "value_term": 0.0, "policy_term": 0.0, "l2_term": 0.0}
            return {"type": "train_ok", "loss": zero}
        samples = []
        for s in raw:
            state = self._states_from_wire([{"src": s.get("src"), "prefix": s.get("prefix")}])[0]
            probs = {}
            for k, v in dict(s.get("probs", {})).items():
                a = int(k)
                if not 0 <= a < net.vocab_size:
                    raise _RequestError("bad_request", f"action {a} outside vocabulary of {net.vocab_size}")
                probs[a] = float(v)
            samples.append({**state, "probs": probs, "bleu": float(s.get("bleu", 0.0))})
        self.optimizer.zero_grad()
        policy_term, value_term, l2_term = net.loss_terms(samples, value_weight, l2_coeff)
        total = policy_term + value_term + l2_term
        total.backward()
        self.optimizer.step()
        loss = {
            "total": float(total.item()),
            "value_term": float(value_term.item()),
            "policy_term": float(policy_term.item()),
            "l2_term": float(l2_term.item()),
        }
        return {"type": "train_ok", "loss": loss}

    def _on_save(self, msg) -> dict:
        net = self._require_net()
        assert self.optimizer is not None
        path = msg.get("path")
        if not isinstance(path, str) or not path:
            raise _RequestError("bad_request", "save needs a path string")
        try:
            torch.save(
                {
                    "vocab_size": net.vocab_size,
                    "fingerprint": self.fingerprint,
                    "encoder_mode": self.cfg.encoder_mode,
                    "model": net.state_dict(),
                    "optimizer": self.optimizer.state_dict(),
                },
                path,
            )
        except OSError as e:
            raise _RequestError("io_error", f"cannot save to {path}: {e}")
        return {"type": "save_ok"}

    def _on_load(self, msg) -> dict:
        net = self._require_net()
        assert self.optimizer is not None
        path = msg.get("path")
        if not isinstance(path, str) or not path:
            raise _RequestError("bad_request", "load needs a path string")
        try:
            ckpt = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, ValueError) as e:
            raise _RequestError("io_error", f"cannot load {path}: {e}")
        if ckpt.get("vocab_size") != net.vocab_size:
            raise _RequestError(
                "vocab_mismatch",
                f"checkpoint holds vocab {ckpt.get('vocab_size')}, server holds {net.vocab_size}",
            )
        if ckpt.get("encoder_mode") != self.cfg.encoder_mode:
            raise _RequestError(
                "bad_request",
                f"checkpoint was written in encoder_mode={ckpt.get('encoder_mode')!r}, server runs {self.cfg.encoder_mode!r}",
            )
        net.load_state_dict(ckpt["model"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        # the checkpoint carries Adam moments; the step size stays this server's
        for group in self.optimizer.param_groups:
            group["lr"] = self.cfg.learning_rate
        return {"type": "load_ok"}

    def _on_param_count(self, msg) -> dict:
        report = self._require_net().param_report()
        return {"type": "param_count_ok", **report}

    def _dispatch(self, msg) -> dict:
        if not isinstance(msg, dict):
            raise _RequestError("bad_request", "message must be a JSON object")
        kind = msg.get("type")
        if kind == "shutdown":
            raise _Shutdown()
        handlers = {
            "hello": self._on_hello,
            "eval": self._on_eval,
            "train": self._on_train,
            "save": self._on_save,
            "load": self._on_load,
            "param_count": self._on_param_count,
        }
        if kind not in handlers:
            raise _RequestError("unknown_type", f"no handler for request type {kind!r}")
        return handlers[kind](msg)

    # -- connection loop -----------------------------------------------------

    def _serve_connection(self, conn: socket.socket) -> None:
        while True:
            (length,) = struct.unpack(">I", _recv_exact(conn, 4))
            if length > MAX_MESSAGE:
                _send(conn, {"type": "error", "id": None, "code": "bad_request",
                             "message": f"message of {length} bytes exceeds limit"})
                return  # stream can no longer be trusted
            payload = _recv_exact(conn, length)
            try:
                msg = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                _send(conn, {"type": "error", "id": None, "code": "bad_json", "message": str(e)})
                continue
            req_id = msg.get("id") if isinstance(msg, dict) else None
            try:
                resp = self._dispatch(msg)
            except _Shutdown:
                _send(conn, {"type": "shutdown_ok", "id": req_id})
                raise
            except _RequestError as e:
                resp = {"type": "error", "code": e.code, "message": str(e)}
            except Exception as e:  # refused input or handler fault; keep serving
                resp = {"type": "error", "code": "internal", "message": f"{type(e).__name__}: {e}"}
            resp["id"] = req_id
            _send(conn, resp)


def _parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        if not host:
            raise ValueError(f"endpoint {endpoint!r} is not host:port")
        return host, int(port)
    host, port = endpoint
    return str(host), int(port)


def serve(endpoint, cfg: ServerConfig | None = None, *, vocab_size: int | None = None, ready=None) -> None:
    """Serve the protocol on endpoint until a shutdown request arrives.

    endpoint is (host, port) or "host:port"; port 0 binds an ephemeral port,
    reported through the optional ready(port) callback once listening.
    """
    cfg = cfg or ServerConfig()
    state = ModelServer(cfg, vocab_size=vocab_size)
    host, port = _parse_endpoint(endpoint)
    with socket.create_server((host, port)) as listener:
        if ready is not None:
            ready(listener.getsockname()[1])
        while True:
            conn, _ = listener.accept()
            try:
                with conn:
                    state._serve_connection(conn)
            except _Shutdown:
                return
            except (ConnectionError, OSError, struct.error):
                continue  # client went away; await the next connection
