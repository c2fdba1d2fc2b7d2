"""Hub-and-spoke wire protocol.

Clients open every connection and drive every exchange; the server only
ever replies. Wire layout of one message::

    u32 BE  n          length of the JSON body
    n bytes body       UTF-8 JSON {"kind", "session", "payload"[, "sidecar_bytes"]}
    [u32 BE m]         present iff "sidecar_bytes" is in the body, m == sidecar_bytes
    [m bytes]          ParamVector.to_bytes(): u32 LE header length, JSON layout
                       header, float32 LE values

Handshake: Hello{client} -> Challenge{nonce} -> Auth{mac} -> AuthOk | AuthFail,
where ``mac = HMAC-SHA256(key=sha256(secret), nonce || client_name)``. The
server stores only ``sha256(secret)`` in its roster.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import re
import secrets
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fedkd.federation import ClientWorker, JobResult
from fedkd.nn import ParamVector

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
KINDS = ("Hello", "Challenge", "Auth", "AuthOk", "AuthFail", "Poll", "NoWork",
         "TrainTask", "TrainResult", "Ack", "Shutdown")
CLIENT_KINDS = frozenset({"Hello", "Auth", "Poll", "TrainResult"})
SIDECAR_KINDS = frozenset({"TrainTask", "TrainResult"})


class FrameError(ValueError):
    pass


class FrameTooLarge(FrameError):
    pass


class AuthenticationError(RuntimeError):
    pass


class ConnectionFailed(ConnectionError):
    pass


class RoundTimeoutError(TimeoutError):
    pass


# --------------------------------------------------------------------------
# messages and framing


@dataclass
class RoundMessage:
    kind: str
    session_id: str = ""
    payload: dict = field(default_factory=dict)
    params: Optional[ParamVector] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FrameError(f"unknown message kind {self.kind!r}")
        if self.params is not None and self.kind not in SIDECAR_KINDS:
            raise FrameError(f"{self.kind} cannot carry parameters")


def _body(msg: RoundMessage, sidecar_len: Optional[int]) -> bytes:
    obj = {"kind": msg.kind, "session": msg.session_id, "payload": msg.payload}
    if sidecar_len is not None:
        obj["sidecar_bytes"] = sidecar_len
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_frame(msg: RoundMessage, max_frame: int = MAX_FRAME) -> bytes:
    side = msg.params.to_bytes() if msg.params is not None else None
    body = _body(msg, None if side is None else len(side))
    if len(body) > max_frame or (side is not None and len(side) > max_frame):
        raise FrameTooLarge(f"message exceeds max frame size {max_frame}")
    out = struct.pack(">I", len(body)) + body
    if side is not None:
        out += struct.pack(">I", len(side)) + side
    return out


def _parse_body(body: bytes) -> dict:
    if not body:
        raise FrameError("empty frame body")
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"malformed JSON body: {e}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("kind"), str) or not isinstance(obj.get("payload", {}), dict):
        raise FrameError("body is not a message object")
    return obj


def _message(obj: dict, side: Optional[bytes]) -> RoundMessage:
    params = None
    if side is not None:
        try:
            params = ParamVector.from_bytes(side)
        except Exception as e:
            raise FrameError(f"bad parameter sidecar: {e}") from None
    return RoundMessage(obj["kind"], str(obj.get("session", "")), obj.get("payload", {}), params)


def _sidecar_len(obj, max_frame):
    n = obj.get("sidecar_bytes")
    if n is None:
        return None
    if not isinstance(n, int) or n <= 0:
        raise FrameError("invalid sidecar length")
    if n > max_frame:
        raise FrameTooLarge(f"sidecar of {n} bytes exceeds {max_frame}")
    return n


def decode_frame(data: bytes, max_frame: int = MAX_FRAME) -> RoundMessage:
    """Inverse of :func:`encode_frame`; ``data`` must hold exactly one message."""
    if len(data) < 4:
        raise FrameError("truncated length prefix")
    (n,) = struct.unpack(">I", data[:4])
    if n > max_frame:
        raise FrameTooLarge(f"declared length {n} exceeds {max_frame}")
    if n == 0:
        raise FrameError("empty frame body")
    if len(data) < 4 + n:
        raise FrameError("truncated frame")
    obj = _parse_body(data[4:4 + n])
    rest = data[4 + n:]
    m = _sidecar_len(obj, max_frame)
    if m is None:
        if rest:
            raise FrameError("trailing bytes after frame")
        return _message(obj, None)
    if len(rest) < 4:
        raise FrameError("truncated sidecar prefix")
    (m2,) = struct.unpack(">I", rest[:4])
    if m2 != m or len(rest) != 4 + m:
        raise FrameError("sidecar length mismatch")
    return _message(obj, rest[4:])


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-message" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_message(sock, max_frame: int = MAX_FRAME):
    """Read one message from a socket; returns ``(message, wire_bytes)``."""
    head = _recv_exact(sock, 4)
    (n,) = struct.unpack(">I", head)
    if n > max_frame:
        raise FrameTooLarge(f"declared length {n} exceeds {max_frame}")
    if n == 0:
        raise FrameError("empty frame body")
    body = _recv_exact(sock, n)
    obj = _parse_body(body)
    m = _sidecar_len(obj, max_frame)
    side = None
    if m is not None:
        (m2,) = struct.unpack(">I", _recv_exact(sock, 4))
        if m2 != m:
            raise FrameError("sidecar length mismatch")
        side = _recv_exact(sock, m)
    return _message(obj, side), body


def send_message(sock, msg: RoundMessage, max_frame: int = MAX_FRAME) -> bytes:
    data = encode_frame(msg, max_frame)
    sock.sendall(data)
    return data


# --------------------------------------------------------------------------
# credentials


def secret_hash(secret: str) -> str:
    return hashlib.sha256(secret.encode("utf-8")).hexdigest()


def auth_mac(key_hex: str, nonce_hex: str, client_name: str) -> str:
    return hmac.new(bytes.fromhex(key_hex), bytes.fromhex(nonce_hex) + client_name.encode("utf-8"),
                    hashlib.sha256).hexdigest()


@dataclass(frozen=True)
class Credentials:
    client_name: str
    secret: str = field(repr=False)

    def mac(self, nonce_hex: str) -> str:
        return auth_mac(secret_hash(self.secret), nonce_hex, self.client_name)


@dataclass(frozen=True)
class RosterEntry:
    client_id: int
    secret_sha256: str = field(repr=False)


class Roster:
    """Server-side allow-list: client name -> (client id, sha256 of the secret)."""

    def __init__(self, entries: dict):
        self.entries = dict(entries)

    @classmethod
    def from_dict(cls, obj: dict) -> "Roster":
        entries = {}
        for name, v in obj.items():
            if isinstance(v, str):
                m = re.search(r"(\d+)$", name)
                if not m:
                    raise ValueError(f"roster entry {name!r}: cannot derive a client id from the name")
                entries[name] = RosterEntry(int(m.group(1)), v)
            else:
                entries[name] = RosterEntry(int(v["client_id"]), str(v["secret_sha256"]))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Roster":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {n: {"client_id": e.client_id, "secret_sha256": e.secret_sha256} for n, e in sorted(self.entries.items())}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @property
    def client_ids(self) -> list:
        return sorted(e.client_id for e in self.entries.values())

    def verify(self, name: str, nonce_hex: str, mac_hex: str) -> Optional[int]:
        entry = self.entries.get(name)
        # compare against a dummy key for unknown names so timing does not leak membership
        key = entry.secret_sha256 if entry is not None else "00" * 32
        ok = hmac.compare_digest(auth_mac(key, nonce_hex, name), str(mac_hex))
        return entry.client_id if ok and entry is not None else None


def make_roster(client_ids, secret_for) -> tuple:
    """Roster plus matching credentials; ``secret_for(cid)`` returns each client's secret."""
    entries, creds = {}, {}
    for c in client_ids:
        name = f"client_{int(c):02d}"
        s = secret_for(c)
        entries[name] = RosterEntry(int(c), secret_hash(s))
        creds[int(c)] = Credentials(name, s)
    return Roster(entries), creds


# --------------------------------------------------------------------------
# transcript


@dataclass
class TranscriptEntry:
    seq: int
    session: str
    sender: str
    kind: str
    body: str
    sidecar: Optional[dict] = None


class Transcript:
    def __init__(self):
        self._lock = threading.Lock()
        self.entries = []
        self.incorporated = []

    def record(self, session, sender, msg: RoundMessage, body: bytes):
        side = None
        if msg.params is not None:
            side = {"type": "ParamVector", "count": len(msg.params.values), "fingerprint": msg.params.fingerprint()}
        with self._lock:
            self.entries.append(TranscriptEntry(len(self.entries), session, sender, msg.kind,
                                                body.decode("utf-8"), side))

    def incorporate(self, key):
        with self._lock:
            self.incorporated.append(key)

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e.__dict__, sort_keys=True) + "\n")
            for key in self.incorporated:
                f.write(json.dumps({"incorporated": list(key)}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Transcript":
        tr = cls()
        with open(path) as f:
            for line in f:
                obj = json.loads(line)
                if "incorporated" in obj:
                    tr.incorporated.append(tuple(obj["incorporated"]))
                else:
                    tr.entries.append(TranscriptEntry(**obj))
        return tr


def _numeric_runs(obj, limit):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _numeric_runs(v, limit)
    elif isinstance(obj, list):
        if len(obj) >= limit and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            yield len(obj)
        for v in obj:
            yield from _numeric_runs(v, limit)


def validate_transcript(transcript: Transcript, numeric_limit: int = 16) -> list:
    """Return a list of violations (empty when the transcript is clean).

    Checks server passivity (every server message answers the immediately
    preceding client message of the same session), at-most-once
    incorporation of updates, and that no message carries raw arrays: only
    ParamVector sidecars on TrainTask/TrainResult and no numeric JSON list of
    ``numeric_limit`` or more entries.
    """
    problems = []
    sessions = {}
    for e in transcript.entries:
        sessions.setdefault(e.session, []).append(e)
    for sid, entries in sessions.items():
        expect_client = True
        for e in entries:
            if e.sender == "server":
                if expect_client:
                    problems.append(f"session {sid}: unsolicited server {e.kind} at seq {e.seq}")
                expect_client = True
            else:
                if not expect_client:
                    problems.append(f"session {sid}: client {e.kind} before reply at seq {e.seq}")
                expect_client = False
                if e.kind not in CLIENT_KINDS:
                    problems.append(f"session {sid}: client sent server-only kind {e.kind}")
    seen = set()
    for key in transcript.incorporated:
        if key in seen:
            problems.append(f"update {key} incorporated twice")
        seen.add(key)
    for e in transcript.entries:
        if e.sidecar is not None and (e.kind not in SIDECAR_KINDS or e.sidecar.get("type") != "ParamVector"):
            problems.append(f"seq {e.seq}: unexpected sidecar on {e.kind}")
        for n in _numeric_runs(json.loads(e.body), numeric_limit):
            problems.append(f"seq {e.seq}: {e.kind} carries a numeric array of length {n}")
    return problems


# --------------------------------------------------------------------------
# server


class _Job:
    def __init__(self, job_id, job, params, clients):
        self.job_id = job_id
        self.job = job
        self.params = params
        self.clients = frozenset(clients)
        self.results = {}


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.server.fed._session(self.request)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class FederationServer:
    """Passive polling server.

    The orchestrator posts a job with :meth:`execute`; connected clients pick
    it up on their next Poll. Round state is mutated only under one lock.
    """

    def __init__(self, bind=("127.0.0.1", 0), roster: Roster = None, *, max_frame: int = MAX_FRAME,
                 round_timeout: Optional[float] = 600.0, io_timeout: float = 60.0):
        if roster is None:
            raise ValueError("a roster is required")
        self.roster = roster
        self.max_frame = max_frame
        self.round_timeout = round_timeout
        self.io_timeout = io_timeout
        self.transcript = Transcript()
        self._cond = threading.Condition()
        self._job: Optional[_Job] = None
        self._next_id = 0
        self._stopping = False
        self._shut_down = set()
        self._srv = _TCPServer(tuple(bind), _Handler)
        self._srv.fed = self
        self._thread = threading.Thread(target=self._srv.serve_forever, name="fed-server", daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._srv.server_address[:2]

    @property
    def client_ids(self) -> list:
        return self.roster.client_ids

    # orchestrator side

    def execute(self, job: dict, params: Optional[ParamVector], client_ids) -> dict:
        """Post ``job`` to ``client_ids`` and block until every one has reported."""
        clients = sorted(int(c) for c in client_ids)
        unknown = set(clients) - set(self.client_ids)
        if unknown:
            raise ValueError(f"clients {sorted(unknown)} are not on the roster")
        with self._cond:
            self._next_id += 1
            current = _Job(self._next_id, dict(job), params, clients)
            self._job = current
            deadline = None if self.round_timeout is None else time.monotonic() + self.round_timeout
            while set(current.results) != set(clients):
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    self._job = None
                    missing = sorted(set(clients) - set(current.results))
                    raise RoundTimeoutError(f"job {current.job_id}: no result from clients {missing}")
                self._cond.wait(timeout=remaining)
            self._job = None
        return {c: current.results[c] for c in clients}

    def shutdown_clients(self, wait: float = 30.0):
        """Answer every subsequent Poll with Shutdown and wait for the roster to be told."""
        with self._cond:
            self._stopping = True
            deadline = time.monotonic() + wait
            while set(self._shut_down) != set(self.client_ids):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(timeout=remaining)

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()
        self._thread.join(timeout=5)

    # session side

    def _reply(self, sock, session, msg):
        msg.session_id = session
        data = encode_frame(msg, self.max_frame)
        self.transcript.record(session, "server", msg, data[4:4 + struct.unpack(">I", data[:4])[0]])
        sock.sendall(data)

    def _session(self, sock):
        sock.settimeout(self.io_timeout)
        session = secrets.token_hex(8)
        client_id = None
        name = None
        try:
            hello, body = read_message(sock, self.max_frame)
            self.transcript.record(session, "client", hello, body)
            if hello.kind != "Hello":
                self._reply(sock, session, RoundMessage("AuthFail", payload={"reason": "expected Hello"}))
                return
            name = str(hello.payload.get("client", ""))
            nonce = secrets.token_hex(32)
            self._reply(sock, session, RoundMessage("Challenge", payload={"nonce": nonce}))
            auth, body = read_message(sock, self.max_frame)
            self.transcript.record(session, "client", auth, body)
            if auth.kind == "Auth":
                client_id = self.roster.verify(name, nonce, auth.payload.get("mac", ""))
            if client_id is None:
                log.info("authentication failed for session %s", session)
                self._reply(sock, session, RoundMessage("AuthFail", payload={"reason": "authentication failed"}))
                return
            self._reply(sock, session, RoundMessage("AuthOk", payload={"client_id": client_id}))
            while True:
                msg, body = read_message(sock, self.max_frame)
                self.transcript.record(session, "client", msg, body)
                reply = self._dispatch(client_id, msg)
                self._reply(sock, session, reply)
                if reply.kind in ("Shutdown", "AuthFail"):
                    return
        except FrameError as e:
            log.warning("session %s: dropping connection on bad frame: %s", session, e)
        except (ConnectionError, socket.timeout, OSError):
            pass
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _dispatch(self, client_id, msg: RoundMessage) -> RoundMessage:
        with self._cond:
            if msg.kind == "Poll":
                if self._stopping:
                    self._shut_down.add(client_id)
                    self._cond.notify_all()
                    return RoundMessage("Shutdown")
                job = self._job
                if job is None or client_id not in job.clients or client_id in job.results:
                    return RoundMessage("NoWork")
                payload = {"job_id": job.job_id, "round": job.job.get("round", 0), "job": job.job}
                return RoundMessage("TrainTask", payload=payload, params=job.params)
            if msg.kind == "TrainResult":
                return self._accept(client_id, msg)
            return RoundMessage("AuthFail", payload={"reason": f"unexpected {msg.kind} after handshake"})

    def _accept(self, client_id, msg) -> RoundMessage:
        p = msg.payload
        job = self._job
        key = (p.get("job_id"), p.get("round"), client_id)
        if int(p.get("client_id", -1)) != client_id:
            return RoundMessage("Ack", payload={"ok": False, "reason": "client id does not match session"})
        if job is None or p.get("job_id") != job.job_id or p.get("round") != job.job.get("round", 0):
            return RoundMessage("Ack", payload={"ok": False, "reason": "late or unknown round"})
        if client_id not in job.clients:
            return RoundMessage("Ack", payload={"ok": False, "reason": "client not selected for this round"})
        if client_id in job.results:
            return RoundMessage("Ack", payload={"ok": True, "duplicate": True})
        job.results[client_id] = JobResult(client_id, int(p["n_samples"]), float(p["train_loss"]), msg.params,
                                           p.get("metrics"), p.get("info", {}))
        self.transcript.incorporate(key)
        self._cond.notify_all()
        return RoundMessage("Ack", payload={"ok": True})


# --------------------------------------------------------------------------
# client


class _Session:
    def __init__(self, address, creds: Credentials, max_frame, io_timeout):
        self.sock = socket.create_connection(tuple(address), timeout=io_timeout)
        self.max_frame = max_frame
        try:
            self.call(RoundMessage("Hello", payload={"client": creds.client_name}), expect=("Challenge", "AuthFail"))
            reply = self._last
            if reply.kind == "AuthFail":
                raise AuthenticationError(reply.payload.get("reason", "rejected"))
            ok = self.call(RoundMessage("Auth", payload={"mac": creds.mac(reply.payload["nonce"])}))
            if ok.kind != "AuthOk":
                raise AuthenticationError(ok.payload.get("reason", "rejected"))
            self.client_id = int(ok.payload["client_id"])
        except BaseException:
            self.close()
            raise

    def call(self, msg, expect=None) -> RoundMessage:
        send_message(self.sock, msg, self.max_frame)
        reply, _ = read_message(self.sock, self.max_frame)
        if expect is not None and reply.kind not in expect:
            raise FrameError(f"expected {expect}, got {reply.kind}")
        self._last = reply
        return reply

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def client_poll_loop(address, credentials: Credentials, worker: ClientWorker, *, poll_interval: float = 0.2,
                     max_attempts: int = 8, backoff_base: float = 0.1, backoff_max: float = 2.0,
                     ack_timeout: float = 60.0, max_frame: int = MAX_FRAME) -> int:
    """Authenticate, poll, run tasks; returns 0 once the server says Shutdown.

    Network errors reconnect with bounded exponential backoff. A result whose
    Ack does not arrive is resent (same job, round and client) on the next
    connection. Raises :class:`AuthenticationError` on rejected credentials
    and :class:`ConnectionFailed` after ``max_attempts`` consecutive failures.
    """
    pending: Optional[RoundMessage] = None
    failures = 0
    while True:
        try:
            sess = _Session(address, credentials, max_frame, ack_timeout)
        except AuthenticationError:
            raise
        except (OSError, ConnectionError, FrameError) as e:
            failures += 1
            if failures >= max_attempts:
                raise ConnectionFailed(f"giving up after {failures} attempts: {e}") from e
            time.sleep(min(backoff_max, backoff_base * 2 ** (failures - 1)))
            continue
        failures = 0
        try:
            while True:
                if pending is not None:
                    ack = sess.call(pending)
                    if ack.kind == "Ack":
                        if not ack.payload.get("ok"):
                            log.warning("result rejected: %s", ack.payload.get("reason"))
                        pending = None
                        continue
                    raise FrameError(f"expected Ack, got {ack.kind}")
                reply = sess.call(RoundMessage("Poll"))
                if reply.kind == "Shutdown":
                    return 0
                if reply.kind == "NoWork":
                    time.sleep(poll_interval)
                    continue
                if reply.kind == "TrainTask":
                    pending = _run_task(worker, sess.client_id, reply)
                    continue
                if reply.kind == "AuthFail":
                    raise AuthenticationError(reply.payload.get("reason", "session rejected"))
                raise FrameError(f"unexpected reply {reply.kind}")
        except AuthenticationError:
            raise
        except (OSError, ConnectionError, FrameError) as e:
            log.info("connection lost (%s); reconnecting", e)
            failures += 1
            if failures >= max_attempts:
                raise ConnectionFailed(f"giving up after {failures} attempts: {e}") from e
            time.sleep(min(backoff_max, backoff_base * 2 ** (failures - 1)))
        finally:
            sess.close()


def _run_task(worker: ClientWorker, client_id, task: RoundMessage) -> RoundMessage:
    p = task.payload
    res = worker.run(p["job"], task.params)
    payload = {"job_id": p["job_id"], "round": p["round"], "client_id": client_id,
               "n_samples": res.n_samples, "train_loss": res.train_loss,
               "metrics": res.metrics, "info": res.info}
    return RoundMessage("TrainResult", payload=payload, params=res.params)


# --------------------------------------------------------------------------
# orchestrator-side transport


class TcpTransport:
    """Same ``execute`` contract as :class:`fedkd.federation.InProcessTransport`, over TCP."""

    def __init__(self, server: FederationServer, threads=()):
        self.server = server
        self.threads = list(threads)
        self.errors = []

    @property
    def client_ids(self) -> list:
        return self.server.client_ids

    @property
    def transcript(self) -> Transcript:
        return self.server.transcript

    def execute(self, job: dict, params, client_ids) -> dict:
        if self.errors:
            raise RuntimeError(f"client thread failed: {self.errors[0]!r}")
        return self.server.execute(job, params, client_ids)

    def close(self):
        self.server.shutdown_clients()
        for t in self.threads:
            t.join(timeout=30)
        self.server.close()

    @classmethod
    def loopback(cls, shards, *, secret_for=None, poll_interval: float = 0.01, pseudo_dirs=None, **server_kw):
        """Server on 127.0.0.1 plus one polling client thread per shard."""
        secret_for = secret_for or (lambda c: secrets.token_hex(16))
        roster, creds = make_roster([s.client_id for s in shards], secret_for)
        server = FederationServer(("127.0.0.1", 0), roster, **server_kw)
        tp = cls(server)
        for sh in shards:
            worker = ClientWorker(sh, pseudo_dir=(pseudo_dirs or {}).get(sh.client_id))

            def target(w=worker, c=creds[sh.client_id]):
                try:
                    client_poll_loop(server.address, c, w, poll_interval=poll_interval)
                except Exception as e:  # surfaced on the next execute()
                    tp.errors.append(e)

            t = threading.Thread(target=target, name=f"client-{sh.client_id}", daemon=True)
            t.start()
            tp.threads.append(t)
        return tp
