"""TCP transport: the server drives the same loop as the in-process engine.

Conversation, all frames in :mod:`fedcd.federation.protocol` format::

    client -> HELLO [client_id]          server -> HELLO [m] or REJECT
    server -> SCHEDULE [alpha, rho, steps, reset]   (client trains, no reply)
    server -> U_UPLOAD []                client -> U_UPLOAD [U]
    server -> PHI_UPLOAD []              client -> PHI_UPLOAD [phi]   (AS only)
    server -> U_BROADCAST [U]  /  PHI_BROADCAST [phi]
    server -> SCHEDULE [alpha, rho, 0, 0]   client -> SCHEDULE [score]
    server -> DONE [U]

Only graph matrices, network weights and scalar scores leave a client.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from fedcd.federation.engine import (FederationConfig, LocalClient, _check_datasets,
                                     init_client, run_federated)
from fedcd.federation.protocol import (MsgType, ProtocolError, RoundMessage, recv_message,
                                       send_message)
from fedcd.localsolver import AlmState, DivergenceError
from fedcd.mechanisms import MlpStack
from fedcd.report import RunReport

log = logging.getLogger(__name__)


@dataclass
class MessageLog:
    """What crossed the wire, as seen by the server."""

    entries: list[tuple[str, int, MsgType, int]] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, direction: str, client: int, msg: RoundMessage) -> None:
        with self.lock:
            self.entries.append((direction, client, msg.msg_type, msg.payload.size))

    def received(self) -> list[tuple[int, MsgType, int]]:
        return [(c, t, k) for dirn, c, t, k in self.entries if dirn == "in"]


class RemoteClient:
    """Server-side handle that forwards the engine calls over a socket."""

    def __init__(self, sock: socket.socket, client_id: int, d: int, mode: str, wire: MessageLog):
        self.sock = sock
        self.id = client_id
        self.d = d
        self.mode = mode
        self.wire = wire
        self.alm: AlmState | None = None
        self.fresh = False
        self.round = 0
        self._phi_template: MlpStack | None = None

    def _send(self, mtype: MsgType, payload=()) -> None:
        msg = RoundMessage(mtype, self.alm.t if self.alm else 0, self.round, self.d,
                           np.asarray(payload, dtype=np.float64))
        self.wire.add("out", self.id, msg)
        try:
            send_message(self.sock, msg)
        except OSError as exc:
            raise ProtocolError("connection", f"client {self.id}: {exc}") from exc

    def _recv(self, expect: MsgType) -> RoundMessage:
        try:
            msg = recv_message(self.sock)
        except socket.timeout:
            raise ProtocolError("timeout", f"client {self.id} did not answer") from None
        except ProtocolError as exc:
            raise ProtocolError(exc.field, f"client {self.id}: {exc}") from None
        except OSError as exc:
            raise ProtocolError("connection", f"client {self.id}: {exc}") from exc
        self.wire.add("in", self.id, msg)
        if msg.msg_type == MsgType.REJECT:
            step = int(msg.payload[0]) if msg.payload.size else -1
            raise DivergenceError(step, self.id)
        if msg.msg_type != expect:
            raise ProtocolError("msg_type", f"client {self.id} sent {msg.msg_type.name}, "
                                f"expected {expect.name}")
        return msg

    def begin(self, alm: AlmState) -> None:
        self.alm = alm
        self.fresh = True
        self.round = 0

    def run(self, steps: int) -> None:
        self._send(MsgType.SCHEDULE, [self.alm.alpha, self.alm.rho, steps, float(self.fresh)])
        self.fresh = False

    def get_U(self) -> np.ndarray:
        self._send(MsgType.U_UPLOAD)
        msg = self._recv(MsgType.U_UPLOAD)
        if msg.payload.size != self.d * self.d:
            raise ProtocolError("payload_len", f"client {self.id} sent an empty matrix")
        return msg.matrix.copy()

    def set_U(self, U: np.ndarray) -> None:
        self.round += 1
        self._send(MsgType.U_BROADCAST, U.ravel())

    def get_phi(self) -> MlpStack:
        self._send(MsgType.PHI_UPLOAD)
        msg = self._recv(MsgType.PHI_UPLOAD)
        try:
            return MlpStack.from_flat(self.d, msg.payload)
        except Exception as exc:
            raise ProtocolError("payload_len", f"client {self.id}: {exc}") from None

    def set_phi(self, phi: MlpStack) -> None:
        self._send(MsgType.PHI_BROADCAST, phi.flat())

    def finish(self) -> float:
        self._send(MsgType.SCHEDULE, [self.alm.alpha, self.alm.rho, 0, 0])
        msg = self._recv(MsgType.SCHEDULE)
        if msg.payload.size != 1:
            raise ProtocolError("payload_len", f"client {self.id} score reply")
        return float(msg.payload[0])

    def done(self, U: np.ndarray) -> None:
        self._send(MsgType.DONE, U.ravel())


def _handshake(sock: socket.socket, d: int, m: int, seen: set, wire: MessageLog) -> int | None:
    """Validate a HELLO; answer with HELLO or REJECT. Returns the client id or None."""
    try:
        msg = recv_message(sock)
    except (ProtocolError, OSError) as exc:
        log.warning("dropping connection during handshake: %s", exc)
        return None
    cid = int(msg.payload[0]) if msg.payload.size == 1 else -1
    wire.add("in", cid, msg)
    problem = None
    if msg.msg_type != MsgType.HELLO:
        problem = f"expected HELLO, got {msg.msg_type.name}"
    elif msg.d != d:
        problem = f"client has d={msg.d}, server expects {d}"
    elif not 0 <= cid < m:
        problem = f"client id {cid} outside [0, {m})"
    elif cid in seen:
        problem = f"duplicate client id {cid}"
    if problem:
        log.warning("rejecting client: %s", problem)
        try:
            send_message(sock, RoundMessage(MsgType.REJECT, d=d))
        except OSError:
            pass
        return None
    send_message(sock, RoundMessage(MsgType.HELLO, d=d, payload=[float(m)]))
    return cid


def serve(fcfg: FederationConfig, d: int, listener: socket.socket | None = None,
          wire: MessageLog | None = None) -> RunReport:
    """Accept ``m`` clients, run the federated solve, send DONE and close."""
    fcfg.validate()
    fcfg = replace(fcfg, solver=fcfg.solver.resolved(d, fcfg.mode))
    wire = wire if wire is not None else MessageLog()
    own = listener is None
    if own:
        listener = socket.create_server((fcfg.host, fcfg.port))
    handles: dict[int, RemoteClient] = {}
    try:
        while len(handles) < fcfg.m:
            conn, _ = listener.accept()
            conn.settimeout(fcfg.timeout)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            cid = _handshake(conn, d, fcfg.m, set(handles), wire)
            if cid is None:
                conn.close()
                continue
            handles[cid] = RemoteClient(conn, cid, d, fcfg.mode, wire)
            log.info("client %d joined (%d/%d)", cid, len(handles), fcfg.m)
        ordered = [handles[k] for k in range(fcfg.m)]
        report = run_federated(ordered, fcfg, d)
        for hd in ordered:
            hd.done(report.U)
        return report
    finally:
        for hd in handles.values():
            hd.sock.close()
        if own:
            listener.close()


def join(data: np.ndarray, client_id: int, fcfg: FederationConfig,
         host: str | None = None, port: int | None = None) -> np.ndarray:
    """Client side: connect, train on private ``data`` when told to, return the final matrix."""
    d = _check_datasets([data])
    fcfg = replace(fcfg, solver=fcfg.solver.resolved(d, fcfg.mode))
    state = init_client(client_id, data, fcfg)
    local = LocalClient(state, fcfg.solver, fcfg.reset_u_adam_on_broadcast)
    addr = (host or fcfg.host, fcfg.port if port is None else port)
    with socket.create_connection(addr, timeout=fcfg.timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        send_message(sock, RoundMessage(MsgType.HELLO, d=d, payload=[float(client_id)]))
        reply = recv_message(sock)
        if reply.msg_type != MsgType.HELLO:
            raise ProtocolError("msg_type", f"server refused client {client_id}")
        return _client_loop(sock, local, d)


def _client_loop(sock: socket.socket, local: LocalClient, d: int) -> np.ndarray:
    while True:
        msg = recv_message(sock)
        t = msg.msg_type
        if t == MsgType.SCHEDULE:
            alpha, rho, steps, reset = msg.payload
            if steps == 0:
                score = local.finish()
                send_message(sock, RoundMessage(MsgType.SCHEDULE, msg.outer_t, msg.round, d,
                                                [score]))
                continue
            if reset:
                local.begin(AlmState(alpha, rho, t=msg.outer_t))
            try:
                local.run(int(steps))
            except DivergenceError as exc:
                send_message(sock, RoundMessage(MsgType.REJECT, msg.outer_t, msg.round, d,
                                                [float(exc.step)]))
                raise
        elif t == MsgType.U_UPLOAD:
            send_message(sock, RoundMessage(MsgType.U_UPLOAD, msg.outer_t, msg.round, d,
                                            local.get_U().ravel()))
        elif t == MsgType.PHI_UPLOAD:
            send_message(sock, RoundMessage(MsgType.PHI_UPLOAD, msg.outer_t, msg.round, d,
                                            local.get_phi().flat()))
        elif t == MsgType.U_BROADCAST:
            local.set_U(msg.matrix)
        elif t == MsgType.PHI_BROADCAST:
            local.set_phi(MlpStack.from_flat(d, msg.payload))
        elif t == MsgType.DONE:
            return msg.matrix.copy()
        else:
            raise ProtocolError("msg_type", f"unexpected {t.name} from server")


def run_over_loopback(datasets: list[np.ndarray], fcfg: FederationConfig,
                      wire: MessageLog | None = None) -> RunReport:
    """Server plus ``m`` client threads on 127.0.0.1; numerically equal to the inproc run."""
    d = _check_datasets(datasets)
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]
    errors: list[BaseException] = []

    def client(k):
        try:
            join(datasets[k], k, fcfg, "127.0.0.1", port)
        except BaseException as exc:   # surfaced by the server side as well
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(k,), daemon=True)
               for k in range(len(datasets))]
    for th in threads:
        th.start()
    try:
        report = serve(fcfg, d, listener=listener, wire=wire)
    finally:
        listener.close()
        for th in threads:
            th.join(timeout=5)
    return report
