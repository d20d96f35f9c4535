import socket
import threading
import zlib

import numpy as np
import pytest

from fedcd.federation import (FederationConfig, LocalClient, MsgType, ProtocolError,
                              RoundMessage, aggregate_phi, aggregate_proxies,
                              aggregation_windows, broadcast_apply, init_client, run_dsfcd,
                              run_federated, select_clients, tcp_decode, tcp_encode,
                              vote_combine)
from fedcd.federation.protocol import HEADER
from fedcd.federation.tcp import MessageLog, join, run_over_loopback, serve
from fedcd.localsolver import SolverConfig, solve_local
from fedcd.numkit import DimensionError, RngStream
from fedcd.synthgen import ScenarioSpec, make_scenario

FAST = dict(it_in=60, it_fl=20, it_max=4)


def fast_cfg(**kw):
    solver = SolverConfig(**{**FAST, **kw.pop("solver", {})})
    return FederationConfig(solver=solver, **kw)


def small_data(m=2, d=3, n=80, seed=0, regime="IID"):
    _, ds = make_scenario(ScenarioSpec(d=d, m=m, n=n, seed=seed, regime=regime,
                                       function="MIM", k=1))
    return ds


def test_select_clients():
    s = RngStream(0)
    assert select_clients(5, 5, s).tolist() == [0, 1, 2, 3, 4]
    one = select_clients(10, 1, s)
    assert one.shape == (1,) and 0 <= one[0] < 10
    counts = np.zeros(4)
    for _ in range(10000):
        counts[select_clients(4, 2, s)] += 1
    assert np.all((counts / 10000 >= 0.48) & (counts / 10000 <= 0.52))
    for r in (0, 6):
        with pytest.raises(ValueError):
            select_clients(5, r, s)
    assert np.array_equal(select_clients(10, 3, RngStream(4)), select_clients(10, 3, RngStream(4)))


def test_aggregate_proxies():
    U = RngStream(1).gaussian((3, 3))
    assert np.array_equal(aggregate_proxies([U]), U)
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    b = np.array([[0.0, 3.0], [0.0, 0.0]])
    assert aggregate_proxies([a, b]).tolist() == [[0, 2], [0, 0]]
    for k in (2, 3, 7, 10):
        assert np.array_equal(aggregate_proxies([U] * k), U)
    with pytest.raises(ValueError):
        aggregate_proxies([])
    with pytest.raises(DimensionError):
        aggregate_proxies([a, np.zeros((3, 3))])


def test_broadcast_all_clients():
    cfg = fast_cfg(m=3)
    ds = small_data(m=3)
    clients = [init_client(k, X, cfg) for k, X in enumerate(ds)]
    for c in clients:
        c.U = RngStream(c.id).gaussian((3, 3))
    phis = [c.phi.flat().copy() for c in clients]
    U_new = RngStream(9).gaussian((3, 3))
    broadcast_apply(U_new, clients)
    assert max(np.max(np.abs(c.U - U_new)) for c in clients) == 0
    assert all(np.array_equal(c.phi.flat(), p) for c, p in zip(clients, phis))
    avg = aggregate_phi([c.phi for c in clients])
    broadcast_apply(U_new, clients, avg)
    assert all(np.array_equal(c.phi.flat(), clients[0].phi.flat()) for c in clients)
    assert np.allclose(avg.flat(), np.mean(phis, axis=0), atol=1e-15)
    with pytest.raises(DimensionError):
        broadcast_apply(np.zeros((2, 2)), clients)


def test_aggregation_windows():
    assert aggregation_windows(1000, 200) == [200] * 5
    assert aggregation_windows(1000, 300) == [300, 300, 300, 100]
    assert aggregation_windows(5, 5) == [5]
    for it_in, it_fl in ((1000, 200), (1000, 300), (7, 2), (10, 1)):
        assert len(aggregation_windows(it_in, it_fl)) == -(-it_in // it_fl)
        assert sum(aggregation_windows(it_in, it_fl)) == it_in


def test_config_validation():
    for bad in (dict(m=3, r=4), dict(m=3, r=0), dict(mode="XX"), dict(transport="udp"),
                dict(vote_quorum=0.0)):
        with pytest.raises(ValueError):
            fast_cfg(**bad).validate()


def test_run_counts_aggregations_and_equalizes_clients():
    ds = small_data(m=3)
    cfg = fast_cfg(m=3, r=2, seed=1)
    rep = run_dsfcd(ds, cfg)
    assert rep.aggregations == rep.outer_iters * 3
    assert len(rep.h_trace) == rep.outer_iters


def test_degenerate_federation_matches_local_solver():
    X = small_data(m=1)[0]
    cfg = fast_cfg(m=1, r=1, seed=5)
    fed = run_dsfcd([X], cfg)
    solver = cfg.solver.resolved(3, "DS")
    from dataclasses import replace
    local = solve_local(init_client(0, X, replace(cfg, solver=solver)), solver)
    assert fed.U.tobytes() == local.U.tobytes()
    assert fed.h_trace == local.h_trace
    assert np.array_equal(fed.adjacency, local.adjacency)


def test_same_seed_same_report():
    ds = small_data(m=2)
    a = run_dsfcd(ds, fast_cfg(m=2, seed=3))
    b = run_dsfcd(ds, fast_cfg(m=2, seed=3))
    assert a.to_json() == b.to_json() and a.digest() == b.digest()
    c = run_dsfcd(ds, fast_cfg(m=2, seed=4))
    assert c.digest() != a.digest()


def test_separate_mode_reports_per_client():
    ds = small_data(m=2, regime="NONIID", seed=2)
    rep = run_dsfcd(ds, fast_cfg(m=2, mode="SEPARATE"))
    assert len(rep.client_reports) == 2
    assert not np.array_equal(rep.client_reports[0].U, rep.client_reports[1].U)
    assert rep.aggregations == 0


def test_as_mode_shares_networks():
    ds = small_data(m=2)
    cfg = fast_cfg(m=2, mode="AS", seed=1)
    from dataclasses import replace
    cfg = replace(cfg, solver=cfg.solver.resolved(3, "AS"))
    clients = [init_client(k, X, cfg) for k, X in enumerate(ds)]
    handles = [LocalClient(c, cfg.solver) for c in clients]
    run_federated(handles, cfg, 3)
    assert np.array_equal(clients[0].phi.flat(), clients[1].phi.flat())
    assert np.array_equal(clients[0].U, clients[1].U)


def test_as_mode_starts_from_common_networks():
    ds = small_data(m=3)
    cfg = fast_cfg(m=3, mode="AS", seed=2)
    from dataclasses import replace
    from fedcd.mechanisms import mlp_init
    cfg = replace(cfg, solver=cfg.solver.resolved(3, "AS"))
    seen = []

    class Spy(LocalClient):
        def begin(self, alm):
            if alm.t == 1:
                seen.append(self.state.phi.flat().copy())
            super().begin(alm)

    clients = [init_client(k, X, cfg) for k, X in enumerate(ds)]
    run_federated([Spy(c, cfg.solver) for c in clients], cfg, 3)
    expected = mlp_init(3, RngStream(2).split(4)).flat()
    assert len(seen) == 3 and all(np.array_equal(p, expected) for p in seen)


def test_ds_mode_keeps_networks_private():
    ds = small_data(m=2)
    cfg = fast_cfg(m=2, mode="DS", seed=1)
    from dataclasses import replace
    cfg = replace(cfg, solver=cfg.solver.resolved(3, "DS"))
    clients = [init_client(k, X, cfg) for k, X in enumerate(ds)]
    run_federated([LocalClient(c, cfg.solver) for c in clients], cfg, 3)
    assert not np.array_equal(clients[0].phi.flat(), clients[1].phi.flat())
    assert np.array_equal(clients[0].U, clients[1].U)


def test_linear_mode_runs():
    from fedcd.synthgen import ScenarioSpec
    _, ds = make_scenario(ScenarioSpec(d=4, m=3, n=100, function="LINEAR", seed=1))
    rep = run_dsfcd(ds, fast_cfg(m=3, mode="LINEAR_AS", solver=dict(it_in=200, it_fl=50)))
    assert rep.adjacency.shape == (4, 4) and rep.outer_iters >= 1


def test_mismatched_datasets_rejected():
    with pytest.raises(DimensionError):
        run_dsfcd([np.zeros((5, 3)), np.zeros((5, 4))], fast_cfg(m=2))
    with pytest.raises(ValueError):
        run_dsfcd([np.zeros((5, 3))], fast_cfg(m=2))


def test_vote_combine():
    A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    assert np.array_equal(vote_combine([A, A, A]), A)
    B = np.zeros((3, 3), dtype=int)
    assert vote_combine([A, A, B])[0, 1] == 1
    assert vote_combine([A, B, B])[0, 1] == 0
    # supports 3 for 0->1 and 2 for 1->0 out of 4 clients, quorum 0.25
    fwd = np.array([[0, 1], [0, 0]])
    both = np.array([[0, 1], [1, 0]])
    out = vote_combine([fwd, both, both, np.zeros((2, 2))], quorum=0.25)
    assert out.tolist() == [[0, 1], [0, 0]]
    with pytest.raises(ValueError):
        vote_combine([A], quorum=0.0)


# --- wire format ---------------------------------------------------------

def test_encode_decode_round_trip():
    U = RngStream(0).gaussian((3, 3))
    msg = RoundMessage(MsgType.U_UPLOAD, outer_t=2, round=4, d=3, payload=U.ravel())
    back = tcp_decode(tcp_encode(msg))
    assert back == msg
    assert np.array_equal(back.matrix, U)


def test_payload_length_and_layout():
    msg = RoundMessage(MsgType.U_UPLOAD, d=2, payload=np.arange(4.0))
    frame = tcp_encode(msg)
    magic, version, mtype, _, _, d, plen = HEADER.unpack(frame[:HEADER.size])
    assert (magic, version, mtype, d, plen) == (0x46434431, 1, 2, 2, 32)
    assert frame[:4] == b"FCD1"
    body = frame[HEADER.size:HEADER.size + 32]
    assert np.array_equal(np.frombuffer(body, "<f8"), np.arange(4.0))
    assert int.from_bytes(frame[-4:], "big") == zlib.crc32(body)


def test_decode_errors_name_field():
    frame = bytearray(tcp_encode(RoundMessage(MsgType.U_BROADCAST, d=2, payload=np.ones(4))))
    bad = frame.copy()
    bad[HEADER.size + 3] ^= 0xFF
    with pytest.raises(ProtocolError) as e:
        tcp_decode(bytes(bad))
    assert e.value.field == "crc"
    bad = frame.copy()
    bad[0] = 0
    with pytest.raises(ProtocolError) as e:
        tcp_decode(bytes(bad))
    assert e.value.field == "magic"
    bad = frame.copy()
    bad[4] = 9
    with pytest.raises(ProtocolError) as e:
        tcp_decode(bytes(bad))
    assert e.value.field == "version"
    with pytest.raises(ProtocolError) as e:
        tcp_decode(bytes(frame[:-6]))
    assert e.value.field == "payload"
    with pytest.raises(ProtocolError) as e:
        tcp_decode(bytes(frame[:10]))
    assert e.value.field == "header"
    wrong = tcp_encode(RoundMessage(MsgType.U_UPLOAD, d=3, payload=np.ones(4)))
    with pytest.raises(ProtocolError) as e:
        tcp_decode(wrong)
    assert e.value.field == "payload_len"


# --- tcp transport -------------------------------------------------------

@pytest.mark.parametrize("mode", ["DS", "AS", "LINEAR_AS"])
def test_transport_equivalence_small(mode):
    ds = small_data(m=2, d=3, seed=3)
    cfg = fast_cfg(m=2, mode=mode, seed=7)
    a = run_dsfcd(ds, cfg)
    from dataclasses import replace
    b = run_dsfcd(ds, replace(cfg, transport="tcp"))
    assert a.U.tobytes() == b.U.tobytes()
    assert a.h_trace == b.h_trace
    assert np.array_equal(a.adjacency, b.adjacency)
    assert a.to_json() == b.to_json()


def test_tcp_audit_ds_mode():
    ds = small_data(m=2, d=3, n=50)
    cfg = fast_cfg(m=2, mode="DS", solver=dict(it_max=2))
    from dataclasses import replace
    cfg = replace(cfg, solver=cfg.solver.resolved(3, "DS"))
    wire = MessageLog()
    run_over_loopback(ds, cfg, wire)
    kinds = {t for _, _, t, _ in wire.entries}
    assert not kinds & {MsgType.PHI_UPLOAD, MsgType.PHI_BROADCAST}
    for _, t, size in wire.received():
        assert size in (0, 1, 9)
        assert size != 50 * 3 and size != 50


def _listener():
    sock = socket.create_server(("127.0.0.1", 0))
    return sock, sock.getsockname()[1]


def test_hello_wrong_dimension_rejected():
    listener, port = _listener()
    cfg = fast_cfg(m=1)
    result = {}

    def server():
        try:
            serve(cfg, 3, listener=listener)
        except Exception as exc:
            result["server"] = exc

    th = threading.Thread(target=server, daemon=True)
    th.start()
    with pytest.raises(ProtocolError):
        join(np.zeros((10, 4)), 0, cfg, "127.0.0.1", port)
    with pytest.raises(ProtocolError):
        join(np.zeros((10, 3)) + RngStream(0).gaussian((10, 3)), 5, cfg, "127.0.0.1", port)
    # a valid client still gets through afterwards
    U = join(RngStream(1).gaussian((30, 3)), 0, cfg, "127.0.0.1", port)
    th.join(timeout=60)
    assert U.shape == (3, 3) and "server" not in result
    listener.close()


def test_client_disconnect_names_client():
    listener, port = _listener()
    cfg = fast_cfg(m=1)
    box = {}

    def server():
        try:
            serve(cfg, 3, listener=listener)
        except ProtocolError as exc:
            box["err"] = exc

    th = threading.Thread(target=server, daemon=True)
    th.start()
    from fedcd.federation.protocol import recv_message, send_message
    with socket.create_connection(("127.0.0.1", port)) as s:
        send_message(s, RoundMessage(MsgType.HELLO, d=3, payload=[0.0]))
        assert recv_message(s).msg_type == MsgType.HELLO
        recv_message(s)   # first SCHEDULE, then vanish
    th.join(timeout=30)
    listener.close()
    assert "client 0" in str(box["err"])


def test_server_timeout():
    listener, port = _listener()
    cfg = fast_cfg(m=1, timeout=0.5)
    box = {}

    def server():
        try:
            serve(cfg, 3, listener=listener)
        except ProtocolError as exc:
            box["err"] = exc

    th = threading.Thread(target=server, daemon=True)
    th.start()
    from fedcd.federation.protocol import recv_message, send_message
    with socket.create_connection(("127.0.0.1", port)) as s:
        send_message(s, RoundMessage(MsgType.HELLO, d=3, payload=[0.0]))
        recv_message(s)
        th.join(timeout=30)
    listener.close()
    assert box["err"].field == "timeout"
