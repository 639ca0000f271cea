import hashlib
import random
import threading

import pytest

from conftest import LINE3_TOPO, PAIR_TOPO
from xcache.addressing import XidType, make_fallback_dag, symbolic_xid
from xcache.chunking import compute_cid
from xcache.netsim import (
    HandshakeTimeout,
    NoRouteError,
    SegFlags,
    Segment,
    SimStalledError,
    Simulator,
    TopologyError,
    build_simulator,
    parse_topology,
)

PAIR_LOSSY = """
node client
node pub
link client pub delay=2 loss=0.1
route client AD-pub pub
route pub AD-client client
"""


def serve_bytes(node, payload: bytes):
    """Bind a chunk of raw bytes on the node's server socket."""
    cid = compute_cid(payload)
    node.server_socket.handler = lambda session, xid: session.start_send(payload)
    node.server_socket.bind(cid)
    return node.local_dag_for(cid)


class TestTopologyConfig:
    def test_parses_all_directives(self):
        directives = parse_topology(LINE3_TOPO)
        kinds = [d[0] for d in directives]
        assert kinds.count("node") == 3
        assert kinds.count("link") == 2
        assert kinds.count("seed") == 1

    def test_seed_line_used(self):
        sim = build_simulator("seed 99\nnode a\n")
        assert sim.seed == 99

    def test_seed_override_wins(self):
        sim = build_simulator("seed 99\nnode a\n", seed=5)
        assert sim.seed == 5

    def test_unknown_directive(self):
        with pytest.raises(TopologyError, match="line 1"):
            build_simulator("frobnicate a b\n")

    def test_link_to_unknown_node(self):
        with pytest.raises(TopologyError):
            build_simulator("node a\nlink a b delay=1 loss=0\n")

    def test_duplicate_node(self):
        with pytest.raises(TopologyError):
            build_simulator("node a\nnode a\n")

    def test_loss_out_of_range(self):
        with pytest.raises(TopologyError):
            build_simulator("node a\nnode b\nlink a b delay=1 loss=1.5\n")

    def test_route_with_unknown_next_hop(self):
        with pytest.raises(TopologyError):
            build_simulator("node a\nroute a AD-x b\n")

    def test_comments_and_cache_option(self):
        sim = build_simulator("# hi\nnode a cache=3  # trailing\n")
        assert sim.node_opts["a"]["cache"] == 3


class TestEventEngine:
    def test_step_on_empty_queue(self):
        sim = Simulator()
        assert sim.step(100) == []
        assert sim.now == 100

    def test_equal_time_events_run_in_insertion_order(self):
        sim = Simulator()
        ran = []
        sim.schedule(5, lambda: ran.append("first"))
        sim.schedule(5, lambda: ran.append("second"))
        sim.step()
        assert ran == ["first", "second"]

    def test_step_until_boundary(self):
        sim = build_simulator(PAIR_TOPO)
        seg = Segment(
            session=b"s" * 8,
            seq=0,
            flags=SegFlags.NONE,
            src_dag=make_fallback_dag(sim.nodes["client"].ad, []),
            dst_dag=make_fallback_dag(sim.nodes["pub"].ad, []),
        )
        sim.submit(lambda: sim.nodes["client"].on_segment(seg))
        assert sim.step(4) == []  # link delay is 5
        delivered = sim.step(5)
        assert len(delivered) == 1
        assert sim.nodes["pub"].inbox == [seg]

    def test_identical_seeds_identical_traces(self):
        def run(seed):
            sim = build_simulator(PAIR_LOSSY, seed=seed)
            payload = bytes(1000)
            dag = serve_bytes(sim.nodes["pub"], payload)
            session = sim.nodes["client"].connect_to_content(dag)
            assert session.recv_chunk() == payload
            return list(sim.trace)

        assert run(7) == run(7)
        assert run(7) != run(8)

    def test_wait_for_stalls_cleanly(self):
        sim = Simulator()
        with pytest.raises(SimStalledError):
            sim.wait_for(lambda: False, idle_timeout=0.2)


class TestConnect:
    def test_session_terminates_at_publisher(self):
        sim = build_simulator(LINE3_TOPO)
        payload = b"from the origin"
        dag = serve_bytes(sim.nodes["pub"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.provider_name == "pub"
        assert session.syn_hops == 2
        assert session.recv_chunk() == payload
        assert sim.nodes["pub"].counters["sessions_served"] == 1

    def test_session_terminates_at_cache(self):
        sim = build_simulator(LINE3_TOPO)
        payload = b"cached copy"
        serve_bytes(sim.nodes["pub"], payload)
        dag = serve_bytes(sim.nodes["router"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.provider_name == "router"
        assert session.syn_hops == 1
        assert session.recv_chunk() == payload
        assert sim.nodes["pub"].counters["sessions_served"] == 0

    def test_no_route_fails_immediately(self):
        sim = build_simulator(PAIR_TOPO)
        stranger = make_fallback_dag(symbolic_xid(XidType.CID, "ghost"), [])
        with pytest.raises(NoRouteError):
            sim.nodes["client"].connect_to_content(stranger)

    def test_black_hole_times_out(self):
        sim = build_simulator(LINE3_TOPO, max_retries=3)
        cid = compute_cid(b"nowhere")
        sim.add_route("client", cid, "router")  # router has no idea
        dag = make_fallback_dag(cid, [])
        with pytest.raises(HandshakeTimeout):
            sim.nodes["client"].connect_to_content(dag)

    def test_only_content_intents_connect(self):
        sim = build_simulator(PAIR_TOPO)
        host_dag = make_fallback_dag(sim.nodes["pub"].hid, [])
        with pytest.raises(Exception, match="content"):
            sim.nodes["client"].connect_to_content(host_dag)


class TestAcceptAs:
    def _pair_with_two_chunks(self):
        sim = build_simulator(PAIR_TOPO)
        pub = sim.nodes["pub"]
        payloads = {}
        dags = {}
        for text in (b"chunk CCC", b"chunk DDD"):
            cid = compute_cid(text)
            payloads[cid] = text
            pub.server_socket.bind(cid)
            dags[cid] = pub.local_dag_for(cid)
        return sim, pub, payloads, dags

    @pytest.mark.parametrize("reverse", [False, True])
    def test_two_concurrent_requests_pair_correctly(self, reverse):
        sim, pub, payloads, dags = self._pair_with_two_chunks()
        order = list(dags)
        if reverse:
            order.reverse()

        # both requests in flight before either accept
        clients = {cid: sim.nodes["client"].start_connect(dags[cid]) for cid in order}

        served = []
        for _ in range(2):
            session, xid = pub.server_socket.accept_as()
            served.append(xid)
            session.send_chunk(payloads[xid])
        assert served == order  # FIFO pairing, in arrival order
        for cid in order:
            assert clients[cid].recv_chunk() == payloads[cid]

    def test_accept_returns_requested_xid(self):
        sim, pub, payloads, dags = self._pair_with_two_chunks()
        target = list(dags)[1]
        client = sim.nodes["client"].start_connect(dags[target])
        session, xid = pub.server_socket.accept_as()
        assert xid == target
        session.send_chunk(payloads[xid])
        assert client.recv_chunk() == payloads[target]

    def test_accept_registered_before_request_arrives(self):
        sim, pub, payloads, dags = self._pair_with_two_chunks()
        target = list(dags)[0]
        got = []

        def server():
            session, xid = pub.server_socket.accept_as()
            got.append(xid)
            session.send_chunk(payloads[xid])

        thread = threading.Thread(target=server, daemon=True)
        thread.start()
        # give the acceptor time to register; the handshake then runs
        # inline inside the client's own event pumping
        import time

        time.sleep(0.2)
        session = sim.nodes["client"].connect_to_content(dags[target])
        assert session.recv_chunk() == payloads[target]
        thread.join(timeout=5)
        assert got == [target]

    def test_syn_for_unbound_content_not_delivered(self):
        sim = build_simulator(PAIR_TOPO, max_retries=2)
        pub = sim.nodes["pub"]
        pub.server_socket.bind(compute_cid(b"something"))
        ghost = compute_cid(b"not bound")
        dag = pub.local_dag_for(ghost)
        with pytest.raises(HandshakeTimeout):
            sim.nodes["client"].connect_to_content(dag)
        assert not pub.server_socket.pending


class TestTransfer:
    def test_64k_lossless_segment_count(self):
        sim = build_simulator(PAIR_TOPO)
        payload = random.Random(1).randbytes(64 * 1024)
        dag = serve_bytes(sim.nodes["pub"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.recv_chunk() == payload
        assert session.rx_segments == 64  # ceil(64KiB / 1KiB)
        assert sim.stats["retransmits"] == 0

    def test_empty_payload_fin_only(self):
        sim = build_simulator(PAIR_TOPO)
        dag = serve_bytes(sim.nodes["pub"], b"")
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.recv_chunk() == b""
        assert session.rx_segments == 0

    def test_custom_segment_size(self):
        sim = build_simulator(PAIR_TOPO, segment_payload=100)
        payload = bytes(950)
        dag = serve_bytes(sim.nodes["pub"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.recv_chunk() == payload
        assert session.rx_segments == 10

    def test_lossy_delivery_seeded_trials(self):
        total_retransmits = 0
        for seed in range(20):
            sim = build_simulator(PAIR_LOSSY, seed=seed)
            payload = random.Random(seed).randbytes(64 * 1024)
            dag = serve_bytes(sim.nodes["pub"], payload)
            session = sim.nodes["client"].connect_to_content(dag)
            received = session.recv_chunk()
            assert hashlib.sha256(received).digest() == hashlib.sha256(payload).digest()
            total_retransmits += sim.stats["retransmits"]
        assert total_retransmits > 0

    def test_heavy_loss_with_raised_retry_cap(self):
        topo = PAIR_LOSSY.replace("loss=0.1", "loss=0.3")
        sim = build_simulator(topo, seed=3, max_retries=64)
        payload = random.Random(3).randbytes(16 * 1024)
        dag = serve_bytes(sim.nodes["pub"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.recv_chunk() == payload


class TestRawCapture:
    def test_router_sees_content_session_segments(self):
        sim = build_simulator(LINE3_TOPO)
        captured = []
        sim.nodes["router"].subscribe_capture(captured.append)
        payload = bytes(3000)
        dag = serve_bytes(sim.nodes["pub"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        session.recv_chunk()
        flags = {int(seg.flags) for seg in captured}
        assert int(SegFlags.SYN) in flags
        assert int(SegFlags.SYNACK) in flags
        assert int(SegFlags.NONE) in flags
        assert int(SegFlags.FIN) in flags
        data_seqs = {seg.seq for seg in captured if seg.flags == SegFlags.NONE}
        assert data_seqs == {0, 1, 2}

    def test_host_traffic_not_captured(self):
        sim = build_simulator(LINE3_TOPO)
        captured = []
        sim.nodes["router"].subscribe_capture(captured.append)
        seg = Segment(
            session=b"h" * 8,
            seq=0,
            flags=SegFlags.NONE,
            src_dag=make_fallback_dag(sim.nodes["client"].ad, []),
            dst_dag=make_fallback_dag(sim.nodes["pub"].ad, []),
        )
        sim.submit(lambda: sim.nodes["client"].on_segment(seg))
        sim.step()
        assert sim.nodes["pub"].inbox == [seg]
        assert captured == []

    def test_capture_is_transparent(self):
        def run(subscribe):
            sim = build_simulator(LINE3_TOPO, seed=11)
            if subscribe:
                sim.nodes["router"].subscribe_capture(lambda seg: None)
            payload = bytes(5000)
            dag = serve_bytes(sim.nodes["pub"], payload)
            session = sim.nodes["client"].connect_to_content(dag)
            session.recv_chunk()
            return list(sim.trace)

        assert run(False) == run(True)

    def test_capture_complete_under_loss_with_duplicates(self):
        # the tap on a transit node sees every sequence number the
        # receiver ends up with, retransmitted duplicates included
        topo = """
        node client
        node router
        node pub
        link client router delay=2 loss=0.08
        link router pub delay=2 loss=0.08
        route client AD-pub router
        route router AD-pub pub
        route pub AD-client router
        route router AD-client client
        """
        sim = build_simulator(topo, seed=5)
        captured = []
        sim.nodes["router"].subscribe_capture(captured.append)
        payload = random.Random(5).randbytes(32 * 1024)
        dag = serve_bytes(sim.nodes["pub"], payload)
        session = sim.nodes["client"].connect_to_content(dag)
        assert session.recv_chunk() == payload
        data = [seg for seg in captured if seg.flags == SegFlags.NONE]
        assert {seg.seq for seg in data} == set(range(32))
        reassembled = {}
        for seg in data:
            reassembled.setdefault(seg.seq, seg.payload)
        assert b"".join(reassembled[i] for i in range(32)) == payload


class TestHandshakeDuality:
    def test_syn_is_the_only_request_shape(self):
        sim = build_simulator(LINE3_TOPO)
        dag = serve_bytes(sim.nodes["pub"], bytes(2048))
        session = sim.nodes["client"].connect_to_content(dag)
        session.recv_chunk()
        for record in sim.trace:
            kind, flags, intent = record[0], record[6], record[8]
            if kind == "drop":
                continue
            if flags & int(SegFlags.SYN):
                assert intent is not None  # the SYN carries the request
            else:
                assert intent is None  # nothing else resembles a request
