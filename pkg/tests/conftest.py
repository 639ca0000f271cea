import random

import pytest

from xcache.addressing import DagAddress, DagNode, Xid, XidType, dag_address


def random_dag(rng: random.Random, max_nodes: int = 8, intent_type: XidType | None = None) -> DagAddress:
    """A random valid address: nodes in topological order, the last one
    the sink, every node reachable from the source."""
    n = rng.randint(1, max_nodes)
    xids = []
    seen = set()
    for i in range(n):
        while True:
            value = rng.randbytes(20)
            if value not in seen:
                seen.add(value)
                break
        if i == n - 1 and intent_type is not None:
            xtype = intent_type
        else:
            xtype = rng.choice(list(XidType))
        xids.append(Xid(xtype, value))

    nodes = []
    for i in range(n - 1):
        later = list(range(i + 1, n))
        targets = rng.sample(later, rng.randint(1, min(len(later), 3)))
        nodes.append((xids[i], targets))
    nodes.append((xids[n - 1], []))

    source = rng.sample(range(n), rng.randint(1, n))
    reachable = set()
    stack = list(source)
    while stack:
        i = stack.pop()
        if i in reachable:
            continue
        reachable.add(i)
        stack.extend(nodes[i][1])
    for i in range(n):
        if i not in reachable:
            source.append(i)
            stack = [i]
            while stack:
                j = stack.pop()
                if j in reachable:
                    continue
                reachable.add(j)
                stack.extend(nodes[j][1])
    return dag_address(nodes, source)


def relabel(dag: DagAddress, order: list[int]) -> DagAddress:
    """Permute the node array so position k holds the node order[k]."""
    new_index = {old: k for k, old in enumerate(order)}
    nodes = tuple(
        DagNode(dag.nodes[old].xid, tuple(new_index[t] for t in dag.nodes[old].out_edges))
        for old in order
    )
    return DagAddress(
        nodes=nodes,
        source_edges=tuple(new_index[t] for t in dag.source_edges),
        intent=new_index[dag.intent],
    )


LINE3_TOPO = """
# client - router - pub
seed 42
node client cache=8
node router cache=8
node pub cache=8
link client router delay=5 loss=0.0
link router pub delay=5 loss=0.0
route client AD-pub router
route router AD-pub pub
route client AD-router router
route pub AD-router router
route pub AD-client router
route router AD-client client
"""

PAIR_TOPO = """
seed 7
node client cache=8
node pub cache=8
link client pub delay=5 loss=0.0
route client AD-pub pub
route pub AD-client client
"""


def make_cluster(topo: str, config=None, seed: int | None = None, **transport):
    """Build a simulator plus one daemon and one handle per node."""
    from xcache.daemon import DaemonConfig, Xcached
    from xcache.netsim import build_simulator

    sim = build_simulator(topo, seed=seed, **transport)
    config = config if config is not None else DaemonConfig(workers=2)
    daemons = {}
    handles = {}
    for name, node in sim.nodes.items():
        daemons[name] = Xcached(config, node=node)
        handles[name] = daemons[name].init_handle()
    return sim, daemons, handles


@pytest.fixture
def line3():
    sim, daemons, handles = make_cluster(LINE3_TOPO)
    yield sim, daemons, handles
    for daemon in daemons.values():
        daemon.shutdown()


@pytest.fixture
def pair():
    sim, daemons, handles = make_cluster(PAIR_TOPO)
    yield sim, daemons, handles
    for daemon in daemons.values():
        daemon.shutdown()


# Acceptance reporting: one pass/fail line per criterion, shown in the
# terminal summary.
ACCEPTANCE_RESULTS: list[tuple[int, str, str]] = []


def record_criterion(number: int, description: str):
    """Context manager recording a criterion outcome for the summary."""

    class _Recorder:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            ACCEPTANCE_RESULTS.append((number, status, description))
            return False

    return _Recorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    merged: dict[int, tuple[str, str]] = {}
    for number, status, description in ACCEPTANCE_RESULTS:
        if number not in merged or status == "FAIL":
            merged[number] = (status, description)
    terminalreporter.section("acceptance criteria")
    for number in sorted(merged):
        status, description = merged[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {description}")
