"""Typed principal identifiers and DAG network addresses with fallbacks.

A network address here is a small directed acyclic graph of typed,
fixed-width identifiers (XIDs).  Edge lists are priority ordered: a
forwarder tries the first edge it can use and falls back to later ones.
The unique sink of the graph is the *intent*, the principal the sender
ultimately wants to reach.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

XID_LEN = 20
MAX_DAG_NODES = 16

#: Traversal position meaning "no DAG node reached yet".
SOURCE = None


class AddressError(ValueError):
    """Malformed XID text or structurally invalid DAG address."""


class XidType(Enum):
    """Principal types the network can address.

    Closed enumeration: unknown tags are a parse error, never a default.
    """

    AD = "AD"
    HID = "HID"
    SID = "SID"
    CID = "CID"
    NCID = "nCID"

    @property
    def scheme(self) -> str:
        """Lowercase tag used as the URL scheme for this principal type."""
        return self.value.lower()

    @classmethod
    def from_tag(cls, tag: str) -> "XidType":
        for member in cls:
            if member.value == tag:
                return member
        raise AddressError(f"unknown principal type tag {tag!r}")

    @classmethod
    def from_scheme(cls, scheme: str) -> "XidType":
        for member in cls:
            if member.scheme == scheme:
                return member
        raise AddressError(f"unknown address scheme {scheme!r}")


ALL_XID_TYPES = frozenset(XidType)
CONTENT_TYPES = frozenset({XidType.CID, XidType.NCID})

_HEX_VALUE = re.compile(r"^[0-9a-f]{40}$")
_SHORT_LABEL = re.compile(r"^[A-Za-z0-9_.]{1,20}$")


@dataclass(frozen=True)
class Xid:
    """A typed 20-byte principal identifier.

    Equality is plain (type, value) byte equality.
    """

    xtype: XidType
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes):
            raise AddressError("XID value must be bytes")
        if len(self.value) != XID_LEN:
            raise AddressError(
                f"XID value must be exactly {XID_LEN} bytes, got {len(self.value)}"
            )

    def text(self, short: bool = False) -> str:
        return format_xid(self, short=short)

    def __repr__(self) -> str:
        return f"Xid({self.text(short=True)})"


def symbolic_xid(xtype: XidType | str, label: str) -> Xid:
    """Build an XID from a short symbolic label (test/fixture encoding).

    The label is NUL-padded to 20 bytes.  Restricted to [A-Za-z0-9_.],
    at most 20 characters.
    """
    if isinstance(xtype, str):
        xtype = XidType.from_tag(xtype)
    if not _SHORT_LABEL.match(label):
        raise AddressError(f"invalid symbolic XID label {label!r}")
    raw = label.encode("ascii")
    return Xid(xtype, raw + b"\x00" * (XID_LEN - len(raw)))


def parse_xid(text: str, allow_short: bool = False) -> Xid:
    """Parse ``<TYPE>-<value>`` XID text.

    The canonical value is 40 lowercase hex chars.  With ``allow_short``
    a short symbolic label (e.g. ``AD-B``) is accepted and NUL-padded;
    this encoding is meant for fixtures and hand-written configs.
    """
    sep = text.find("-")
    if sep < 0:
        raise AddressError(f"XID text missing type separator: {text!r}")
    xtype = XidType.from_tag(text[:sep])
    value = text[sep + 1 :]
    if _HEX_VALUE.match(value):
        return Xid(xtype, bytes.fromhex(value))
    if allow_short and _SHORT_LABEL.match(value):
        return symbolic_xid(xtype, value)
    raise AddressError(f"bad XID value {value!r} (want 40 lowercase hex chars)")


def _symbolic_label(value: bytes) -> str | None:
    stripped = value.rstrip(b"\x00")
    if not stripped or b"\x00" in stripped:
        return None
    try:
        label = stripped.decode("ascii")
    except UnicodeDecodeError:
        return None
    return label if _SHORT_LABEL.match(label) else None


def format_xid(xid: Xid, short: bool = False) -> str:
    """Render an XID as text; with ``short``, NUL-padded symbolic values
    render as their label instead of 40 hex chars."""
    if short:
        label = _symbolic_label(xid.value)
        if label is not None:
            return f"{xid.xtype.value}-{label}"
    return f"{xid.xtype.value}-{xid.value.hex()}"


@dataclass(frozen=True)
class DagNode:
    xid: Xid
    out_edges: tuple[int, ...] = ()


@dataclass(frozen=True)
class DagAddress:
    """A DAG of XIDs with priority-ordered edges.

    ``nodes`` excludes the implicit source; ``source_edges`` are the
    source's outgoing edges.  ``intent`` indexes the unique sink.
    """

    nodes: tuple[DagNode, ...]
    source_edges: tuple[int, ...]
    intent: int

    def intent_xid(self) -> Xid:
        return self.nodes[self.intent].xid

    def xids(self) -> tuple[Xid, ...]:
        return tuple(node.xid for node in self.nodes)


def dag_address(
    nodes: Sequence[DagNode | tuple[Xid, Sequence[int]]],
    source_edges: Sequence[int],
    intent: int | None = None,
) -> DagAddress:
    """Normalize, infer the intent if omitted, and validate."""
    normalized = []
    for node in nodes:
        if isinstance(node, DagNode):
            normalized.append(DagNode(node.xid, tuple(node.out_edges)))
        else:
            xid, edges = node
            normalized.append(DagNode(xid, tuple(edges)))
    if intent is None:
        sinks = [i for i, node in enumerate(normalized) if not node.out_edges]
        if len(sinks) != 1:
            raise AddressError(f"expected exactly one sink, found {len(sinks)}")
        intent = sinks[0]
    dag = DagAddress(tuple(normalized), tuple(source_edges), intent)
    validate_dag(dag)
    return dag


def validate_dag(dag: DagAddress) -> None:
    """Check every structural invariant; raise AddressError on the first
    violation."""
    n = len(dag.nodes)
    if n == 0:
        raise AddressError("address has no nodes")
    if n > MAX_DAG_NODES:
        raise AddressError(f"address has {n} nodes, maximum is {MAX_DAG_NODES}")
    if not dag.source_edges:
        raise AddressError("source has no outgoing edges")

    def check_edges(edges: tuple[int, ...], who: str) -> None:
        seen = set()
        for target in edges:
            if not 0 <= target < n:
                raise AddressError(f"{who}: edge target {target} out of range")
            if target in seen:
                raise AddressError(f"{who}: duplicate edge target {target}")
            seen.add(target)

    check_edges(dag.source_edges, "source")
    for i, node in enumerate(dag.nodes):
        check_edges(node.out_edges, f"node {i}")

    if not 0 <= dag.intent < n:
        raise AddressError(f"intent index {dag.intent} out of range")
    sinks = [i for i, node in enumerate(dag.nodes) if not node.out_edges]
    if sinks != [dag.intent]:
        raise AddressError(
            f"intent must be the unique sink (sinks={sinks}, intent={dag.intent})"
        )

    cycle_node = find_cycle(dag)
    if cycle_node is not None:
        raise AddressError(f"address graph has a cycle through node {cycle_node}")

    reached = set()
    stack = list(dag.source_edges)
    while stack:
        i = stack.pop()
        if i in reached:
            continue
        reached.add(i)
        stack.extend(dag.nodes[i].out_edges)
    if len(reached) != n:
        missing = sorted(set(range(n)) - reached)
        raise AddressError(f"nodes unreachable from source: {missing}")

    if len(set(dag.xids())) != n:
        raise AddressError("duplicate XIDs within the address")


def find_cycle(dag: DagAddress) -> int | None:
    """Return a node index on a cycle, or None if the graph is acyclic."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * len(dag.nodes)

    for root in range(len(dag.nodes)):
        if color[root] != WHITE:
            continue
        stack: list[tuple[int, int]] = [(root, 0)]
        color[root] = GREY
        while stack:
            node, edge_pos = stack[-1]
            edges = dag.nodes[node].out_edges
            if edge_pos == len(edges):
                color[node] = BLACK
                stack.pop()
                continue
            stack[-1] = (node, edge_pos + 1)
            target = edges[edge_pos]
            if color[target] == GREY:
                return target
            if color[target] == WHITE:
                color[target] = GREY
                stack.append((target, 0))
    return None


def make_fallback_dag(intent: Xid, fallback_path: Sequence[Xid]) -> DagAddress:
    """Build the standard two-route address: a direct edge to the intent
    plus a fallback chain that also terminates at the intent.

    The source's first (highest priority) edge goes straight to the
    intent; the second enters the fallback chain.
    """
    k = len(fallback_path)
    nodes: list[DagNode] = []
    for i, xid in enumerate(fallback_path):
        nxt = i + 1 if i + 1 < k else k
        nodes.append(DagNode(xid, (nxt,)))
    nodes.append(DagNode(intent, ()))
    source_edges = (k, 0) if k else (k,)
    return dag_address(nodes, source_edges, intent=k)


def canonical_numbering(dag: DagAddress) -> list[int]:
    """Deterministic numbering of the nodes, as used on the wire.

    Rule: depth-first traversal from the source, visiting each node's
    out-edges in reverse priority order, assigning numbers in first-visit
    order.  Returns node indices in numbering order (position k holds the
    index of the node numbered k).  In a plain fallback-chain address the
    intent always receives the highest number.
    """
    order: list[int] = []
    seen: set[int] = set()

    def visit(edges: tuple[int, ...]) -> None:
        for target in reversed(edges):
            if target not in seen:
                seen.add(target)
                order.append(target)
                visit(dag.nodes[target].out_edges)

    visit(dag.source_edges)
    return order


class RouteTable:
    """Per-node forwarding state: at most one next hop per XID, plus the
    set of XIDs deliverable on this node.

    Mutation is confined to the owning simulated node; reads are safe
    from anywhere.
    """

    def __init__(self) -> None:
        self._next_hop: dict[Xid, str] = {}
        self._local: set[Xid] = set()

    def add_route(self, xid: Xid, next_hop: str) -> None:
        self._next_hop[xid] = next_hop

    def remove_route(self, xid: Xid) -> None:
        self._next_hop.pop(xid, None)

    def next_hop(self, xid: Xid) -> str | None:
        return self._next_hop.get(xid)

    def add_local(self, xid: Xid) -> None:
        self._local.add(xid)

    def remove_local(self, xid: Xid) -> None:
        self._local.discard(xid)

    def is_local(self, xid: Xid) -> bool:
        return xid in self._local

    def locals(self) -> frozenset[Xid]:
        return frozenset(self._local)


@dataclass(frozen=True)
class DeliverLocal:
    """The intent is deliverable on this node."""

    node: int


@dataclass(frozen=True)
class Forward:
    """Hand the segment to ``next_hop``; ``position`` is the traversal
    position after advancing through any locally-held intermediate nodes,
    and ``via`` is the edge target being pursued."""

    next_hop: str
    position: int | None
    via: int


@dataclass(frozen=True)
class Unroutable:
    """No usable edge; a value, not a fault."""


Decision = DeliverLocal | Forward | Unroutable


def resolve_next(
    dag: DagAddress,
    understood: Iterable[XidType],
    routes: RouteTable,
    position: int | None = SOURCE,
) -> Decision:
    """One forwarding decision at a node.

    Edges from the current position are tried in priority order.  An edge
    is usable iff its target's type is understood and the target is
    either deliverable locally or has a next hop.  The first usable edge
    wins.  A locally-held intermediate target advances the position and
    the scan restarts from there; there is no lookahead past unusable
    targets and no backtracking.
    """
    understood = frozenset(understood)
    pos = position
    while True:
        edges = dag.source_edges if pos is SOURCE else dag.nodes[pos].out_edges
        chosen: tuple[str, int, str | None] | None = None
        for target in edges:
            node = dag.nodes[target]
            if node.xid.xtype not in understood:
                continue
            if routes.is_local(node.xid):
                chosen = ("local", target, None)
                break
            hop = routes.next_hop(node.xid)
            if hop is not None:
                chosen = ("forward", target, hop)
                break
        if chosen is None:
            return Unroutable()
        kind, target, hop = chosen
        if kind == "forward":
            assert hop is not None
            return Forward(next_hop=hop, position=pos, via=target)
        if target == dag.intent:
            return DeliverLocal(node=target)
        pos = target
