"""Desk-scale content delivery stack.

Addresses are DAGs of typed identifiers with priority-ordered fallback
edges.  Content is published and fetched as verified chunks through a
cache daemon; a simulated network carries them over a reliable
transport while on-path nodes cache opportunistically.  URL schemes
serialize any address and name multiform resources directly.
"""

from .addressing import (
    AddressError,
    DagAddress,
    DagNode,
    RouteTable,
    Xid,
    XidType,
    canonical_numbering,
    make_fallback_dag,
    parse_xid,
    resolve_next,
    symbolic_xid,
)
from .chunking import (
    Chunk,
    ChunkError,
    PublisherKey,
    build_cid_chunk,
    build_ncid_chunk,
    compute_cid,
    compute_ncid,
    decode_chunk,
    encode_chunk,
    fingerprint,
    sign_named,
    verify_cid,
    verify_ncid,
)
from .daemon import DaemonConfig, NotifEvent, Xcached, XcacheHandle
from .netsim import Simulator, build_simulator
from .store import StorageManager
from .urls import (
    NcidUrl,
    UrlParseError,
    canonical_name,
    parse_dag_url,
    parse_ncid_url,
    serialize_dag_url,
    serialize_ncid_url,
)

__all__ = [
    "AddressError",
    "Chunk",
    "ChunkError",
    "DaemonConfig",
    "DagAddress",
    "DagNode",
    "NcidUrl",
    "NotifEvent",
    "PublisherKey",
    "RouteTable",
    "Simulator",
    "StorageManager",
    "UrlParseError",
    "Xcached",
    "XcacheHandle",
    "Xid",
    "XidType",
    "build_cid_chunk",
    "build_ncid_chunk",
    "build_simulator",
    "canonical_name",
    "canonical_numbering",
    "compute_cid",
    "compute_ncid",
    "decode_chunk",
    "encode_chunk",
    "fingerprint",
    "make_fallback_dag",
    "parse_dag_url",
    "parse_ncid_url",
    "parse_xid",
    "resolve_next",
    "serialize_dag_url",
    "serialize_ncid_url",
    "sign_named",
    "symbolic_xid",
    "verify_cid",
    "verify_ncid",
]
