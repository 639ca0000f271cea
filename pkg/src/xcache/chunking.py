"""Content chunks and their cryptography.

Two kinds of chunk exist.  A plain content chunk is self-certifying: its
identifier is the truncated hash of the payload, so anyone holding the
bytes can check them.  A named chunk binds a human-readable name to a
publisher: its identifier hashes the name together with the publisher's
public-key fingerprint, and a detached signature over (name, payload)
binds the name to the content.  Verifying a named chunk is a two-step
process that needs exactly one extra chunk (the public key), so caches
can gate on it at constant cost regardless of application trust models.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .addressing import XID_LEN, DagAddress, Xid, XidType
from .urls import parse_dag_url, serialize_dag_url

DEFAULT_MAX_PAYLOAD = 1 << 20  # 1 MiB; desk-scale bound, configurable per call
MAX_TTL_MS = (1 << 32) - 1

CHUNK_MAGIC = b"\x58\x43\x48\x4b"
CHUNK_VERSION = 1

_TYPE_CODES = {
    XidType.AD: 1,
    XidType.HID: 2,
    XidType.SID: 3,
    XidType.CID: 4,
    XidType.NCID: 5,
}
_CODE_TYPES = {code: t for t, code in _TYPE_CODES.items()}

REASON_HASH = "hash-mismatch"
REASON_KEY = "key-chunk-invalid"
REASON_NCID = "ncid-mismatch"
REASON_SIG = "signature-invalid"


class ChunkError(ValueError):
    """Invalid chunk construction or field values."""


class ChunkDecodeError(ChunkError):
    """Wire decode failure; ``kind`` is one of short, magic, version,
    id-type, overflow, trailing, invalid."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def content_hash(data: bytes) -> bytes:
    """First 20 bytes of SHA-256."""
    return hashlib.sha256(data).digest()[:XID_LEN]


def frame(data: bytes) -> bytes:
    """Length-prefix a variable field so concatenated hash inputs cannot
    collide across field boundaries."""
    return struct.pack(">I", len(data)) + data


def compute_cid(payload: bytes) -> Xid:
    return Xid(XidType.CID, content_hash(payload))


def fingerprint(public_key_bytes: bytes) -> bytes:
    """20-byte fingerprint of a public key's raw encoding."""
    return content_hash(public_key_bytes)


def compute_ncid(name: str, fp: bytes) -> Xid:
    """Identifier of named content: hash of the framed name plus the
    publisher's key fingerprint."""
    if not name:
        raise ChunkError("named content requires a non-empty name")
    if len(fp) != XID_LEN:
        raise ChunkError(f"fingerprint must be {XID_LEN} bytes")
    return Xid(XidType.NCID, content_hash(frame(name.encode("utf-8")) + fp))


@dataclass(frozen=True)
class PublisherKey:
    """An Ed25519 keypair; the private half stays on the publisher side."""

    public: bytes
    private: bytes | None = None

    @classmethod
    def generate(cls, rng=None) -> "PublisherKey":
        """New keypair; pass a seeded ``random.Random`` for deterministic
        test/scenario keys."""
        if rng is None:
            key = Ed25519PrivateKey.generate()
        else:
            key = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        priv = key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        pub = key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(public=pub, private=priv)

    def public_only(self) -> "PublisherKey":
        return PublisherKey(public=self.public)

    def fingerprint(self) -> bytes:
        return fingerprint(self.public)


def sign_named(name: str, payload: bytes, key: PublisherKey) -> bytes:
    """Detached signature over the framed name plus payload."""
    if key.private is None:
        raise ChunkError("signing requires the private key")
    signer = Ed25519PrivateKey.from_private_bytes(key.private)
    return signer.sign(frame(name.encode("utf-8")) + payload)


def verify_named_signature(
    signature: bytes, name: str, payload: bytes, public_key_bytes: bytes
) -> bool:
    try:
        verifier = Ed25519PublicKey.from_public_bytes(public_key_bytes)
        verifier.verify(signature, frame(name.encode("utf-8")) + payload)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Chunk:
    """A self-contained content object: header plus payload.

    Plain content chunks carry only id/ttl/payload.  Named chunks also
    carry the name, a pointer to the public key chunk, the key
    fingerprint, and the detached signature.
    """

    id: Xid
    ttl_ms: int
    payload: bytes
    name: str | None = None
    key_ref: DagAddress | None = None
    fingerprint: bytes | None = field(default=None)
    signature: bytes | None = None

    def validate(self, max_payload: int | None = None) -> None:
        if self.id.xtype is XidType.CID:
            if any(v is not None for v in (self.name, self.key_ref, self.fingerprint, self.signature)):
                raise ChunkError("plain content chunk must not carry naming fields")
        elif self.id.xtype is XidType.NCID:
            if not self.name:
                raise ChunkError("named chunk requires a name")
            if self.key_ref is None or self.fingerprint is None or self.signature is None:
                raise ChunkError("named chunk requires key_ref, fingerprint and signature")
            if len(self.fingerprint) != XID_LEN:
                raise ChunkError(f"fingerprint must be {XID_LEN} bytes")
        else:
            raise ChunkError(f"chunk id must be a content type, not {self.id.xtype.value}")
        if not 0 <= self.ttl_ms <= MAX_TTL_MS:
            raise ChunkError(f"ttl {self.ttl_ms} out of range")
        if max_payload is not None and len(self.payload) > max_payload:
            raise ChunkError(
                f"payload of {len(self.payload)} bytes exceeds limit {max_payload}"
            )


def build_cid_chunk(
    payload: bytes, ttl_ms: int, max_payload: int = DEFAULT_MAX_PAYLOAD
) -> Chunk:
    chunk = Chunk(id=compute_cid(payload), ttl_ms=ttl_ms, payload=payload)
    chunk.validate(max_payload)
    return chunk


def build_ncid_chunk(
    name: str,
    payload: bytes,
    ttl_ms: int,
    key: PublisherKey,
    key_ref: DagAddress,
    max_payload: int = DEFAULT_MAX_PAYLOAD,
) -> Chunk:
    """Build a fully populated named chunk.

    ``key_ref`` must be an address whose intent is the chunk id of the
    public key itself (publish the key first); anything else is a
    publish-time error.
    """
    expected_key_cid = compute_cid(key.public)
    if key_ref.intent_xid() != expected_key_cid:
        raise ChunkError(
            "key_ref intent does not match the public key chunk "
            f"({key_ref.intent_xid().text()} != {expected_key_cid.text()})"
        )
    fp = key.fingerprint()
    chunk = Chunk(
        id=compute_ncid(name, fp),
        ttl_ms=ttl_ms,
        payload=payload,
        name=name,
        key_ref=key_ref,
        fingerprint=fp,
        signature=sign_named(name, payload, key),
    )
    chunk.validate(max_payload)
    return chunk


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = VerifyResult(True)


def reject(reason: str) -> VerifyResult:
    return VerifyResult(False, reason)


def verify_cid(chunk: Chunk) -> VerifyResult:
    """Accept iff the payload hashes back to the chunk id."""
    if chunk.id.xtype is not XidType.CID:
        raise ChunkError("verify_cid wants a plain content chunk")
    if compute_cid(chunk.payload) != chunk.id:
        return reject(REASON_HASH)
    return ACCEPT


def verify_ncid(chunk: Chunk, key_chunk: Chunk) -> VerifyResult:
    """Two-step verification of a named chunk against its key chunk.

    (a) the key chunk is itself valid and is the one the chunk points
    at; (b) the chunk id and fingerprint match the name/key binding;
    (c) the signature over (name, payload) verifies under that key.
    The result carries the first failing step.
    """
    if chunk.id.xtype is not XidType.NCID:
        raise ChunkError("verify_ncid wants a named chunk")
    chunk.validate()
    assert chunk.key_ref is not None and chunk.name is not None

    if key_chunk.id.xtype is not XidType.CID or not verify_cid(key_chunk):
        return reject(REASON_KEY)
    if key_chunk.id != chunk.key_ref.intent_xid():
        return reject(REASON_KEY)

    fp = fingerprint(key_chunk.payload)
    if chunk.id != compute_ncid(chunk.name, fp) or chunk.fingerprint != fp:
        return reject(REASON_NCID)

    assert chunk.signature is not None
    if not verify_named_signature(chunk.signature, chunk.name, chunk.payload, key_chunk.payload):
        return reject(REASON_SIG)
    return ACCEPT


def verify_ncid_via(chunk: Chunk, fetch_key: Callable[[Xid], Chunk]) -> VerifyResult:
    """Verify a named chunk, obtaining the key chunk through ``fetch_key``.

    Performs exactly one key fetch, whatever the payload size; callers
    wanting to audit the constant-cost property can count calls.
    """
    if chunk.key_ref is None:
        return reject(REASON_KEY)
    key_chunk = fetch_key(chunk.key_ref.intent_xid())
    if key_chunk is None:
        return reject(REASON_KEY)
    return verify_ncid(chunk, key_chunk)


# Wire layout (big endian): magic, u8 version, u8 id type, 20B id,
# u32 ttl-ms, u16 name-len + name, u8 has-key-ref (+ u16 len + DAG URL
# text), u8 has-fp (+ 20B), u16 sig-len + sig, u32 payload-len + payload.


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChunkDecodeError("short", f"buffer truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]


def encode_chunk(chunk: Chunk) -> bytes:
    chunk.validate()
    out = bytearray()
    out += CHUNK_MAGIC
    out.append(CHUNK_VERSION)
    out.append(_TYPE_CODES[chunk.id.xtype])
    out += chunk.id.value
    out += struct.pack(">I", chunk.ttl_ms)
    name = (chunk.name or "").encode("utf-8")
    out += struct.pack(">H", len(name)) + name
    if chunk.key_ref is not None:
        ref = serialize_dag_url(chunk.key_ref).encode("ascii")
        out.append(1)
        out += struct.pack(">H", len(ref)) + ref
    else:
        out.append(0)
    if chunk.fingerprint is not None:
        out.append(1)
        out += chunk.fingerprint
    else:
        out.append(0)
    sig = chunk.signature or b""
    out += struct.pack(">H", len(sig)) + sig
    out += struct.pack(">I", len(chunk.payload)) + chunk.payload
    return bytes(out)


def decode_chunk(buf: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Chunk:
    r = _Reader(buf)
    if r.take(4) != CHUNK_MAGIC:
        raise ChunkDecodeError("magic", "bad magic")
    version = r.u8()
    if version != CHUNK_VERSION:
        raise ChunkDecodeError("version", f"unsupported version {version}")
    type_code = r.u8()
    xtype = _CODE_TYPES.get(type_code)
    if xtype is None:
        raise ChunkDecodeError("id-type", f"unknown id type code {type_code}")
    xid = Xid(xtype, r.take(XID_LEN))
    ttl_ms = r.u32()
    name_len = r.u16()
    name = None
    if name_len:
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChunkDecodeError("invalid", "name is not valid UTF-8") from exc
    key_ref = None
    if r.u8():
        ref_len = r.u16()
        ref_text = r.take(ref_len).decode("ascii", errors="replace")
        try:
            key_ref = parse_dag_url(ref_text)
        except ValueError as exc:
            raise ChunkDecodeError("invalid", f"bad key reference: {exc}") from exc
    fp = r.take(XID_LEN) if r.u8() else None
    sig_len = r.u16()
    sig = r.take(sig_len) if sig_len else None
    payload_len = r.u32()
    if payload_len > max_payload:
        raise ChunkDecodeError(
            "overflow", f"payload length {payload_len} exceeds limit {max_payload}"
        )
    payload = r.take(payload_len)
    if r.pos != len(buf):
        raise ChunkDecodeError("trailing", f"{len(buf) - r.pos} trailing bytes")
    chunk = Chunk(
        id=xid,
        ttl_ms=ttl_ms,
        payload=payload,
        name=name,
        key_ref=key_ref,
        fingerprint=fp,
        signature=sig,
    )
    try:
        chunk.validate(max_payload)
    except ChunkError as exc:
        raise ChunkDecodeError("invalid", str(exc)) from exc
    return chunk
