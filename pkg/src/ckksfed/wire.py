"""Binary wire format and transports.

Frame layout (all integers little-endian)::

    magic "FHE1" | type u8 | payload_length u64 | payload | crc32(payload) u32

Ciphertext layout::

    ring_degree u32 | level u8 | is_ntt u8 | slot_count u32 | scale f64 |
    chain_fingerprint u64 | c0 residues | c1 residues

where each component is (level + 1) rows of ring_degree u64 words. There is
intentionally no encoder for secret keys anywhere in this module.
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .ckks import CkksParams, Ciphertext, PublicKey, SecretKey
from .errors import (
    BadMagicError,
    ChecksumError,
    ConnectionClosedError,
    OversizeError,
    ParamsMismatchError,
    TruncatedError,
    UnknownMessageError,
    WireError,
)
from .lattice import RingParams, RnsPolynomial
from .modelpack import ArrayDescriptor, ModelLayout, PackedModel

MAGIC = b"FHE1"
FRAME_HEADER = struct.Struct("<4sBQ")
CRC = struct.Struct("<I")
FRAME_OVERHEAD = FRAME_HEADER.size + CRC.size
DEFAULT_MAX_PAYLOAD = 2 * 1024**3

CT_HEADER = struct.Struct("<IBBIdQ")
PK_HEADER = struct.Struct("<IBQ")


def _ring(params) -> RingParams:
    return params.ring if isinstance(params, CkksParams) else params


def chain_fingerprint(params) -> int:
    ring = _ring(params)
    text = f"{ring.ring_degree}:" + ",".join(str(q) for q in ring.moduli)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _refuse_secret(obj) -> None:
    if isinstance(obj, SecretKey):
        raise TypeError("secret keys have no wire encoding")


def _residue_bytes(p: RnsPolynomial) -> bytes:
    return p.residues.astype("<u8", copy=False).tobytes()


def _read_residues(data: memoryview, offset: int, rows: int, ring: RingParams) -> tuple[np.ndarray, int]:
    n = ring.ring_degree
    size = rows * n * 8
    if len(data) < offset + size:
        raise TruncatedError("residue data is truncated")
    arr = np.frombuffer(data[offset:offset + size], dtype="<u8").astype(np.uint64).reshape(rows, n)
    if np.any(arr >= ring._qs[:rows, None]):
        raise WireError("residue out of range for its modulus")
    return arr, offset + size


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    _refuse_secret(ct)
    ring = ct.params
    header = CT_HEADER.pack(ring.ring_degree, ct.level, int(ct.c0.is_ntt), ct.slot_count,
                            float(ct.scale), chain_fingerprint(ring))
    return header + _residue_bytes(ct.c0) + _residue_bytes(ct.c1)


def ciphertext_size(ring_degree: int, level: int) -> int:
    return CT_HEADER.size + 2 * (level + 1) * ring_degree * 8


def _parse_ciphertext(data: memoryview, offset: int, params) -> tuple[Ciphertext, int]:
    ring = _ring(params)
    if len(data) < offset + CT_HEADER.size:
        raise TruncatedError("ciphertext header is truncated")
    n, level, is_ntt, slots, scale, fp = CT_HEADER.unpack_from(data, offset)
    if n != ring.ring_degree:
        raise ParamsMismatchError(f"ring degree {n} does not match {ring.ring_degree}")
    if level > ring.max_level:
        raise ParamsMismatchError(f"level {level} exceeds chain length {len(ring.moduli)}")
    if fp != chain_fingerprint(ring):
        raise ParamsMismatchError("modulus chain fingerprint does not match")
    if slots != n // 2 or is_ntt > 1 or not np.isfinite(scale) or scale <= 0:
        raise WireError("malformed ciphertext header")
    offset += CT_HEADER.size
    c0, offset = _read_residues(data, offset, level + 1, ring)
    c1, offset = _read_residues(data, offset, level + 1, ring)
    ct = Ciphertext(RnsPolynomial(ring, c0, bool(is_ntt)), RnsPolynomial(ring, c1, bool(is_ntt)), scale)
    return ct, offset


def deserialize_ciphertext(data: bytes, params) -> Ciphertext:
    view = memoryview(data)
    ct, end = _parse_ciphertext(view, 0, params)
    if end != len(view):
        raise WireError(f"{len(view) - end} trailing bytes after ciphertext")
    return ct


def serialize_public_key(pk: PublicKey) -> bytes:
    _refuse_secret(pk)
    ring = pk.a.params
    header = PK_HEADER.pack(ring.ring_degree, pk.a.level, chain_fingerprint(ring))
    return header + _residue_bytes(pk.b) + _residue_bytes(pk.a)


def deserialize_public_key(data: bytes, params) -> PublicKey:
    ring = _ring(params)
    view = memoryview(data)
    if len(view) < PK_HEADER.size:
        raise TruncatedError("public key header is truncated")
    n, level, fp = PK_HEADER.unpack_from(view, 0)
    if n != ring.ring_degree or level != ring.max_level or fp != chain_fingerprint(ring):
        raise ParamsMismatchError("public key was produced under different parameters")
    b, off = _read_residues(view, PK_HEADER.size, level + 1, ring)
    a, off = _read_residues(view, off, level + 1, ring)
    if off != len(view):
        raise WireError("trailing bytes after public key")
    return PublicKey(RnsPolynomial(ring, b, True), RnsPolynomial(ring, a, True))


def serialize_layout(layout: ModelLayout) -> bytes:
    parts = [struct.pack("<II", layout.slots_per_ciphertext, len(layout.arrays))]
    for d in layout.arrays:
        name = d.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack(f"<B{len(d.shape)}Q", len(d.shape), *d.shape))
        parts.append(struct.pack("<QII", d.size, d.start_ciphertext, d.start_slot))
    return b"".join(parts)


def _parse_layout(data: memoryview, offset: int) -> tuple[ModelLayout, int]:
    def take(fmt):
        nonlocal offset
        s = struct.Struct(fmt)
        if len(data) < offset + s.size:
            raise TruncatedError("layout is truncated")
        vals = s.unpack_from(data, offset)
        offset += s.size
        return vals

    slots, count = take("<II")
    if slots == 0:
        raise WireError("layout has zero slots per ciphertext")
    arrays = []
    for _ in range(count):
        (name_len,) = take("<H")
        if len(data) < offset + name_len:
            raise TruncatedError("layout name is truncated")
        try:
            name = bytes(data[offset:offset + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise WireError("layout name is not valid UTF-8") from None
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q") if ndim else ()
        size, start_ct, start_slot = take("<QII")
        if int(np.prod(shape, dtype=object)) != size or start_slot >= slots:
            raise WireError("inconsistent array descriptor")
        arrays.append(ArrayDescriptor(name, tuple(shape), size, start_ct, start_slot))
    expected = 0
    for d in arrays:
        if d.start_ciphertext * slots + d.start_slot != expected:
            raise WireError("array descriptors are not contiguous")
        expected += d.size
    return ModelLayout(tuple(arrays), slots), offset


def deserialize_layout(data: bytes) -> ModelLayout:
    view = memoryview(data)
    layout, end = _parse_layout(view, 0)
    if end != len(view):
        raise WireError("trailing bytes after layout")
    return layout


MODEL_ENCRYPTED = b"E"
MODEL_PLAIN = b"P"


def serialize_packed_model(packed: PackedModel) -> bytes:
    layout = serialize_layout(packed.layout)
    parts = [MODEL_ENCRYPTED, struct.pack("<I", len(layout)), layout,
             struct.pack("<I", len(packed.ciphertexts))]
    parts.extend(serialize_ciphertext(ct) for ct in packed.ciphertexts)
    return b"".join(parts)


def serialize_plain_model(layout: ModelLayout, flat: np.ndarray) -> bytes:
    lb = serialize_layout(layout)
    vec = np.asarray(flat, dtype="<f8")[: layout.total_parameters]
    return MODEL_PLAIN + struct.pack("<I", len(lb)) + lb + vec.tobytes()


def _model_header(view: memoryview, kind: bytes) -> tuple[ModelLayout, int]:
    if len(view) < 5:
        raise TruncatedError("model payload is truncated")
    if bytes(view[:1]) != kind:
        raise WireError(f"expected model kind {kind!r}, got {bytes(view[:1])!r}")
    (lb_len,) = struct.unpack_from("<I", view, 1)
    if len(view) < 5 + lb_len:
        raise TruncatedError("model layout is truncated")
    layout, end = _parse_layout(view[: 5 + lb_len], 5)
    return layout, end


def deserialize_packed_model(data: bytes, params) -> PackedModel:
    view = memoryview(data)
    layout, off = _model_header(view, MODEL_ENCRYPTED)
    if len(view) < off + 4:
        raise TruncatedError("ciphertext count is truncated")
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    if count != layout.ciphertext_count:
        raise WireError(f"{count} ciphertexts for a layout needing {layout.ciphertext_count}")
    cts = []
    for _ in range(count):
        ct, off = _parse_ciphertext(view, off, params)
        cts.append(ct)
    if off != len(view):
        raise WireError("trailing bytes after packed model")
    return PackedModel(layout, tuple(cts))


def deserialize_plain_model(data: bytes) -> tuple[ModelLayout, np.ndarray]:
    view = memoryview(data)
    layout, off = _model_header(view, MODEL_PLAIN)
    if len(view) - off != 8 * layout.total_parameters:
        raise WireError("plain model vector has the wrong length")
    return layout, np.frombuffer(view[off:], dtype="<f8").astype(np.float64)


# --- messages -------------------------------------------------------------


@dataclass(frozen=True)
class Register:
    learner_id: int
    contribution: int


@dataclass(frozen=True)
class CommunityModel:
    round: int
    model: bytes


@dataclass(frozen=True)
class LocalModel:
    round: int
    learner_id: int
    model: bytes


@dataclass(frozen=True)
class MetricsAck:
    pass


@dataclass(frozen=True)
class Shutdown:
    pass


MESSAGE_TYPES = {Register: 1, CommunityModel: 2, LocalModel: 3, MetricsAck: 4, Shutdown: 5}
_TYPE_BY_CODE = {code: cls for cls, code in MESSAGE_TYPES.items()}


def _encode_payload(msg) -> bytes:
    if isinstance(msg, Register):
        return struct.pack("<IQ", msg.learner_id, msg.contribution)
    if isinstance(msg, CommunityModel):
        return struct.pack("<Q", msg.round) + msg.model
    if isinstance(msg, LocalModel):
        return struct.pack("<QI", msg.round, msg.learner_id) + msg.model
    return b""


def _decode_payload(code: int, payload: bytes):
    cls = _TYPE_BY_CODE[code]
    try:
        if cls is Register:
            if len(payload) != 12:
                raise WireError("Register payload must be 12 bytes")
            return Register(*struct.unpack("<IQ", payload))
        if cls is CommunityModel:
            (rnd,) = struct.unpack_from("<Q", payload, 0)
            return CommunityModel(rnd, bytes(payload[8:]))
        if cls is LocalModel:
            rnd, lid = struct.unpack_from("<QI", payload, 0)
            return LocalModel(rnd, lid, bytes(payload[12:]))
    except struct.error:
        raise TruncatedError(f"{cls.__name__} payload is truncated") from None
    if payload:
        raise WireError(f"{cls.__name__} carries no payload")
    return cls()


def frame_encode(msg) -> bytes:
    _refuse_secret(msg)
    code = MESSAGE_TYPES.get(type(msg))
    if code is None:
        raise TypeError(f"cannot frame {type(msg).__name__}")
    payload = _encode_payload(msg)
    return FRAME_HEADER.pack(MAGIC, code, len(payload)) + payload + CRC.pack(zlib.crc32(payload))


def _check_header(header: bytes, max_payload: int) -> tuple[int, int]:
    magic, code, length = FRAME_HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad frame magic {magic!r}")
    if length > max_payload:
        raise OversizeError(f"payload of {length} bytes exceeds cap {max_payload}")
    return code, length


def _finish_frame(code: int, payload: bytes, crc: bytes):
    (expected,) = CRC.unpack(crc)
    if zlib.crc32(payload) != expected:
        raise ChecksumError("frame checksum mismatch")
    if code not in _TYPE_BY_CODE:
        raise UnknownMessageError(f"unknown message type {code}")
    return _decode_payload(code, payload)


def frame_decode(data, max_payload: int = DEFAULT_MAX_PAYLOAD):
    """Decode the frame at the start of ``data``; returns ``(message, consumed)``.

    Raises TruncatedError when ``data`` holds less than one complete frame.
    """
    view = memoryview(data)
    if len(view) < FRAME_HEADER.size:
        raise TruncatedError("frame header is truncated")
    code, length = _check_header(bytes(view[: FRAME_HEADER.size]), max_payload)
    end = FRAME_HEADER.size + length
    if len(view) < end + CRC.size:
        raise TruncatedError("frame body is truncated")
    msg = _finish_frame(code, bytes(view[FRAME_HEADER.size:end]), bytes(view[end:end + CRC.size]))
    return msg, end + CRC.size


class FrameDecoder:
    """Incremental decoder for a byte stream delivered in arbitrary pieces.

    A frame with a bad checksum, unknown type or bad payload is dropped
    whole, so the stream stays usable; after bad magic the decoder skips
    ahead to the next occurrence of the magic bytes.
    """

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.max_payload = max_payload
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_message(self):
        """Next complete message, or None if more bytes are needed."""
        buf = self._buf
        if len(buf) < FRAME_HEADER.size:
            return None
        try:
            code, length = _check_header(bytes(buf[: FRAME_HEADER.size]), self.max_payload)
        except BadMagicError:
            nxt = buf.find(MAGIC, 1)
            del buf[: nxt if nxt > 0 else max(len(buf) - len(MAGIC) + 1, 1)]
            raise
        except OversizeError:
            del buf[: FRAME_HEADER.size]
            raise
        total = FRAME_HEADER.size + length + CRC.size
        if len(buf) < total:
            return None
        payload = bytes(buf[FRAME_HEADER.size:total - CRC.size])
        crc = bytes(buf[total - CRC.size:total])
        del buf[:total]
        return _finish_frame(code, payload, crc)

    @property
    def buffered(self) -> int:
        return len(self._buf)


# --- transports -----------------------------------------------------------

_ROUND_MESSAGES = (CommunityModel, LocalModel)


class Connection:
    """Framed, ordered message channel with byte accounting.

    Rounds carried by CommunityModel / LocalModel must never decrease in
    either direction.
    """

    def __init__(self, record_trace: bool = False):
        self.bytes_sent = 0
        self.bytes_received = 0
        self.trace: list[tuple[str, bytes]] | None = [] if record_trace else None
        self._last_round_in = -1
        self._last_round_out = -1

    def send(self, msg) -> int:
        if isinstance(msg, _ROUND_MESSAGES):
            if msg.round < self._last_round_out:
                raise WireError(f"round {msg.round} sent after round {self._last_round_out}")
            self._last_round_out = msg.round
        frame = frame_encode(msg)
        self._send_bytes(frame)
        self.bytes_sent += len(frame)
        if self.trace is not None:
            self.trace.append(("out", frame))
        return len(frame)

    def recv(self):
        frame = self._recv_frame()
        self.bytes_received += len(frame)
        if self.trace is not None:
            self.trace.append(("in", frame))
        msg, _ = frame_decode(frame)
        if isinstance(msg, _ROUND_MESSAGES):
            if msg.round < self._last_round_in:
                raise WireError(f"round {msg.round} received after round {self._last_round_in}")
            self._last_round_in = msg.round
        return msg

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class QueueConnection(Connection):
    """One end of an in-process channel; frames are real encoded bytes."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, record_trace: bool = False):
        super().__init__(record_trace)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionClosedError("connection is closed")
        self._outbox.put(data)

    def _recv_frame(self) -> bytes:
        data = self._inbox.get()
        if data is None:
            self._inbox.put(None)
            raise ConnectionClosedError("peer closed the connection")
        return data

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def inproc_pair(record_trace: bool = False) -> tuple[QueueConnection, QueueConnection]:
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return (QueueConnection(b_to_a, a_to_b, record_trace),
            QueueConnection(a_to_b, b_to_a, record_trace))


class SocketConnection(Connection):
    def __init__(self, sock: socket.socket, record_trace: bool = False,
                 max_payload: int = DEFAULT_MAX_PAYLOAD):
        super().__init__(record_trace)
        self.sock = sock
        self.max_payload = max_payload
        self._send_lock = threading.Lock()

    def _send_bytes(self, data: bytes) -> None:
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionClosedError(f"send failed: {exc}") from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self.sock.recv(min(remaining, 1 << 20))
            except OSError as exc:
                raise ConnectionClosedError(f"receive failed: {exc}") from exc
            if not chunk:
                raise ConnectionClosedError("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def _recv_frame(self) -> bytes:
        header = self._recv_exact(FRAME_HEADER.size)
        _, length = _check_header(header, self.max_payload)
        return header + self._recv_exact(length + CRC.size)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {addr!r}")
    return host, int(port)


class TcpListener:
    def __init__(self, addr: str = "127.0.0.1:0", backlog: int = 64):
        host, port = parse_address(addr)
        self.sock = socket.create_server((host, port), backlog=backlog)

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self, record_trace: bool = False, timeout: float | None = 60.0) -> SocketConnection:
        self.sock.settimeout(timeout)
        conn, _ = self.sock.accept()
        conn.settimeout(None)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketConnection(conn, record_trace)

    def close(self) -> None:
        self.sock.close()


def tcp_connect(addr: str, record_trace: bool = False, timeout: float = 30.0) -> SocketConnection:
    sock = socket.create_connection(parse_address(addr), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketConnection(sock, record_trace)
