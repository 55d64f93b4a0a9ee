"""
Wire messages exchanged between the coordinator and its clients.

Every message is a pydantic model tagged by `tag`, carrying
`protocol_version` and `run_id`. A frame is a 4-byte big-endian length
followed by the JSON payload; floats travel as IEEE-754 bit patterns so
decode(encode(m)) == m bit for bit. Client replies carry scalars, counts,
seeds and ids only, never sample coordinates.
"""
import json
import socket
import struct
from collections import deque
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from app.errors import (
    FramingError,
    MalformedRequestError,
    ProtocolError,
    ProtocolVersionError,
    UnknownTagError,
)
from app.services.permtest import TestReport
from app.wire import WireFloat

PROTOCOL_VERSION = 1
HEADER = struct.Struct("!I")
MAX_FRAME_BYTES = 64 * 1024 * 1024


class _Envelope(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    protocol_version: int = PROTOCOL_VERSION
    run_id: str


class SelectClients(_Envelope):
    tag: Literal["select_clients"] = "select_clients"
    client_ids: list[str]
    weights: list[WireFloat]


class ComputeRequest(_Envelope):
    tag: Literal["compute_request"] = "compute_request"
    client_id: str
    p: WireFloat = 2.0
    B_k: int
    seed: int
    solver: str = "exact"
    epsilon: WireFloat = 0.05


class LocalResult(_Envelope):
    tag: Literal["local_result"] = "local_result"
    client_id: str
    w2_squared: WireFloat


class PermutedBatchMsg(_Envelope):
    tag: Literal["permuted_batch"] = "permuted_batch"
    client_id: str
    stats: list[WireFloat]


class Verdict(_Envelope):
    tag: Literal["verdict"] = "verdict"
    report: TestReport


Message = Annotated[
    Union[SelectClients, ComputeRequest, LocalResult, PermutedBatchMsg, Verdict],
    Field(discriminator="tag"),
]
MESSAGE_TYPES = {cls.model_fields["tag"].default: cls
                 for cls in (SelectClients, ComputeRequest, LocalResult, PermutedBatchMsg, Verdict)}
_ADAPTER = TypeAdapter(Message)


def encode(msg):
    payload = msg.model_dump_json().encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise FramingError(f"Frame of {len(payload)} bytes exceeds {MAX_FRAME_BYTES}")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload):
    try:
        data = json.loads(bytes(payload).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FramingError(f"Payload is not JSON: {e}")
    if not isinstance(data, dict):
        raise FramingError("Payload is not a JSON object")
    if data.get("protocol_version") != PROTOCOL_VERSION:
        raise ProtocolVersionError(
            f"Protocol version {data.get('protocol_version')!r} != {PROTOCOL_VERSION}")
    if data.get("tag") not in MESSAGE_TYPES:
        raise UnknownTagError(f"Unknown message tag {data.get('tag')!r}")
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as e:
        raise MalformedRequestError(f"Invalid {data['tag']} message: {e}")


def decode(frame):
    """Decodes exactly one complete frame."""
    frame = bytes(frame)
    if len(frame) < HEADER.size:
        raise FramingError(f"Truncated header: {len(frame)} bytes")
    (length,) = HEADER.unpack_from(frame)
    body = frame[HEADER.size:]
    if len(body) < length:
        raise FramingError(f"Truncated frame: {len(body)} of {length} payload bytes")
    if len(body) > length:
        raise FramingError(f"{len(body) - length} trailing bytes after frame")
    return decode_payload(body)


class FrameDecoder:
    """
    Incremental decoder for a byte stream. Partial frames stay buffered until
    the rest arrives; a bad payload consumes only its own frame.

    `frames` splits the stream into complete raw frames (the socket read
    path). `feed` also decodes them; when a frame fails to decode, the
    messages before it are returned and the error is raised by the next
    `feed`, so no valid frame is lost.
    """

    def __init__(self):
        self._buffer = bytearray()
        self._ready = deque()
        self._error = None

    @property
    def pending(self):
        return len(self._buffer)

    def frames(self, data=b""):
        self._buffer.extend(data)
        out = []
        while len(self._buffer) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buffer)
            if length > MAX_FRAME_BYTES:
                self._buffer.clear()
                raise FramingError(f"Announced frame of {length} bytes exceeds {MAX_FRAME_BYTES}")
            end = HEADER.size + length
            if len(self._buffer) < end:
                break
            out.append(bytes(self._buffer[:end]))
            del self._buffer[:end]
        return out

    def feed(self, data=b""):
        self._ready.extend(self.frames(data))
        if self._error is not None:
            error, self._error = self._error, None
            raise error
        messages = []
        while self._ready:
            frame = self._ready.popleft()
            try:
                messages.append(decode_payload(frame[HEADER.size:]))
            except ProtocolError as e:
                if not messages:
                    raise
                self._error = e
                break
        return messages


def _recv_exact(sock, size):
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            return bytes(buf)
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock):
    """
    Reads one frame (header included) from a stream socket.
    Returns None on a clean end of stream; raises FramingError mid-frame.
    socket.timeout propagates to the caller.
    """
    header = _recv_exact(sock, HEADER.size)
    if not header:
        return None
    if len(header) < HEADER.size:
        raise FramingError("Connection closed inside a frame header")
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise FramingError(f"Announced frame of {length} bytes exceeds {MAX_FRAME_BYTES}")
    body = _recv_exact(sock, length)
    if len(body) < length:
        raise FramingError(f"Connection closed after {len(body)} of {length} payload bytes")
    return header + body


def write_frame(sock, frame):
    try:
        sock.sendall(frame)
    except (BrokenPipeError, ConnectionResetError, socket.timeout) as e:
        raise FramingError(f"Failed to send frame: {e}")
