"""Server/client map synchronization over a length-prefixed binary protocol.

Frame layout: u32 length prefix covering the 5-byte header (type u8 +
stage_id u32) plus the payload. A fresh client HELLOs with the NO_STAGE
sentinel and receives the stage-0 full map, then pulls one increment per
request until ACK. MAP_INC payloads bundle the increment stream with an
optional full-map segment carrying anchors that entered the map at that
stage, so a client reconstructs exactly the server's published map.

Registration matches a query image against contributor frames by L2
distance between 16x16 mean-pooled grayscale descriptors (or a query pose
by rotation angle with translation tie-break) and returns the matched
pose plus the stage that contributed it.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from splatstream.codec.bitstream import BitstreamError, deserialize
from splatstream.core import CameraPose, FrameRGBD, GaussianMap, pose_distance
from splatstream.increment import (
    OutOfOrderUpdateError,
    StageDatabase,
    apply_increment,
)

MAX_MESSAGE_BYTES = 256 * 1024 * 1024
NO_STAGE = 0xFFFFFFFF
DESCRIPTOR_SIZE = 16


class MessageType(IntEnum):
    HELLO = 1
    REGISTER = 2
    REGISTER_OK = 3
    MAP_FULL = 4
    MAP_INC = 5
    ACK = 6
    ERROR = 7


class ErrorCode(IntEnum):
    FUTURE_STAGE = 1
    EMPTY_SERVER = 2
    BAD_REQUEST = 3


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    type: MessageType
    stage_id: int
    payload: bytes = b""

    def encode(self) -> bytes:
        body = struct.pack("<BI", int(self.type), self.stage_id) + self.payload
        return struct.pack("<I", len(body)) + body

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        if len(data) < 5:
            raise ProtocolError("message shorter than its header")
        mtype, stage = struct.unpack("<BI", data[:5])
        try:
            mtype = MessageType(mtype)
        except ValueError as exc:
            raise ProtocolError(f"unknown message type {mtype}") from exc
        return cls(mtype, stage, data[5:])


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(msg.encode())


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        buf += chunk
    return bytes(buf)


def recv_message(sock: socket.socket) -> Message:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if length > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"length prefix {length} exceeds the limit")
    if length < 5:
        raise ProtocolError("length prefix shorter than a header")
    return Message.decode(_recv_exact(sock, length))


# ---------------------------------------------------------------------------
# registration descriptors
# ---------------------------------------------------------------------------

def image_descriptor(image: np.ndarray,
                     size: int = DESCRIPTOR_SIZE) -> np.ndarray:
    """Mean-pooled grayscale thumbnail, flattened."""
    img = np.asarray(image, np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    pooled = np.empty((size, size))
    for i, rows in enumerate(np.array_split(img, size, axis=0)):
        for j, block in enumerate(np.array_split(rows, size, axis=1)):
            pooled[i, j] = block.mean()
    return pooled.ravel()


# ---------------------------------------------------------------------------
# server / client state
# ---------------------------------------------------------------------------

@dataclass
class ServerState:
    """Published stages: bitstream blobs, maps, frames for registration."""

    database: StageDatabase = field(default_factory=StageDatabase)
    published_maps: dict = field(default_factory=dict)
    contributor_frames: list = field(default_factory=list)
    frame_stages: list = field(default_factory=list)
    descriptors: np.ndarray | None = None
    seen_partition: dict = field(default_factory=dict)

    @property
    def stage(self) -> int | None:
        return self.database.latest_stage()

    def add_contributor_frames(self, frames: list[FrameRGBD],
                               stage: int) -> None:
        descs = [image_descriptor(f.color) for f in frames]
        self.contributor_frames.extend(frames)
        self.frame_stages.extend([stage] * len(frames))
        stacked = np.array(descs)
        self.descriptors = stacked if self.descriptors is None \
            else np.concatenate([self.descriptors, stacked])

    def publish_stage(self, record, blobs: dict, published_map: GaussianMap,
                      seen_flags=None) -> None:
        self.database.put(record, blobs)
        self.published_maps[record.stage_id] = published_map
        if seen_flags is not None:
            self.seen_partition[record.stage_id] = seen_flags


@dataclass
class ClientState:
    cached_map: GaussianMap | None = None

    @property
    def stage(self) -> int | None:
        return None if self.cached_map is None else self.cached_map.stage_id


def register(server: ServerState, query_image=None, query_pose=None):
    """Locate a user: returns (matched pose, segment id = source stage)."""
    if not server.contributor_frames:
        raise ProtocolError("server has no contributor frames")
    if (query_image is None) == (query_pose is None):
        raise ValueError("provide exactly one of query_image/query_pose")
    if query_image is not None:
        q = image_descriptor(query_image)
        dists = np.linalg.norm(server.descriptors - q, axis=1)
        best = int(np.argmin(dists))
    else:
        keyed = [pose_distance(query_pose, f.pose)
                 for f in server.contributor_frames]
        best = min(range(len(keyed)), key=lambda i: keyed[i])
    return (server.contributor_frames[best].pose, server.frame_stages[best])


def serve_update(server: ServerState, client_stage: int | None) -> Message:
    """One catch-up step: full map for fresh clients, else the next
    increment, else ACK; future stages are an error."""
    latest = server.stage
    if latest is None:
        return Message(MessageType.ERROR, 0,
                       struct.pack("<B", ErrorCode.EMPTY_SERVER)
                       + b"no published stages")
    if client_stage is None:
        blobs = server.database.blobs(0)
        return Message(MessageType.MAP_FULL, 0, blobs["full"])
    if client_stage > latest:
        return Message(MessageType.ERROR, latest,
                       struct.pack("<B", ErrorCode.FUTURE_STAGE)
                       + b"client is ahead of the server")
    if client_stage == latest:
        return Message(MessageType.ACK, latest)
    nxt = client_stage + 1
    blobs = server.database.blobs(nxt)
    if "increment" in blobs:
        seg = blobs.get("segment", b"")
        payload = (struct.pack("<I", len(blobs["increment"]))
                   + blobs["increment"]
                   + struct.pack("<I", len(seg)) + seg)
        return Message(MessageType.MAP_INC, nxt, payload)
    # stages published as full maps (increment path disabled)
    return Message(MessageType.MAP_FULL, nxt, blobs["full"])


def _split_inc_payload(payload: bytes):
    if len(payload) < 4:
        raise ProtocolError("malformed increment payload")
    (n_inc,) = struct.unpack("<I", payload[:4])
    if len(payload) < 4 + n_inc + 4:
        raise ProtocolError("malformed increment payload")
    inc = payload[4:4 + n_inc]
    (n_seg,) = struct.unpack("<I", payload[4 + n_inc:8 + n_inc])
    seg = payload[8 + n_inc:8 + n_inc + n_seg]
    if len(seg) != n_seg:
        raise ProtocolError("malformed increment payload")
    return inc, seg


def client_apply(client: ClientState, msg: Message) -> ClientState:
    """Apply a map message transactionally: any error leaves the cache
    unchanged; replays and out-of-order increments are rejected."""
    if msg.type is MessageType.MAP_FULL:
        decoded = deserialize(msg.payload)
        if not isinstance(decoded, GaussianMap):
            raise ProtocolError("MAP_FULL did not carry a map")
        return ClientState(decoded)
    if msg.type is not MessageType.MAP_INC:
        raise ProtocolError(f"not a map message: {msg.type.name}")
    if client.cached_map is None:
        raise OutOfOrderUpdateError("increment received before any full map")
    inc_bytes, seg_bytes = _split_inc_payload(msg.payload)
    inc = deserialize(inc_bytes)
    if isinstance(inc, GaussianMap):
        raise ProtocolError("MAP_INC did not carry an increment")
    updated = apply_increment(client.cached_map, inc)   # raises on bad stage
    if seg_bytes:
        segment = deserialize(seg_bytes)
        if not isinstance(segment, GaussianMap):
            raise ProtocolError("segment did not carry a map")
        updated = concat_anchored_maps(updated, segment)
    return ClientState(updated)


def concat_anchored_maps(a: GaussianMap, b: GaussianMap) -> GaussianMap:
    """Append b's anchors after a's, preserving a's ordering and stage."""
    if a.anchor_positions is None or b.anchor_positions is None:
        raise ValueError("both maps must be anchored")
    if a.K != b.K:
        raise ValueError("K mismatch")
    return GaussianMap(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.scales, b.scales]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.opacities, b.opacities]),
        np.concatenate([a.colors, b.colors]),
        np.concatenate([a.kinds, b.kinds]),
        np.concatenate([a.alive, b.alive]),
        np.concatenate([a.anchor_positions, b.anchor_positions]),
        a.K, a.stage_id)


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------

def _pose_payload(pose: CameraPose, segment: int) -> bytes:
    import json
    from splatstream.fileio import pose_to_json
    return struct.pack("<I", segment) + json.dumps(
        pose_to_json(pose), sort_keys=True).encode()


def decode_register_ok(msg: Message):
    import json
    from splatstream.fileio import pose_from_json
    (segment,) = struct.unpack("<I", msg.payload[:4])
    return pose_from_json(json.loads(msg.payload[4:].decode())), segment


def _handle_request(server: ServerState, msg: Message) -> Message:
    if msg.type is MessageType.HELLO:
        stage = None if msg.stage_id == NO_STAGE else msg.stage_id
        return serve_update(server, stage)
    if msg.type is MessageType.REGISTER:
        if not msg.payload:
            return Message(MessageType.ERROR, 0,
                           struct.pack("<B", ErrorCode.BAD_REQUEST)
                           + b"empty register payload")
        kind = msg.payload[0]
        try:
            if kind == 0:
                w, h = struct.unpack("<HH", msg.payload[1:5])
                img = np.frombuffer(msg.payload[5:5 + 4 * w * h],
                                    dtype="<f4").reshape(h, w)
                pose, segment = register(server, query_image=img)
            else:
                import json
                from splatstream.fileio import pose_from_json
                pose, segment = register(
                    server,
                    query_pose=pose_from_json(json.loads(
                        msg.payload[1:].decode())))
        except ProtocolError as exc:
            return Message(MessageType.ERROR, 0,
                           struct.pack("<B", ErrorCode.EMPTY_SERVER)
                           + str(exc).encode())
        return Message(MessageType.REGISTER_OK, segment,
                       _pose_payload(pose, segment))
    return Message(MessageType.ERROR, 0,
                   struct.pack("<B", ErrorCode.BAD_REQUEST)
                   + f"unexpected {msg.type.name}".encode())


class MapServer:
    """Threaded TCP server exposing a published ServerState read-only."""

    def __init__(self, state: ServerState, host: str = "127.0.0.1",
                 port: int = 0):
        outer_state = state

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                while True:
                    try:
                        msg = recv_message(self.request)
                    except (ConnectionError, ProtocolError):
                        break
                    send_message(self.request, _handle_request(outer_state,
                                                               msg))

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)

    @property
    def address(self):
        return self._server.server_address

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        return False


def fetch(address, out_dir=None, start_stage: int | None = None,
          max_steps: int = 10_000) -> ClientState:
    """Pull-based catch-up: HELLO until ACK; optionally dump blobs."""
    from pathlib import Path

    client = ClientState()
    received = []
    with socket.create_connection(address) as sock:
        stage = start_stage
        for _ in range(max_steps):
            hello_stage = NO_STAGE if stage is None else stage
            send_message(sock, Message(MessageType.HELLO, hello_stage))
            reply = recv_message(sock)
            if reply.type is MessageType.ACK:
                break
            if reply.type is MessageType.ERROR:
                code = ErrorCode(reply.payload[0])
                raise ProtocolError(
                    f"server error {code.name}: {reply.payload[1:].decode()}")
            client = client_apply(client, reply)
            received.append((reply.type, reply.stage_id, reply.payload))
            stage = client.stage
        else:
            raise ProtocolError("did not converge within the step budget")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for mtype, stage_id, payload in received:
            kind = "full" if mtype is MessageType.MAP_FULL else "inc"
            (out / f"stage_{stage_id:04d}_{kind}.bin").write_bytes(payload)
    return client
