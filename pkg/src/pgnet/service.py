"""Input-only inference: a server that hosts the frozen encoder and classifier,
and a client that turns PGN prompts into pixels before sending the image.

Wire format (all integers little-endian)::

    request  PromptFrame:  b"PGNF" u8 version u8 flags u16 channels u16 height u16 width  payload
    response LogitFrame:   b"PGNR" u8 version u8 status u16 num_classes  f32 logits  [u32 crc32]

Request flags: bit0 float32 pixels, bit1 uint8 pixels (exactly one must be set),
bit2 asks the server to append a CRC32 of the response bytes. The payload is the
(3, height, width) image in row-major, channel-major order.

This module deliberately does not import the prompt generator: the server only
ever sees pixels, and its checkpoint loader refuses prompt-source tensors.
"""

from __future__ import annotations

import io
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import checkpoint
from . import tensor as T
from .encoder import EncoderConfig, FrozenEncoder, patchify
from .errors import (BadCheckpoint, BadFrame, BadMagic, BadVersion, BindFailure, ServerStatus,
                     Truncated)
from .inversion import Inverter, compose, invert_prompts
from .training import Classifier

REQ_MAGIC = b"PGNF"
RESP_MAGIC = b"PGNR"
VERSION = 1

FLAG_F32 = 0x01
FLAG_U8 = 0x02
FLAG_CRC = 0x04
_KNOWN_FLAGS = FLAG_F32 | FLAG_U8 | FLAG_CRC

STATUS_OK = 0
STATUS_BAD_REQUEST = 1
STATUS_SHAPE_ERROR = 2

_REQ_HEADER = struct.Struct("<4sBBHHH")
_RESP_HEADER = struct.Struct("<4sBBH")

# tensors a server checkpoint may never contain
SERVER_FORBIDDEN_PREFIXES = ("pgn.", "lib.")


# ---------------------------------------------------------------------------
# frames


@dataclass(eq=False)
class PromptFrame:
    pixels: np.ndarray  # (3, H, W) float32 or uint8
    version: int = VERSION
    crc: bool = False

    @property
    def flags(self) -> int:
        kind = FLAG_U8 if self.pixels.dtype == np.uint8 else FLAG_F32
        return kind | (FLAG_CRC if self.crc else 0)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptFrame):
            return NotImplemented
        return (self.version == other.version and self.crc == other.crc
                and self.pixels.dtype == other.pixels.dtype and self.pixels.shape == other.pixels.shape
                and self.pixels.tobytes() == other.pixels.tobytes())


@dataclass(eq=False)
class LogitFrame:
    status: int
    logits: np.ndarray  # (num_classes,) float32; empty unless status == 0
    version: int = VERSION
    crc: bool = False

    def __eq__(self, other) -> bool:
        if not isinstance(other, LogitFrame):
            return NotImplemented
        return (self.status == other.status and self.version == other.version and self.crc == other.crc
                and self.logits.astype("<f4").tobytes() == other.logits.astype("<f4").tobytes())


def _pixel_bytes(flags: int) -> int:
    kind = flags & (FLAG_F32 | FLAG_U8)
    if flags & ~_KNOWN_FLAGS or kind not in (FLAG_F32, FLAG_U8):
        raise BadFrame(f"invalid flags 0x{flags:02x}")
    return 4 if kind == FLAG_F32 else 1


def encode_prompt(frame: PromptFrame) -> bytes:
    px = np.asarray(frame.pixels)
    if px.ndim != 3 or px.shape[0] != 3:
        raise BadFrame(f"pixels must be (3, H, W), got {px.shape}")
    if px.dtype not in (np.float32, np.uint8):
        raise BadFrame(f"pixels must be float32 or uint8, got {px.dtype}")
    header = _REQ_HEADER.pack(REQ_MAGIC, frame.version, frame.flags, 3, px.shape[1], px.shape[2])
    payload = np.ascontiguousarray(px, dtype="<f4" if px.dtype == np.float32 else np.uint8).tobytes()
    return header + payload


def _parse_req_header(header: bytes) -> tuple[int, int, int, int, int]:
    magic, version, flags, channels, height, width = _REQ_HEADER.unpack(header)
    if magic != REQ_MAGIC:
        raise BadMagic(f"bad request magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported frame version {version}")
    bpp = _pixel_bytes(flags)
    if channels != 3:
        raise BadFrame(f"channels must be 3, got {channels}")
    return version, flags, height, width, bpp


def _build_prompt(version: int, flags: int, height: int, width: int, payload: bytes) -> PromptFrame:
    dtype = np.dtype("<f4") if flags & FLAG_F32 else np.dtype(np.uint8)
    px = np.frombuffer(payload, dtype=dtype).reshape(3, height, width)
    px = px.astype(np.float32 if flags & FLAG_F32 else np.uint8)
    return PromptFrame(px, version, bool(flags & FLAG_CRC))


def decode_prompt(raw: bytes) -> PromptFrame:
    """Strict decode of exactly one request frame."""
    if len(raw) < _REQ_HEADER.size:
        raise Truncated(f"header needs {_REQ_HEADER.size} bytes, got {len(raw)}")
    version, flags, height, width, bpp = _parse_req_header(raw[:_REQ_HEADER.size])
    need = _REQ_HEADER.size + 3 * height * width * bpp
    if len(raw) < need:
        raise Truncated(f"frame needs {need} bytes, got {len(raw)}")
    if len(raw) > need:
        raise BadFrame(f"{len(raw) - need} trailing bytes after frame")
    return _build_prompt(version, flags, height, width, raw[_REQ_HEADER.size:])


def encode_logits(frame: LogitFrame) -> bytes:
    logits = np.asarray(frame.logits, dtype="<f4").reshape(-1)
    if frame.status != STATUS_OK and logits.size:
        raise BadFrame("error responses carry no logits")
    body = _RESP_HEADER.pack(RESP_MAGIC, frame.version, frame.status, logits.size) + logits.tobytes()
    if frame.crc:
        body += struct.pack("<I", zlib.crc32(body))
    return body


def _check_resp_header(header: bytes) -> tuple[int, int, int]:
    magic, version, status, n = _RESP_HEADER.unpack(header)
    if magic != RESP_MAGIC:
        raise BadMagic(f"bad response magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported frame version {version}")
    if status != STATUS_OK and n:
        raise BadFrame(f"status {status} response carries {n} logits")
    return version, status, n


def _finish_logits(version, status, n, head: bytes, payload: bytes, trailer: bytes | None) -> LogitFrame:
    if trailer is not None:
        (crc,) = struct.unpack("<I", trailer)
        if crc != zlib.crc32(head + payload):
            raise BadFrame("CRC32 mismatch")
    logits = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return LogitFrame(status, logits, version, trailer is not None)


def decode_logits(raw: bytes, crc: bool = False) -> LogitFrame:
    """Strict decode of one response; ``crc`` says whether a trailer was requested."""
    h = _RESP_HEADER.size
    if len(raw) < h:
        raise Truncated(f"header needs {h} bytes, got {len(raw)}")
    version, status, n = _check_resp_header(raw[:h])
    need = h + 4 * n + (4 if crc else 0)
    if len(raw) < need:
        raise Truncated(f"frame needs {need} bytes, got {len(raw)}")
    if len(raw) > need:
        raise BadFrame(f"{len(raw) - need} trailing bytes after frame")
    return _finish_logits(version, status, n, raw[:h], raw[h:h + 4 * n], raw[h + 4 * n:] if crc else None)


# ---------------------------------------------------------------------------
# stream helpers (frames are self-delimiting, so any reliable byte stream works)


def _read_exact(stream: BinaryIO, n: int, allow_eof: bool = False) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise Truncated(f"stream ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_logit_frame(stream: BinaryIO, crc: bool = False) -> LogitFrame:
    head = _read_exact(stream, _RESP_HEADER.size)
    version, status, n = _check_resp_header(head)
    payload = _read_exact(stream, 4 * n)
    trailer = _read_exact(stream, 4) if crc else None
    return _finish_logits(version, status, n, head, payload, trailer)


# ---------------------------------------------------------------------------
# server


class InferenceServer:
    """Frozen encoder + classifier answering PromptFrames; holds no prompt source."""

    def __init__(self, enc: FrozenEncoder, classifier: Classifier):
        self.enc = enc
        self.classifier = classifier

    @classmethod
    def from_checkpoint(cls, path, config: EncoderConfig, num_classes: int) -> "InferenceServer":
        return cls(*load_server_model(path, config, num_classes))

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def _shape_ok(self, height: int, width: int) -> bool:
        cfg = self.enc.config
        s = cfg.patch_size
        return (height % s == 0 and width == cfg.image_w
                and cfg.image_h <= height <= cfg.image_h + cfg.r_max * s)

    def classify(self, frame: PromptFrame) -> LogitFrame:
        """Patchify the (possibly extended) image, encode it with K=0 and apply the classifier."""
        if not self._shape_ok(frame.height, frame.width):
            return LogitFrame(STATUS_SHAPE_ERROR, np.zeros(0, np.float32), crc=frame.crc)
        px = frame.pixels
        img = px.astype(np.float32) / np.float32(255.0) if px.dtype == np.uint8 else px
        if not np.all(np.isfinite(img)):
            return LogitFrame(STATUS_BAD_REQUEST, np.zeros(0, np.float32), crc=frame.crc)
        with T.no_grad():
            z = self.enc.encode(None, self.enc.embed(patchify(img, self.enc.config.patch_size))).z
            logits = self.classifier(z).data.reshape(-1)
        return LogitFrame(STATUS_OK, logits.astype(np.float32), crc=frame.crc)

    def handle_one(self, reader: BinaryIO) -> bytes | None:
        """Read one request from ``reader`` and return the encoded response (None at clean EOF).

        A frame whose header cannot be trusted (bad magic, version, flags or
        channel count) is answered with status 1; only its 12 header bytes are
        consumed because its declared length is meaningless.
        """
        head = _read_exact(reader, _REQ_HEADER.size, allow_eof=True)
        if head is None:
            return None
        try:
            version, flags, height, width, bpp = _parse_req_header(head)
        except (BadMagic, BadVersion, BadFrame):
            return encode_logits(LogitFrame(STATUS_BAD_REQUEST, np.zeros(0, np.float32)))
        payload = _read_exact(reader, 3 * height * width * bpp)
        frame = _build_prompt(version, flags, height, width, payload)
        return encode_logits(self.classify(frame))

    def serve_stream(self, reader: BinaryIO, writer: BinaryIO) -> None:
        """Strict request/response alternation until the peer closes the stream."""
        while True:
            try:
                out = self.handle_one(reader)
            except Truncated:
                return
            if out is None:
                return
            writer.write(out)
            writer.flush()

    def handle_bytes(self, raw: bytes) -> bytes:
        """Answer every frame in ``raw`` (in-process transport)."""
        out = io.BytesIO()
        self.serve_stream(io.BytesIO(raw), out)
        return out.getvalue()


def load_server_model(path, config: EncoderConfig, num_classes: int) -> tuple[FrozenEncoder, Classifier]:
    """Load ``enc.*`` and ``cls.weight``; any prompt-source tensor is refused."""
    entries = checkpoint.load(path)
    bad = [n for n in entries if n.startswith(SERVER_FORBIDDEN_PREFIXES)]
    if bad:
        raise BadCheckpoint(f"server checkpoint must not contain prompt-source tensors: {bad[:3]}")
    enc = FrozenEncoder(config)
    enc.load_entries(entries)
    if "cls.weight" not in entries:
        raise BadCheckpoint("missing tensor 'cls.weight'")
    classifier = Classifier(num_classes, config.embed_dim)
    w = entries["cls.weight"]
    if w.data.shape != classifier.weight.shape:
        raise BadCheckpoint(f"cls.weight: shape {w.data.shape} != {classifier.weight.shape}")
    classifier.weight.data = w.data.astype(np.float32)
    classifier.weight.freeze()
    return enc, classifier


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        self.server.model.serve_stream(self.rfile, self.wfile)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def serve(model: InferenceServer, endpoint: str) -> _TCPServer:
    """Bind ``endpoint`` and return the server (call ``serve_forever`` or use ``start_server``)."""
    try:
        srv = _TCPServer(parse_endpoint(endpoint), _Handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {endpoint}: {exc}") from exc
    srv.model = model
    return srv


def start_server(model: InferenceServer, endpoint: str = "127.0.0.1:0") -> tuple[_TCPServer, str]:
    """Serve on a background thread; returns the server and its bound ``host:port``."""
    srv = serve(model, endpoint)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    host, port = srv.server_address[:2]
    return srv, f"{host}:{port}"


# ---------------------------------------------------------------------------
# client side


class MemoryTransport:
    """In-process byte pipe straight into an InferenceServer."""

    def __init__(self, server: InferenceServer):
        self.server = server

    def request(self, raw: bytes, crc: bool = False) -> LogitFrame:
        return read_logit_frame(io.BytesIO(self.server.handle_bytes(raw)), crc)

    def close(self) -> None:
        pass


class SocketTransport:
    """One persistent TCP connection; one request in flight at a time."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.reader = self.sock.makefile("rb")

    def request(self, raw: bytes, crc: bool = False) -> LogitFrame:
        self.sock.sendall(raw)
        return read_logit_frame(self.reader, crc)

    def close(self) -> None:
        self.reader.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def to_u8(pixels: np.ndarray) -> np.ndarray:
    """Lossy quantisation used by the u8 mode: clip to [0, 1] and round to 1/255 steps."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def client_classify(image, source, inv: Inverter | None, endpoint, mode: str = "f32",
                    crc: bool = False) -> np.ndarray:
    """Prompts -> inverted patches -> composite image -> server logits.

    ``source`` is any prompt source (``None`` sends the plain image, K = 0).
    ``endpoint`` is a ``host:port`` string or an object with ``request``.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"client_classify takes one (3, H, W) image, got {img.shape}")
    if source is not None:
        if inv is None:
            raise ValueError("an Inverter is required when prompts are used")
        with T.no_grad():
            prompts = source(img)
        pixels = compose(img, invert_prompts(prompts, inv), inv.patch_size, inv.grid_w).pixels
    else:
        pixels = img
    if mode == "u8":
        pixels = to_u8(pixels)
    elif mode != "f32":
        raise ValueError(f"mode must be f32 or u8, got {mode!r}")
    raw = encode_prompt(PromptFrame(np.ascontiguousarray(pixels, dtype=pixels.dtype), crc=crc))
    transport = SocketTransport(endpoint) if isinstance(endpoint, str) else endpoint
    try:
        resp = transport.request(raw, crc)
    finally:
        if isinstance(endpoint, str):
            transport.close()
    if resp.status != STATUS_OK:
        raise ServerStatus(resp.status)
    return resp.logits


__all__ = [
    "PromptFrame", "LogitFrame", "encode_prompt", "decode_prompt", "encode_logits", "decode_logits",
    "read_logit_frame", "InferenceServer", "load_server_model", "serve", "start_server",
    "MemoryTransport", "SocketTransport", "client_classify", "to_u8", "parse_endpoint",
    "STATUS_OK", "STATUS_BAD_REQUEST", "STATUS_SHAPE_ERROR",
]
