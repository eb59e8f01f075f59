"""Byte-exact framing for the device link.

Layout (little-endian)::

    magic 'FC' | version u8 | msg_type u8 | seq u32 | payload_len u32 | payload | crc32 u32

The CRC is the IEEE CRC-32 (reflected poly 0xEDB88320, init and final xor
0xFFFFFFFF) over everything from the version byte through the payload.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"FC"
VERSION = 0x01
MAX_PAYLOAD = 2_000_000
HEADER = struct.Struct("<2sBBII")
CRC = struct.Struct("<I")
HEADER_LEN = HEADER.size  # 12
OVERHEAD = HEADER_LEN + CRC.size


class MsgType(IntEnum):
    FRAME = 0x01
    STATE = 0x02
    CMD_LED = 0x10
    CMD_VALVE = 0x11
    CMD_CAM = 0x12
    CMD_MOVE = 0x13
    ACK = 0x20
    ERR = 0x21


class ErrCode(IntEnum):
    MALFORMED = 0x01
    OUT_OF_WORKSPACE = 0x02
    BAD_PARAMETER = 0x03
    UNSUPPORTED = 0x04


COMMANDS = frozenset({MsgType.CMD_LED, MsgType.CMD_VALVE, MsgType.CMD_CAM, MsgType.CMD_MOVE})
_KNOWN = frozenset(int(t) for t in MsgType)


class ProtocolError(Exception):
    pass


class EncodeError(ProtocolError):
    pass


class NeedMoreData(ProtocolError):
    """The buffer holds no complete message yet."""

    def __init__(self, remaining: bytes = b""):
        super().__init__("incomplete message")
        self.remaining = remaining


class CorruptFrame(ProtocolError):
    """A candidate message failed validation; ``remaining`` resumes at the next magic."""

    def __init__(self, reason: str, remaining: bytes = b""):
        super().__init__(reason)
        self.remaining = remaining


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    seq: int
    payload: bytes = b""


def encode_message(msg_type, seq: int, payload: bytes = b"") -> bytes:
    if int(msg_type) not in _KNOWN:
        raise EncodeError(f"unknown message type 0x{int(msg_type):02x}")
    if len(payload) > MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= seq <= 0xFFFFFFFF:
        raise EncodeError(f"seq {seq} does not fit in 32 bits")
    head = HEADER.pack(MAGIC, VERSION, int(msg_type), seq, len(payload))
    crc = zlib.crc32(payload, zlib.crc32(head[2:]))
    return b"".join((head, payload, CRC.pack(crc)))


def decode_message(buf: bytes) -> tuple[WireMessage, bytes]:
    """Return the first valid message in ``buf`` and the bytes after it.

    Leading garbage is skipped up to the first magic. Raises
    :class:`NeedMoreData` when no complete message is available and
    :class:`CorruptFrame` when the message at the first magic is invalid.
    """
    buf = bytes(buf)
    start = buf.find(MAGIC)
    if start < 0:
        # keep a trailing 'F' that may begin a magic
        raise NeedMoreData(buf[-1:] if buf.endswith(MAGIC[:1]) else b"")
    buf = buf[start:]
    if len(buf) < HEADER_LEN:
        raise NeedMoreData(buf)
    _, version, mtype, seq, plen = HEADER.unpack_from(buf)

    def corrupt(reason):
        nxt = buf.find(MAGIC, 1)
        return CorruptFrame(reason, buf[nxt:] if nxt >= 0 else buf[-1:] if buf.endswith(MAGIC[:1]) else b"")

    if version != VERSION:
        raise corrupt(f"unsupported version {version}")
    if mtype not in _KNOWN:
        raise corrupt(f"unknown message type 0x{mtype:02x}")
    if plen > MAX_PAYLOAD:
        raise corrupt(f"payload length {plen} exceeds limit")
    end = HEADER_LEN + plen + CRC.size
    if len(buf) < end:
        raise NeedMoreData(buf)
    body = buf[2:HEADER_LEN + plen]
    (crc,) = CRC.unpack_from(buf, HEADER_LEN + plen)
    if zlib.crc32(body) != crc:
        raise corrupt("crc mismatch")
    return WireMessage(MsgType(mtype), seq, buf[HEADER_LEN:HEADER_LEN + plen]), buf[end:]


class StreamDecoder:
    """Incremental decoder for a byte stream; corrupt frames are counted and skipped."""

    def __init__(self):
        self._buf = bytearray()
        self.corrupt = 0

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while True:
            try:
                msg, rest = decode_message(self._buf)
            except NeedMoreData as e:
                self._buf = bytearray(e.remaining)
                return out
            except CorruptFrame as e:
                self.corrupt += 1
                self._buf = bytearray(e.remaining)
                continue
            out.append(msg)
            self._buf = bytearray(rest)


# --- payload codecs -------------------------------------------------------

FRAME_HEADER = struct.Struct("<IQBxHHHHHH")
STATE_PAYLOAD = struct.Struct("<8dBBd")
CAM_PAYLOAD = struct.Struct("<ddB")
MOVE_PAYLOAD = struct.Struct("<4d")

MODES = ("vacuum", "bernoulli")
CONFIG_IDS = ("I", "II", "III", "IV")


def pack_frame(frame) -> bytes:
    cx, cy = frame.center_px
    head = FRAME_HEADER.pack(frame.seq, frame.timestamp_us, int(frame.modality), frame.width_px,
                             frame.height_px, cx, cy, frame.central_radius_px, frame.peripheral_outer_px)
    return head + np.ascontiguousarray(frame.pixels, dtype=np.uint8).tobytes()


def unpack_frame(payload: bytes):
    from .sensor import Frame, Modality
    if len(payload) < FRAME_HEADER.size:
        raise ProtocolError("short frame payload")
    seq, ts, mod, w, h, cx, cy, rc, ro = FRAME_HEADER.unpack_from(payload)
    raw = payload[FRAME_HEADER.size:]
    if len(raw) != w * h:
        raise ProtocolError(f"frame raster has {len(raw)} bytes, expected {w * h}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return Frame(width_px=w, height_px=h, pixels=pixels, modality=Modality(mod), seq=seq,
                 timestamp_us=ts, center_px=(cx, cy), central_radius_px=rc, peripheral_outer_px=ro)


def pack_state(state) -> bytes:
    return STATE_PAYLOAD.pack(*state.vector(), MODES.index(state.mode),
                              CONFIG_IDS.index(state.config_id), state.battery_fraction)


def unpack_state(payload: bytes):
    from .state import DeviceState
    x, y, z, tilt, led, valve, p, att, mode, cid, batt = STATE_PAYLOAD.unpack(payload)
    return DeviceState(x_cm=x, y_cm=y, z_cm=z, tilt_deg=tilt, led_on=bool(led), valve_open=bool(valve),
                       pressure_kpa=p, attached=bool(att), mode=MODES[mode], config_id=CONFIG_IDS[cid],
                       battery_fraction=batt)


def pack_flag(on: bool) -> bytes:
    return bytes([1 if on else 0])


def pack_cam(gain: float, fps: float, downscale: int) -> bytes:
    return CAM_PAYLOAD.pack(gain, fps, downscale)


def pack_move(x: float, y: float, z: float, tilt: float) -> bytes:
    return MOVE_PAYLOAD.pack(x, y, z, tilt)


def pack_err(code: int, cmd_type: int, reason: str = "") -> bytes:
    return bytes([int(code), int(cmd_type) & 0xFF]) + reason.encode("utf-8")


def unpack_err(payload: bytes) -> tuple[int, int, str]:
    if len(payload) < 2:
        return ErrCode.MALFORMED, 0, ""
    return payload[0], payload[1], payload[2:].decode("utf-8", "replace")
