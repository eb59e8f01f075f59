"""Client side of the device link.

A background reader demultiplexes the stream into the latest frame, the
latest telemetry and command responses. Requests are serialized per
connection, so one client may be shared between threads.
"""
from __future__ import annotations

import itertools
import socket
import threading
import time

from . import protocol as P
from .emulator import parse_endpoint


class SessionError(ConnectionError):
    pass


class CommandError(RuntimeError):
    def __init__(self, code: int, cmd_type: int, reason: str):
        super().__init__(f"command 0x{cmd_type:02x} rejected (0x{code:02x}): {reason}")
        self.code = code
        self.cmd_type = cmd_type
        self.reason = reason


class DeviceClient:
    def __init__(self, endpoint: str | None = None, timeout: float = 1.0, connect_timeout: float = 5.0):
        host, port = parse_endpoint(endpoint)
        self.timeout = timeout
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._cond = threading.Condition()
        self._req_lock = threading.Lock()
        self._seq = itertools.count(1)
        self._responses: dict[int, P.WireMessage] = {}
        self._frame = None
        self._last_seq = 0
        self._state = None
        self._closed = False
        self._error: Exception | None = None
        self.frames_received = 0
        self.corrupt = 0
        self._reader = threading.Thread(target=self._read_loop, name="flexicup-client", daemon=True)
        self._reader.start()

    def _read_loop(self):
        dec = P.StreamDecoder()
        try:
            while True:
                data = self._sock.recv(1 << 20)
                if not data:
                    break
                msgs = dec.feed(data)
                if not msgs:
                    continue
                with self._cond:
                    for m in msgs:
                        self._dispatch(m)
                    self.corrupt = dec.corrupt
                    self._cond.notify_all()
        except OSError as e:
            self._error = e
        finally:
            with self._cond:
                self._closed = True
                self._cond.notify_all()

    def _dispatch(self, m: P.WireMessage):
        if m.msg_type == P.MsgType.FRAME:
            self._frame = m
            self.frames_received += 1
        elif m.msg_type == P.MsgType.STATE:
            self._state = m.payload
        elif m.msg_type in (P.MsgType.ACK, P.MsgType.ERR):
            # frames queued before the response predate the command's effect
            self._frame = None
            self._responses[m.seq] = m
            if m.msg_type == P.MsgType.ACK and len(m.payload) == 1 + P.STATE_PAYLOAD.size:
                self._state = m.payload[1:]

    def _wait(self, predicate, timeout):
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        with self._cond:
            while True:
                r = predicate()
                if r is not None:
                    return r
                if self._closed:
                    raise SessionError(f"device link closed: {self._error or 'peer disconnected'}")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError("device link timed out")
                self._cond.wait(left)

    def request(self, msg_type, payload: bytes = b"", timeout: float | None = None) -> P.WireMessage:
        with self._req_lock:
            seq = next(self._seq)
            try:
                self._sock.sendall(P.encode_message(msg_type, seq, payload))
            except OSError as e:
                raise SessionError(str(e)) from e
            resp = self._wait(lambda: self._responses.pop(seq, None), timeout)
        if resp.msg_type == P.MsgType.ERR:
            raise CommandError(*P.unpack_err(resp.payload))
        return resp

    def set_led(self, on: bool):
        return self.request(P.MsgType.CMD_LED, P.pack_flag(on))

    def set_valve(self, open_: bool):
        return self.request(P.MsgType.CMD_VALVE, P.pack_flag(open_))

    def move(self, x_cm, y_cm, z_cm, tilt_deg=0.0):
        return self.request(P.MsgType.CMD_MOVE, P.pack_move(x_cm, y_cm, z_cm, tilt_deg))

    def set_camera(self, gain: float = 1.0, fps: float = 30.0, downscale: int = 1):
        return self.request(P.MsgType.CMD_CAM, P.pack_cam(gain, fps, downscale))

    def send(self, command):
        """Execute a controller command tuple such as ``("led", True)``."""
        kind, *args = command
        return {"led": self.set_led, "valve": self.set_valve, "move": self.move,
                "cam": self.set_camera}[kind](*args)

    def next_frame(self, timeout: float | None = None):
        """Most recent frame not yet delivered that was sent after the last command response."""
        def take():
            m = self._frame
            if m is None or m.seq <= self._last_seq:
                return None
            self._frame = None
            self._last_seq = m.seq
            return m
        return P.unpack_frame(self._wait(take, timeout).payload)

    def latest_state(self, timeout: float | None = None):
        """Newest device state, from telemetry or the last command acknowledgement."""
        return P.unpack_state(self._wait(lambda: self._state, timeout))

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=2)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_request(connection: DeviceClient, command):
    return connection.send(command)
