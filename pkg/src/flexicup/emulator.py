"""TCP device emulator: streams frames and telemetry, executes commands.

One client per session. A session interleaves two activities on a single
loop: periodic FRAME/STATE emission and command handling, so every message
goes out whole and a command's ACK precedes any frame rendered after it.
"""
from __future__ import annotations

import logging
import os
import select
import socket
import threading
import time

from . import protocol as P
from .device import DeviceSimulator, WorkspaceError
from .scene import Pose, Scene

log = logging.getLogger(__name__)

ENDPOINT_ENV = "FLEXICUP_ENDPOINT"
DEFAULT_ENDPOINT = "127.0.0.1:47600"


def parse_endpoint(endpoint: str | None = None) -> tuple[str, int]:
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


class EmulatorSession:
    def __init__(self, conn: socket.socket, sim: DeviceSimulator, state_hz: float = 10.0):
        self.conn = conn
        self.sim = sim
        self.state_hz = state_hz
        self.decoder = P.StreamDecoder()
        self.frame_seq = 0
        self.state_seq = 0
        self.frames_sent = 0
        self.commands = 0
        self._t0 = time.monotonic()

    def _send(self, mtype, seq, payload=b""):
        self.conn.sendall(P.encode_message(mtype, seq, payload))

    def _now_us(self) -> int:
        return int((time.monotonic() - self._t0) * 1e6)

    def send_frame(self):
        self.frame_seq += 1
        frame = self.sim.render(self.frame_seq, self._now_us())
        self._send(P.MsgType.FRAME, self.frame_seq, P.pack_frame(frame))
        self.sim.drain(1)
        self.frames_sent += 1

    def send_state(self):
        self.state_seq += 1
        self._send(P.MsgType.STATE, self.state_seq, P.pack_state(self.sim.state))

    def handle(self, msg: P.WireMessage):
        self.commands += 1
        t, pl = msg.msg_type, msg.payload
        try:
            if t in (P.MsgType.CMD_LED, P.MsgType.CMD_VALVE):
                if len(pl) != 1 or pl[0] > 1:
                    raise _Reject(P.ErrCode.MALFORMED, "flag payload must be one byte 0/1")
                (self.sim.set_led if t == P.MsgType.CMD_LED else self.sim.set_valve)(bool(pl[0]))
            elif t == P.MsgType.CMD_MOVE:
                if len(pl) != P.MOVE_PAYLOAD.size:
                    raise _Reject(P.ErrCode.MALFORMED, "move payload must be 4 doubles")
                try:
                    self.sim.move(*P.MOVE_PAYLOAD.unpack(pl))
                except WorkspaceError as e:
                    raise _Reject(P.ErrCode.OUT_OF_WORKSPACE, str(e)) from None
            elif t == P.MsgType.CMD_CAM:
                if len(pl) != P.CAM_PAYLOAD.size:
                    raise _Reject(P.ErrCode.MALFORMED, "camera payload must be <ddB>")
                try:
                    self.sim.set_camera(*P.CAM_PAYLOAD.unpack(pl))
                except ValueError as e:
                    raise _Reject(P.ErrCode.BAD_PARAMETER, str(e)) from None
            else:
                raise _Reject(P.ErrCode.UNSUPPORTED, f"{t.name} is not a command")
        except _Reject as r:
            self._send(P.MsgType.ERR, msg.seq, P.pack_err(r.code, t, r.reason))
            return
        # ACK carries the post-command state so callers need not wait for telemetry
        self._send(P.MsgType.ACK, msg.seq, bytes([int(t)]) + P.pack_state(self.sim.state))

    def run(self, stop: threading.Event | None = None):
        now = time.monotonic()
        next_frame = now
        next_state = now
        conn = self.conn
        try:
            while stop is None or not stop.is_set():
                now = time.monotonic()
                timeout = max(0.0, min(next_frame, next_state) - now)
                if stop is not None:
                    timeout = min(timeout, 0.2)
                r, _, _ = select.select([conn], [], [], timeout)
                if r:
                    data = conn.recv(1 << 16)
                    if not data:
                        break
                    for msg in self.decoder.feed(data):
                        self.handle(msg)
                now = time.monotonic()
                if now >= next_frame:
                    self.send_frame()
                    period = 1.0 / self.sim.fps
                    next_frame += period
                    if next_frame < now:
                        # fell behind: drop the missed slots rather than bursting
                        next_frame = now + period
                if now >= next_state:
                    self.send_state()
                    next_state += 1.0 / self.state_hz
                    if next_state < now:
                        next_state = now + 1.0 / self.state_hz
        except (ConnectionError, OSError) as e:
            log.debug("session ended: %s", e)
        finally:
            try:
                conn.close()
            except OSError:
                pass


class _Reject(Exception):
    def __init__(self, code, reason):
        super().__init__(reason)
        self.code = code
        self.reason = reason


class EmulatorServer:
    """Accepts sessions one at a time; each session starts from a fresh device."""

    def __init__(self, scene: Scene, config_id: str = "I", host: str = "127.0.0.1", port: int = 0, *,
                 fps: float = 30.0, state_hz: float = 10.0, start_pose: Pose | None = None,
                 intrinsics=None, suction=None, max_sessions: int | None = None):
        self.scene = scene
        self.config_id = config_id
        self.fps = fps
        self.state_hz = state_hz
        self.start_pose = start_pose
        self.intrinsics = intrinsics
        self.suction = suction
        self.max_sessions = max_sessions
        self.sessions: list[EmulatorSession] = []
        self._stop = threading.Event()
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def new_simulator(self) -> DeviceSimulator:
        return DeviceSimulator(self.scene, self.config_id, suction=self.suction, intrinsics=self.intrinsics,
                               start_pose=self.start_pose, fps=self.fps)

    def serve_forever(self):
        served = 0
        while not self._stop.is_set():
            if self.max_sessions is not None and served >= self.max_sessions:
                break
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setblocking(True)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = EmulatorSession(conn, self.new_simulator(), self.state_hz)
            self.sessions.append(session)
            session.run(self._stop)
            served += 1

    def start(self) -> "EmulatorServer":
        self._thread = threading.Thread(target=self.serve_forever, name="flexicup-emulator", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def emulator_serve(scene: Scene, configs: str = "I", endpoint: str | None = None, **kw) -> EmulatorServer:
    """Start an emulator listening on ``endpoint`` (host:port) in a background thread."""
    host, port = parse_endpoint(endpoint)
    return EmulatorServer(scene, configs, host, port, **kw).start()


