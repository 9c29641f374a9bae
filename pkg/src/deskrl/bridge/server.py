"""Session service: one controlling client, any number of observers.

The server owns its sockets and threads; the only shared surfaces with the
session are the command mailbox (filled here, drained at step boundaries)
and immutable snapshots published by the session. Frame delivery is
best-effort latest-value at a throttled rate, so a slow client can never
stall training.
"""

from __future__ import annotations

import base64
import io
import logging
import queue
import socket
import threading
import time

import numpy as np
from PIL import Image

from ..env import EnvState, render
from ..orchestrator import SessionCommand
from .protocol import MessageDecoder, ProtocolError, encode_message, validate_message

log = logging.getLogger(__name__)


def _png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def state_summary(state: EnvState) -> dict:
    return {
        "effector_xy": [float(x) for x in state.effector_xy],
        "gripper": float(state.gripper),
        "object_xy": [float(x) for x in state.object_xy],
        "held": bool(state.held),
        "goal_xy": [float(x) for x in state.goal_xy],
    }


class _Client:
    SEND_QUEUE = 32

    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.role = "observer"
        self.seq = 0
        self.alive = True
        self.queue: queue.Queue = queue.Queue(maxsize=self.SEND_QUEUE)
        self.lock = threading.Lock()

    def enqueue(self, mtype: str, payload: dict):
        """Best-effort: drop the oldest pending message when the queue fills."""
        try:
            self.queue.put_nowait((mtype, payload))
        except queue.Full:
            try:
                self.queue.get_nowait()
            except queue.Empty:
                pass
            try:
                self.queue.put_nowait((mtype, payload))
            except queue.Full:
                pass

    def send_now(self, mtype: str, payload: dict):
        with self.lock:
            msg = {"type": mtype, "seq": self.seq, "payload": payload}
            self.seq += 1
            try:
                self.sock.sendall(encode_message(msg))
            except OSError:
                self.alive = False


class BridgeServer:
    """Serves the wire protocol for a training or demo-collection session.

    ``session`` must expose ``mailbox`` (queue of SessionCommand), ``mode``
    ("training" or "demo"), and a ``session_info()`` dict. The server doubles
    as the session's publisher.
    """

    def __init__(self, session, port: int = 0, frame_rate: float = 10.0):
        self.session = session
        self.frame_rate = frame_rate
        self._listener = socket.create_server(("127.0.0.1", port))
        self.port = self._listener.getsockname()[1]
        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._controller: _Client | None = None
        self._latest_frame: dict | None = None
        self._frame_lock = threading.Lock()
        self._running = False
        self._threads: list[threading.Thread] = []

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "BridgeServer":
        self._running = True
        for fn in (self._accept_loop, self._frame_pump):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("bridge listening on port %d", self.port)
        return self

    def stop(self):
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        with self._clients_lock:
            for c in self._clients:
                try:
                    c.sock.close()
                except OSError:
                    pass
            self._clients.clear()

    # -- publisher interface (called from the session thread) -----------------

    def publish_frame(self, frame: dict):
        with self._frame_lock:
            self._latest_frame = frame

    def publish_frame_now(self, frame: dict):
        """Lockstep delivery for teleop echoes."""
        payload = self._frame_payload(frame)
        self._broadcast("frame", payload)

    def publish_metrics(self, row: dict):
        self._broadcast("metrics", row)

    def publish_session_info(self, info: dict):
        payload = dict(info)
        payload.update(self.session.session_info())
        self._broadcast("session_info", payload)

    def publish_demo_ack(self, ack: dict):
        self._broadcast("demo_step_ack", ack)

    # -- internals ------------------------------------------------------------

    def _frame_payload(self, frame: dict) -> dict:
        payload = {k: v for k, v in frame.items() if k != "state"}
        state = frame.get("state")
        if state is not None:
            payload["state"] = state_summary(state)
            payload["image_png_b64"] = _png_b64(render(state))
            payload["display_png_b64"] = _png_b64(render(state, size=168))
        return payload

    def _broadcast(self, mtype: str, payload: dict):
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.enqueue(mtype, payload)

    def _frame_pump(self):
        interval = 1.0 / self.frame_rate if self.frame_rate > 0 else 0.1
        last_sent = None
        while self._running:
            time.sleep(interval)
            with self._frame_lock:
                frame = self._latest_frame
            if frame is None or frame is last_sent:
                continue
            last_sent = frame
            self._broadcast("frame", self._frame_payload(frame))

    def _accept_loop(self):
        while self._running:
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            client = _Client(sock, addr)
            with self._clients_lock:
                self._clients.append(client)
            threading.Thread(target=self._client_recv, args=(client,), daemon=True).start()
            threading.Thread(target=self._client_send, args=(client,), daemon=True).start()

    def _client_send(self, client: _Client):
        while self._running and client.alive:
            try:
                mtype, payload = client.queue.get(timeout=0.25)
            except queue.Empty:
                continue
            client.send_now(mtype, payload)

    def _client_recv(self, client: _Client):
        decoder = MessageDecoder()
        try:
            while self._running and client.alive:
                chunk = client.sock.recv(65536)
                if not chunk:
                    break
                try:
                    messages = decoder.feed(chunk)
                except ProtocolError as err:
                    client.send_now("error", {"reason": str(err)})
                    decoder = MessageDecoder()  # resync on a fresh stream state
                    continue
                for msg in messages:
                    self._handle_message(client, msg)
        except OSError:
            pass
        finally:
            self._drop_client(client)

    def _drop_client(self, client: _Client):
        client.alive = False
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)
            if self._controller is client:
                self._controller = None
                # A vanished operator mid-demo must not leave a half recorded
                # trajectory behind.
                if getattr(self.session, "mode", "") == "demo":
                    self.session.mailbox.put(SessionCommand("end_demo", {"discard": True}))
        try:
            client.sock.close()
        except OSError:
            pass

    def _handle_message(self, client: _Client, msg: dict):
        try:
            validate_message(msg)
        except ProtocolError as err:
            client.send_now("error", {"reason": str(err)})
            return
        if msg["type"] != "command":
            client.send_now("error", {"reason": f"clients send only commands, got {msg['type']!r}"})
            return
        payload = msg["payload"]
        kind = payload["kind"]
        if kind == "hello":
            self._handle_hello(client, payload)
            return
        if client.role != "controller":
            client.send_now("error", {"reason": "only the controlling client may send commands"})
            return
        args = {k: v for k, v in payload.items() if k != "kind"}
        try:
            cmd = SessionCommand(kind, args)
        except ValueError as err:
            client.send_now("error", {"reason": str(err)})
            return
        self.session.mailbox.put(cmd)

    def _handle_hello(self, client: _Client, payload: dict):
        wanted = payload.get("role", "observer")
        status = "ok"
        with self._clients_lock:
            if wanted == "controller":
                if self._controller is None or not self._controller.alive:
                    self._controller = client
                    client.role = "controller"
                else:
                    status = "controller_busy"
        info = {"event": "hello", "role": client.role, "status": status}
        info.update(self.session.session_info())
        client.send_now("session_info", info)


def serve(session, port: int = 0, frame_rate: float = 10.0) -> BridgeServer:
    """Start the service for an existing session and return its handle."""
    return BridgeServer(session, port=port, frame_rate=frame_rate).start()
