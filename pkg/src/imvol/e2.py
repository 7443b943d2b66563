"""Simulated near-RT RIC control loop between an xApp and an E2 node.

The xApp subscribes to periodic RRA reports (user state), runs its policy on
each report and answers with an RC control request carrying the allocation.
The E2 node validates the request, applies it to the environment and
acknowledges or rejects it.

Wire format, per frame: a 4-byte big-endian body length followed by a UTF-8
JSON object ``{"correlation_id", "msg_type", "payload"}`` serialized with
sorted keys and no whitespace, so equal messages encode to equal bytes.
"""

from __future__ import annotations

import json
import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .env import (AllocationAction, StepOutcome, SystemConfig, UserState, VolumetricEnv,
                  normalize_action)

HEADER = struct.Struct(">I")
MAX_CORRELATION_ID = 2 ** 64 - 1


class MsgType(str, Enum):
    SUBSCRIPTION_REQUEST = "SubscriptionRequest"
    SUBSCRIPTION_RESPONSE = "SubscriptionResponse"
    REPORT_INDICATION = "ReportIndication"
    CONTROL_REQUEST = "ControlRequest"
    CONTROL_ACK = "ControlAck"
    CONTROL_FAILURE = "ControlFailure"


class NeedMoreBytes(Exception):
    """The buffer ends before a complete frame."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class ProtocolError(Exception):
    """A frame is malformed or violates the message flow."""

    def __init__(self, reason: str, length: int = 0):
        super().__init__(f"{reason} (frame body of {length} bytes)")
        self.reason = reason
        self.length = length


# payload key -> validator, per message type
_SCHEMAS: dict[MsgType, dict[str, Callable[[object], bool]]] = {
    MsgType.SUBSCRIPTION_REQUEST: {
        "subscriber_id": lambda v: isinstance(v, str),
        "report_period": lambda v: type(v) is int and v >= 1,
    },
    MsgType.SUBSCRIPTION_RESPONSE: {
        "subscriber_id": lambda v: isinstance(v, str),
        "report_period": lambda v: type(v) is int and v >= 1,
        "accepted": lambda v: isinstance(v, bool),
    },
    MsgType.REPORT_INDICATION: {
        "slot": lambda v: type(v) is int and v >= 0,
        "states": lambda v: isinstance(v, list),
    },
    MsgType.CONTROL_REQUEST: {"action": lambda v: isinstance(v, dict)},
    MsgType.CONTROL_ACK: {},
    MsgType.CONTROL_FAILURE: {"reason": lambda v: isinstance(v, str)},
}


@dataclass(frozen=True)
class E2Message:
    msg_type: MsgType
    correlation_id: int
    payload: dict = field(default_factory=dict)

    def states(self) -> list[UserState]:
        return [UserState.from_dict(d) for d in self.payload["states"]]

    def action(self) -> AllocationAction:
        return AllocationAction.from_dict(self.payload["action"])


def subscription_request(cid: int, subscriber_id: str, report_period: int = 1) -> E2Message:
    return E2Message(MsgType.SUBSCRIPTION_REQUEST, cid,
                     {"subscriber_id": subscriber_id, "report_period": report_period})


def report_indication(cid: int, slot: int, states: Sequence[UserState]) -> E2Message:
    return E2Message(MsgType.REPORT_INDICATION, cid,
                     {"slot": slot, "states": [s.to_dict() for s in states]})


def control_request(cid: int, action: AllocationAction) -> E2Message:
    return E2Message(MsgType.CONTROL_REQUEST, cid, {"action": action.to_dict()})


def encode(msg: E2Message) -> bytes:
    body = json.dumps(
        {"msg_type": MsgType(msg.msg_type).value, "correlation_id": msg.correlation_id,
         "payload": msg.payload},
        sort_keys=True, separators=(",", ":"), allow_nan=False,
    ).encode("utf-8")
    return HEADER.pack(len(body)) + body


def _parse_body(body: bytes) -> E2Message:
    n = len(body)
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed body: {exc}", n) from None
    if not isinstance(doc, dict) or set(doc) != {"msg_type", "correlation_id", "payload"}:
        raise ProtocolError("body must hold exactly msg_type, correlation_id, payload", n)
    try:
        msg_type = MsgType(doc["msg_type"])
    except ValueError:
        raise ProtocolError(f"unknown msg_type {doc['msg_type']!r}", n) from None
    cid = doc["correlation_id"]
    if type(cid) is not int or not 0 <= cid <= MAX_CORRELATION_ID:
        raise ProtocolError("correlation_id must be an unsigned 64-bit integer", n)
    payload = doc["payload"]
    schema = _SCHEMAS[msg_type]
    if not isinstance(payload, dict) or set(payload) != set(schema):
        raise ProtocolError(f"{msg_type.value} payload keys must be {sorted(schema)}", n)
    for key, ok in schema.items():
        if not ok(payload[key]):
            raise ProtocolError(f"{msg_type.value} payload field {key!r} is invalid", n)
    return E2Message(msg_type, cid, payload)


def decode_frame(data: bytes) -> tuple[E2Message, int]:
    """Decode the first frame of ``data``; returns the message and bytes consumed."""
    if len(data) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(data))
    (length,) = HEADER.unpack_from(data)
    end = HEADER.size + length
    if len(data) < end:
        raise NeedMoreBytes(end - len(data))
    return _parse_body(bytes(data[HEADER.size:end])), end


def decode(data: bytes) -> E2Message:
    """Inverse of :func:`encode` for exactly one frame."""
    msg, used = decode_frame(data)
    if used != len(data):
        raise ProtocolError("trailing bytes after frame", len(data) - HEADER.size)
    return msg


class FrameDecoder:
    """Incremental decoder; tolerates arbitrary chunk boundaries."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[E2Message]:
        self._buf += chunk
        out = []
        while True:
            try:
                msg, used = decode_frame(self._buf)
            except NeedMoreBytes:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


# --- transports -------------------------------------------------------------


class _Link:
    def __init__(self):
        self.decoder = FrameDecoder()
        self.inbox: deque[E2Message] = deque()

    def send(self, msg: E2Message) -> None:
        self._write(encode(msg))

    def recv(self) -> E2Message:
        while not self.inbox:
            chunk = self._read()
            if not chunk:
                raise ProtocolError("peer closed the channel", self.decoder.pending)
            self.inbox.extend(self.decoder.feed(chunk))
        return self.inbox.popleft()

    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class _InprocLink(_Link):
    def __init__(self, outgoing: deque, incoming: deque):
        super().__init__()
        self._out, self._in = outgoing, incoming

    def _write(self, data: bytes) -> None:
        self._out.append(data)

    def _read(self) -> bytes:
        return self._in.popleft() if self._in else b""


class _SocketLink(_Link):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock

    def _write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def _read(self) -> bytes:
        return self.sock.recv(65536)

    def close(self) -> None:
        self.sock.close()


def inproc_pair() -> tuple[_Link, _Link]:
    """In-process duplex byte channel: ``(xapp_side, ran_side)``."""
    a_to_b, b_to_a = deque(), deque()
    return _InprocLink(a_to_b, b_to_a), _InprocLink(b_to_a, a_to_b)


def tcp_loopback_pair(port: int = 0) -> tuple[_Link, _Link]:
    """Connected localhost stream sockets; ``port=0`` picks a free port."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server:
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind(("127.0.0.1", port))
        server.listen(1)
        client = socket.create_connection(server.getsockname())
        accepted, _ = server.accept()
    for s in (client, accepted):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return _SocketLink(client), _SocketLink(accepted)


def open_transport(mode: str = "inproc", port: int = 0) -> tuple[_Link, _Link]:
    if mode == "inproc":
        return inproc_pair()
    if mode == "tcp-loopback":
        return tcp_loopback_pair(port)
    raise ValueError(f"unknown transport {mode!r}")


# --- endpoint logic ---------------------------------------------------------


@dataclass
class SubscriptionState:
    active: bool = False
    report_period: int = 1
    subscriber_id: str = ""


def ran_endpoint_step(sub: SubscriptionState, slot: int, states: Sequence[UserState],
                      correlation_id: int = 0) -> E2Message | None:
    """Report indication for ``slot`` if the subscription is due, else ``None``."""
    if not sub.active or slot % sub.report_period != 0:
        return None
    return report_indication(correlation_id, slot, states)


def xapp_control_round(policy, indication: E2Message, config: SystemConfig,
                       correlation_id: int, explore: bool = False
                       ) -> tuple[E2Message, np.ndarray]:
    """Run ``policy`` on a report and wrap the normalized allocation in a control request.

    Returns the request and the raw policy output.
    """
    if indication.msg_type is not MsgType.REPORT_INDICATION:
        raise ProtocolError(f"expected ReportIndication, got {indication.msg_type.value}")
    states = indication.states()
    if len(states) != config.num_users:
        raise ProtocolError(f"indication carries {len(states)} users, config expects "
                            f"{config.num_users}")
    raw = np.asarray(policy.act(states, config, explore), dtype=np.float64)
    return control_request(correlation_id, normalize_action(raw, config)), raw


def ran_apply_control(req: E2Message, config: SystemConfig) -> E2Message:
    """Validate a control request; ControlAck on success, ControlFailure with a reason otherwise."""
    cid = req.correlation_id
    if req.msg_type is not MsgType.CONTROL_REQUEST:
        return E2Message(MsgType.CONTROL_FAILURE, cid,
                         {"reason": f"unexpected {req.msg_type.value}"})
    try:
        action = req.action()
    except (KeyError, TypeError, ValueError) as exc:
        return E2Message(MsgType.CONTROL_FAILURE, cid, {"reason": f"malformed action: {exc}"})
    reasons = action.violations(config)
    if reasons:
        return E2Message(MsgType.CONTROL_FAILURE, cid, {"reason": "; ".join(reasons)})
    return E2Message(MsgType.CONTROL_ACK, cid, {})


class XApp:
    """Policy endpoint on the RIC side; correlation ids strictly increase."""

    def __init__(self, policy, config: SystemConfig, link: _Link, subscriber_id: str = "xr-xapp"):
        self.policy = policy
        self.config = config
        self.link = link
        self.subscriber_id = subscriber_id
        self._next_id = 1
        self.last_raw: np.ndarray | None = None
        self.subscribed = False

    def next_id(self) -> int:
        cid = self._next_id
        self._next_id += 1
        return cid

    def subscribe(self, report_period: int = 1) -> None:
        self.link.send(subscription_request(self.next_id(), self.subscriber_id, report_period))

    def on_subscription_response(self, msg: E2Message) -> None:
        if msg.msg_type is not MsgType.SUBSCRIPTION_RESPONSE:
            raise ProtocolError(f"expected SubscriptionResponse, got {msg.msg_type.value}")
        self.subscribed = bool(msg.payload["accepted"])

    def control_round(self, indication: E2Message, explore: bool = False) -> E2Message:
        if not self.subscribed:
            raise ProtocolError("report received without an active subscription")
        req, self.last_raw = xapp_control_round(self.policy, indication, self.config,
                                                self.next_id(), explore)
        self.link.send(req)
        return req


class E2Node:
    """RAN-side endpoint owning the environment."""

    def __init__(self, env: VolumetricEnv, link: _Link):
        self.env = env
        self.link = link
        self.subscription = SubscriptionState()
        self.last_action: AllocationAction | None = None
        self._report_id = 0

    def on_subscription_request(self, msg: E2Message) -> None:
        if msg.msg_type is not MsgType.SUBSCRIPTION_REQUEST:
            raise ProtocolError(f"expected SubscriptionRequest, got {msg.msg_type.value}")
        period = msg.payload["report_period"]
        sub_id = msg.payload["subscriber_id"]
        accepted = not (self.subscription.active and self.subscription.subscriber_id == sub_id)
        if accepted:
            self.subscription = SubscriptionState(True, period, sub_id)
        self.link.send(E2Message(MsgType.SUBSCRIPTION_RESPONSE, msg.correlation_id,
                                 {"subscriber_id": sub_id, "report_period": period,
                                  "accepted": accepted}))

    def report(self, slot: int) -> E2Message | None:
        msg = ran_endpoint_step(self.subscription, slot, self.env.states, self._report_id)
        if msg is not None:
            self._report_id += 1
            self.link.send(msg)
        return msg

    def on_control(self, req: E2Message) -> E2Message:
        reply = ran_apply_control(req, self.env.config)
        if reply.msg_type is MsgType.CONTROL_ACK:
            self.last_action = req.action()
        self.link.send(reply)
        return reply

    def advance(self) -> tuple[list[UserState], StepOutcome | None, bool]:
        """Apply the most recently accepted allocation for one slot."""
        if self.last_action is None:
            return list(self.env.states), None, False
        return self.env.step(self.last_action)


@dataclass
class SlotRecord:
    states: list[UserState]
    raw_action: np.ndarray | None
    outcome: StepOutcome | None
    next_states: list[UserState]
    done: bool


class E2Session:
    """Drives an xApp and an E2 node in lockstep over a byte channel."""

    def __init__(self, policy, config: SystemConfig, seed: int, transport: str = "inproc",
                 port: int = 0, report_period: int = 1):
        xapp_link, ran_link = open_transport(transport, port)
        self.xapp = XApp(policy, config, xapp_link)
        self.node = E2Node(VolumetricEnv(config, seed), ran_link)
        self.xapp.subscribe(report_period)
        self.node.on_subscription_request(ran_link.recv())
        self.xapp.on_subscription_response(xapp_link.recv())

    def reset(self) -> list[UserState]:
        self.node.last_action = None
        return self.node.env.reset()

    def run_slot(self, explore: bool = False) -> SlotRecord:
        env = self.node.env
        states = list(env.states)
        raw = None
        if self.node.report(env.t) is not None:
            self.xapp.control_round(self.xapp.link.recv(), explore)
            raw = self.xapp.last_raw
            reply = self.node.on_control(self.node.link.recv())
            ack = self.xapp.link.recv()
            if ack.correlation_id != reply.correlation_id:
                raise ProtocolError("acknowledgement does not echo the request id")
        next_states, outcome, done = self.node.advance()
        return SlotRecord(states, raw, outcome, next_states, done)

    def close(self) -> None:
        self.xapp.link.close()
        self.node.link.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
