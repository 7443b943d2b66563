import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imvol.e2 import (E2Message, E2Node, E2Session, FrameDecoder, MsgType, NeedMoreBytes,
                      ProtocolError, SubscriptionState, XApp, control_request, decode,
                      decode_frame, encode, inproc_pair, open_transport, ran_apply_control,
                      ran_endpoint_step, report_indication, subscription_request,
                      xapp_control_round)
from imvol.env import AllocationAction, SystemConfig, VolumetricEnv, normalize_action, reset
from imvol.policies import AvgPolicy

finite = st.floats(-1e6, 1e6, allow_nan=False)
json_leaf = st.one_of(st.none(), st.booleans(), st.integers(-2 ** 53, 2 ** 53), finite,
                      st.text(max_size=8))


def raw_frame(doc) -> bytes:
    body = json.dumps(doc).encode()
    return struct.pack(">I", len(body)) + body


@st.composite
def messages(draw):
    kind = draw(st.sampled_from(list(MsgType)))
    cid = draw(st.integers(0, 2 ** 64 - 1))
    if kind is MsgType.SUBSCRIPTION_REQUEST:
        payload = {"subscriber_id": draw(st.text(max_size=10)),
                   "report_period": draw(st.integers(1, 50))}
    elif kind is MsgType.SUBSCRIPTION_RESPONSE:
        payload = {"subscriber_id": draw(st.text(max_size=10)),
                   "report_period": draw(st.integers(1, 50)), "accepted": draw(st.booleans())}
    elif kind is MsgType.REPORT_INDICATION:
        payload = {"slot": draw(st.integers(0, 10 ** 6)),
                   "states": draw(st.lists(st.dictionaries(st.text(max_size=4), json_leaf,
                                                           max_size=3), max_size=4))}
    elif kind is MsgType.CONTROL_REQUEST:
        payload = {"action": draw(st.dictionaries(st.text(max_size=4),
                                                  st.lists(finite, max_size=4), max_size=5))}
    elif kind is MsgType.CONTROL_ACK:
        payload = {}
    else:
        payload = {"reason": draw(st.text(max_size=30))}
    return E2Message(kind, cid, payload)


@settings(max_examples=300)
@given(messages())
def test_round_trip(msg):
    data = encode(msg)
    assert decode(data) == msg
    assert encode(decode(data)) == data
    (length,) = struct.unpack(">I", data[:4])
    assert length == len(data) - 4


@given(st.lists(messages(), min_size=1, max_size=5), st.data())
def test_chunked_stream_decodes_in_order(msgs, data):
    stream = b"".join(encode(m) for m in msgs)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=8)))
    dec, out, prev = FrameDecoder(), [], 0
    for c in cuts + [len(stream)]:
        out += dec.feed(stream[prev:c])
        prev = c
    assert out == msgs and dec.pending == 0


def test_encoding_is_canonical():
    msg = E2Message(MsgType.CONTROL_FAILURE, 7, {"reason": "x"})
    body = encode(msg)[4:]
    assert body == b'{"correlation_id":7,"msg_type":"ControlFailure","payload":{"reason":"x"}}'


def test_truncated_frames_need_more_bytes():
    data = encode(E2Message(MsgType.CONTROL_ACK, 1, {}))
    with pytest.raises(NeedMoreBytes) as exc:
        decode_frame(data[:2])
    assert exc.value.needed == 2
    with pytest.raises(NeedMoreBytes) as exc:
        decode_frame(data[:-3])
    assert exc.value.needed == 3


@pytest.mark.parametrize("doc, fragment", [
    ({"msg_type": "Bogus", "correlation_id": 1, "payload": {}}, "unknown msg_type"),
    ({"msg_type": "ControlAck", "correlation_id": -1, "payload": {}}, "correlation_id"),
    ({"msg_type": "ControlAck", "correlation_id": 2 ** 64, "payload": {}}, "correlation_id"),
    ({"msg_type": "ControlAck", "correlation_id": 1.5, "payload": {}}, "correlation_id"),
    ({"msg_type": "ControlAck", "correlation_id": 1}, "exactly"),
    ({"msg_type": "ControlAck", "correlation_id": 1, "payload": {"x": 1}}, "payload keys"),
    ({"msg_type": "ControlFailure", "correlation_id": 1, "payload": {"reason": 3}}, "invalid"),
    ({"msg_type": "ReportIndication", "correlation_id": 1,
      "payload": {"slot": -1, "states": []}}, "invalid"),
    ([1, 2], "exactly"),
])
def test_malformed_frames_raise(doc, fragment):
    data = raw_frame(doc)
    with pytest.raises(ProtocolError) as exc:
        decode(data)
    assert fragment in exc.value.reason
    assert exc.value.length == len(data) - 4


def test_non_json_body_and_trailing_bytes():
    with pytest.raises(ProtocolError):
        decode(struct.pack(">I", 3) + b"\xff\xfe{")
    data = encode(E2Message(MsgType.CONTROL_ACK, 1, {}))
    with pytest.raises(ProtocolError):
        decode(data + b"\x00")


def test_report_period_gating():
    states = reset(SystemConfig(num_users=2), 0)
    sub = SubscriptionState(active=True, report_period=3)
    due = [ran_endpoint_step(sub, t, states) is not None for t in range(7)]
    assert due == [True, False, False, True, False, False, True]
    assert ran_endpoint_step(SubscriptionState(), 0, states) is None


def test_control_round_produces_valid_request():
    cfg = SystemConfig(num_users=4)
    states = reset(cfg, 1)
    req, raw = xapp_control_round(AvgPolicy(), report_indication(0, 0, states), cfg, 5)
    assert req.msg_type is MsgType.CONTROL_REQUEST and req.correlation_id == 5
    assert np.array_equal(raw, np.ones(20))
    assert req.action() == normalize_action(raw, cfg)
    ack = ran_apply_control(decode(encode(req)), cfg)
    assert ack.msg_type is MsgType.CONTROL_ACK and ack.correlation_id == 5


def test_control_round_rejects_wrong_inputs():
    cfg = SystemConfig(num_users=4)
    with pytest.raises(ProtocolError):
        xapp_control_round(AvgPolicy(), E2Message(MsgType.CONTROL_ACK, 1, {}), cfg, 1)
    with pytest.raises(ProtocolError):
        xapp_control_round(AvgPolicy(), report_indication(0, 0, reset(cfg, 0)[:3]), cfg, 1)


@pytest.mark.parametrize("action, fragment", [
    (AllocationAction(b_ul=[40], f=[10], b_dl=[40], p_dl=[11], phi=[0.5]), "power budget"),
    (AllocationAction(b_ul=[40], f=[10], b_dl=[40], p_dl=[10], phi=[1.5]), "hit ratio"),
    (AllocationAction(b_ul=[50], f=[10], b_dl=[40], p_dl=[10], phi=[0.5]), "budget"),
])
def test_apply_control_rejects_violations(action, fragment):
    reply = ran_apply_control(control_request(9, action), SystemConfig(num_users=1))
    assert reply.msg_type is MsgType.CONTROL_FAILURE and reply.correlation_id == 9
    assert fragment in reply.payload["reason"]


def test_apply_control_rejects_malformed_action_and_wrong_type():
    cfg = SystemConfig(num_users=1)
    reply = ran_apply_control(E2Message(MsgType.CONTROL_REQUEST, 3, {"action": {"f": [1]}}), cfg)
    assert reply.msg_type is MsgType.CONTROL_FAILURE and "malformed" in reply.payload["reason"]
    reply = ran_apply_control(E2Message(MsgType.CONTROL_ACK, 4, {}), cfg)
    assert reply.msg_type is MsgType.CONTROL_FAILURE


def test_xapp_ids_increase_and_acks_echo():
    cfg = SystemConfig(num_users=2, steps_per_episode=5)
    x_link, r_link = inproc_pair()
    xapp = XApp(AvgPolicy(), cfg, x_link)
    node = E2Node(VolumetricEnv(cfg, 0), r_link)
    node.env.reset()
    xapp.subscribe()
    node.on_subscription_request(r_link.recv())
    xapp.on_subscription_response(x_link.recv())
    assert xapp.subscribed
    ids = []
    for t in range(5):
        node.report(t)
        req = xapp.control_round(x_link.recv())
        node.on_control(r_link.recv())
        ack = x_link.recv()
        assert ack.msg_type is MsgType.CONTROL_ACK and ack.correlation_id == req.correlation_id
        ids.append(req.correlation_id)
        node.advance()
    assert ids == sorted(set(ids)) and ids[0] == 2


def test_duplicate_subscription_refused():
    cfg = SystemConfig(num_users=1)
    x_link, r_link = inproc_pair()
    node = E2Node(VolumetricEnv(cfg, 0), r_link)
    for expected in (True, False):
        node.on_subscription_request(subscription_request(1, "same"))
        assert x_link.recv().payload["accepted"] is expected


def test_report_without_subscription_is_an_error():
    cfg = SystemConfig(num_users=1)
    xapp = XApp(AvgPolicy(), cfg, inproc_pair()[0])
    with pytest.raises(ProtocolError):
        xapp.control_round(report_indication(0, 0, reset(cfg, 0)))


def test_unknown_transport():
    with pytest.raises(ValueError):
        open_transport("carrier-pigeon")


def _trace(transport, period=1):
    cfg = SystemConfig(num_users=3, steps_per_episode=6)
    with E2Session(AvgPolicy(), cfg, seed=4, transport=transport, report_period=period) as sess:
        sess.reset()
        return [sess.run_slot() for _ in range(6)]


def test_transports_equivalent():
    a, b = _trace("inproc"), _trace("tcp-loopback")
    for ra, rb in zip(a, b):
        assert ra.states == rb.states and ra.next_states == rb.next_states
        assert ra.outcome.equals(rb.outcome) and ra.done == rb.done
    assert a[-1].done


def test_session_holds_action_between_reports():
    recs = _trace("inproc", period=2)
    assert [r.raw_action is not None for r in recs] == [True, False] * 3
    assert all(r.outcome is not None for r in recs)
