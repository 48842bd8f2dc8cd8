"""Service behavior: CRUD and distribution, attribute resolution, access
request fan-out, and enforcement-point data-path rules."""

import socket
import threading
import time

import pytest

from flowgate.decisions import AccessDecision, deny_decision
from flowgate.frames import dissect, goose_frame, udp_frame
from flowgate.pattern_text import parse_pattern
from flowgate.policy import Action, AttributeKey, Comparison, CompareOp, Policy, predicate
from flowgate.services.aasp import AaspService
from flowgate.services.config import BypassRule, DepRegistryEntry, ServiceConfig
from flowgate.services.dep import DepService
from flowgate.services.pasp import PaspService
from flowgate.services.pdp import PdpService
from flowgate.wire.auth import NoopAuthenticator, seal
from flowgate.wire.messages import (
    AccessRequest,
    AccessVerificationRequest,
    AccessVerificationResponse,
    AttributeRequest,
    AttributeResolution,
    CrudOp,
    CrudStatus,
    PayloadExchangeRequest,
    PolicyCrudRequest,
    PolicyExchangeComplete,
    PolicyExchangeIncremental,
    PolicyExchangeRequest,
    ProtocolEnvelope,
    SessionInitialization,
    decode_envelope,
    encode_envelope,
)
from flowgate.wire.transport import oneshot, recv_envelope, send_envelope

NOOP = NoopAuthenticator()
CATALOG = {
    "mode": AttributeKey("mode", "string", time_variable=True),
    "site-id": AttributeKey("site-id", "string"),
}


def now_ms() -> int:
    return int(time.time() * 1000)


def admin_envelope(body, seq=None):
    seq = seq if seq is not None else time.monotonic_ns()
    return seal(ProtocolEnvelope("operator", seq, now_ms(), body), NOOP, "pasp")


class EnvelopeSink:
    """Minimal control endpoint that records everything it receives."""

    def __init__(self, responder=None):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.listen(8)
        self.received = []
        self._responder = responder
        self._seq = 0
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._sock.getsockname()[:2]

    def _loop(self):
        while True:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        with conn:
            while True:
                try:
                    env = recv_envelope(conn)
                except Exception:
                    return
                if env is None:
                    return
                with self._lock:
                    self.received.append(env)
                if self._responder is not None:
                    body = self._responder(env)
                    if body is not None:
                        with self._lock:
                            self._seq += 1
                            reply = ProtocolEnvelope("stub", self._seq, now_ms(), body)
                        send_envelope(conn, seal(reply, NOOP, env.sender_id))

    def wait_for(self, count, timeout=3.0):
        deadline = time.time() + timeout
        while time.time() < deadline:
            with self._lock:
                if len(self.received) >= count:
                    return list(self.received)
            time.sleep(0.01)
        with self._lock:
            return list(self.received)

    def close(self):
        self._sock.close()


def trip_policy(pid="trip", nexthops=frozenset({"dep-b"})):
    return Policy(pid, Action.GRANT, parse_pattern("eth { goose { appid == 5 } }"),
                  nexthop_ids=nexthops)


@pytest.fixture
def pasp():
    sink = EnvelopeSink()
    cfg = ServiceConfig(id="pasp", admins=frozenset({"operator"}),
                        pdp_peers={"pdp-1": sink.address})
    service = PaspService(cfg)
    service.start()
    yield service, sink
    service.stop()
    sink.close()


class TestPaspCrud:
    def test_create_bumps_revision_and_pushes(self, pasp):
        service, sink = pasp
        reply = oneshot(service.control_address, admin_envelope(
            PolicyCrudRequest(CrudOp.CREATE, "trip", trip_policy())), await_reply=True)
        assert reply.body.status is CrudStatus.OK
        assert service.revision == 1
        pushed = sink.wait_for(1)
        assert len(pushed) == 1
        assert isinstance(pushed[0].body, PolicyExchangeIncremental)
        assert pushed[0].body.changes[0][0] is CrudOp.CREATE
        assert pushed[0].body.revision == 1

    def test_read_unknown_id(self, pasp):
        service, _ = pasp
        reply = oneshot(service.control_address,
                        admin_envelope(PolicyCrudRequest(CrudOp.READ, "ghost")), await_reply=True)
        assert reply.body.status is CrudStatus.NOT_FOUND

    def test_duplicate_create_rejected(self, pasp):
        service, _ = pasp
        for expect in (CrudStatus.OK, CrudStatus.DUPLICATE_ID):
            reply = oneshot(service.control_address, admin_envelope(
                PolicyCrudRequest(CrudOp.CREATE, "trip", trip_policy())), await_reply=True)
            assert reply.body.status is expect
        assert service.revision == 1

    def test_invalid_update_leaves_revision(self, pasp):
        service, _ = pasp
        oneshot(service.control_address, admin_envelope(
            PolicyCrudRequest(CrudOp.CREATE, "trip", trip_policy())), await_reply=True)
        bad = Policy("trip", Action.GRANT, parse_pattern("eth { mystery == 5 }"))
        reply = oneshot(service.control_address, admin_envelope(
            PolicyCrudRequest(CrudOp.UPDATE, "trip", bad)), await_reply=True)
        assert reply.body.status is CrudStatus.VALIDATION_FAILED
        assert reply.body.violations
        assert service.revision == 1

    def test_non_admin_rejected(self, pasp):
        service, _ = pasp
        env = seal(ProtocolEnvelope("intruder", 1, now_ms(),
                                    PolicyCrudRequest(CrudOp.READ, "trip")), NOOP, "pasp")
        reply = oneshot(service.control_address, env, await_reply=True)
        assert reply.body.status is CrudStatus.UNAUTHORIZED

    def test_complete_exchange_serves_everything(self, pasp):
        service, _ = pasp
        for pid in ("p1", "p2"):
            oneshot(service.control_address, admin_envelope(
                PolicyCrudRequest(CrudOp.CREATE, pid, trip_policy(pid))), await_reply=True)
        env = seal(ProtocolEnvelope("pdp-9", 1, now_ms(), PolicyExchangeRequest()), NOOP, "pasp")
        reply = oneshot(service.control_address, env, await_reply=True)
        assert isinstance(reply.body, PolicyExchangeComplete)
        assert {p.id for p in reply.body.policies} == {"p1", "p2"}
        assert reply.body.revision == 2

    def test_delete_then_empty_complete_exchange(self, pasp):
        service, _ = pasp
        oneshot(service.control_address, admin_envelope(
            PolicyCrudRequest(CrudOp.CREATE, "p1", trip_policy("p1"))), await_reply=True)
        oneshot(service.control_address, admin_envelope(
            PolicyCrudRequest(CrudOp.DELETE, "p1")), await_reply=True)
        env = seal(ProtocolEnvelope("pdp-9", 1, now_ms(), PolicyExchangeRequest()), NOOP, "pasp")
        reply = oneshot(service.control_address, env, await_reply=True)
        assert reply.body.policies == ()
        assert reply.body.revision == 2


class TestPaspPersistence:
    def test_store_survives_restart(self, tmp_path):
        store = str(tmp_path / "policies.bin")
        cfg = ServiceConfig(id="pasp", admins=frozenset({"operator"}), store_file=store)
        service = PaspService(cfg)
        service.start()
        oneshot(service.control_address, admin_envelope(
            PolicyCrudRequest(CrudOp.CREATE, "trip", trip_policy())), await_reply=True)
        service.stop()

        reborn = PaspService(ServiceConfig(id="pasp", admins=frozenset({"operator"}),
                                           store_file=store))
        reborn.start()
        assert [p.id for p in reborn.policies()] == ["trip"]
        assert reborn.revision == 1
        reborn.stop()


class TestAasp:
    @pytest.fixture
    def aasp(self):
        cfg = ServiceConfig(id="aasp", catalog=dict(CATALOG),
                            values={"mode": ("normal", 30_000), "site-id": ("s1", None)})
        service = AaspService(cfg)
        service.start()
        yield service
        service.stop()

    def request(self, service, keys):
        env = seal(ProtocolEnvelope("pdp-1", time.monotonic_ns(), now_ms(),
                                    AttributeRequest(keys)), NOOP, "aasp")
        reply = oneshot(service.control_address, env, await_reply=True)
        assert isinstance(reply.body, AttributeResolution)
        return reply.body

    def test_time_variable_key_gets_freshness_window(self, aasp):
        body = self.request(aasp, ("mode",))
        (binding,) = body.bindings
        assert binding.value == "normal"
        assert 0 < binding.valid_until - binding.valid_from <= 30_000

    def test_constant_key_never_expires(self, aasp):
        from flowgate.policy import FOREVER

        (binding,) = self.request(aasp, ("site-id",)).bindings
        assert binding.valid_until == FOREVER

    def test_unknown_key_marked_not_fatal(self, aasp):
        body = self.request(aasp, ("mode", "ghost"))
        assert [b.key for b in body.bindings] == ["mode"]
        assert body.unknown_keys == ("ghost",)

    def test_runtime_value_flip(self, aasp):
        aasp.set_value("mode", "maintenance")
        (binding,) = self.request(aasp, ("mode",)).bindings
        assert binding.value == "maintenance"


def _registry(dep_a_ctrl, dep_b_ctrl):
    return {
        "dep-a": DepRegistryEntry("dep-a", dep_a_ctrl, ("127.0.0.1", 1),
                                  frozenset({"02:00:00:00:00:01"}), frozenset({"10.0.0.1"}),
                                  frozenset({40000})),
        "dep-b": DepRegistryEntry("dep-b", dep_b_ctrl, ("127.0.0.1", 2),
                                  frozenset({"02:00:00:00:00:02"}), frozenset({"10.0.0.2"}),
                                  frozenset({40001})),
    }


class TestPdp:
    @pytest.fixture
    def stack(self):
        """PDP with two sink DEPs and a live AASP."""
        dep_a, dep_b = EnvelopeSink(), EnvelopeSink()
        aasp_cfg = ServiceConfig(id="aasp", catalog=dict(CATALOG),
                                 values={"mode": ("normal", 2_000)})
        aasp = AaspService(aasp_cfg)
        aasp.start()
        cfg = ServiceConfig(id="pdp-1", catalog=dict(CATALOG),
                            aasp=("aasp", aasp.control_address),
                            registry=_registry(dep_a.address, dep_b.address))
        pdp = PdpService(cfg)
        pdp.start()
        yield pdp, aasp, dep_a, dep_b
        pdp.stop()
        aasp.stop()
        dep_a.close()
        dep_b.close()

    def send_access_request(self, pdp, frame, sender="dep-a"):
        request = dissect(frame)
        env = seal(ProtocolEnvelope(sender, time.monotonic_ns(), now_ms(),
                                    AccessRequest(request)), NOOP, "pdp-1")
        oneshot(pdp.control_address, env, await_reply=False)
        return request

    GOOSE = goose_frame("02:00:00:00:00:01", "01:0c:cd:01:00:01", 5, b"t", pad_to=60)

    def test_no_policy_yields_default_deny_to_requester_only(self, stack):
        pdp, _, dep_a, dep_b = stack
        request = self.send_access_request(pdp, self.GOOSE)
        (env,) = dep_a.wait_for(1)
        assert isinstance(env.body, SessionInitialization)
        (decision,) = env.body.decisions
        assert decision.action is Action.DENY
        from flowgate.patterns import match_at_root

        assert match_at_root(decision.flows[0], request)
        time.sleep(0.1)
        assert dep_b.received == []

    def test_grant_fans_out_to_requester_and_nexthop(self, stack):
        pdp, _, dep_a, dep_b = stack
        pdp._policies = {"trip": trip_policy()}
        self.send_access_request(pdp, self.GOOSE)
        (to_a,) = dep_a.wait_for(1)
        (to_b,) = dep_b.wait_for(1)
        for env in (to_a, to_b):
            (decision,) = env.body.decisions
            assert decision.action is Action.GRANT
            assert decision.nexthop == {"dep-b"}

    def test_cached_decision_skips_attribute_fetch(self, stack):
        pdp, _, dep_a, _ = stack
        aux = frozenset({predicate("a1", Comparison("mode", CompareOp.EQ, "normal"))})
        pdp._policies = {"dyn": Policy("dyn", Action.GRANT,
                                       parse_pattern("eth { goose { appid == 5 } }"),
                                       aux, nexthop_ids=frozenset({"dep-b"}))}
        self.send_access_request(pdp, self.GOOSE)
        dep_a.wait_for(1)
        calls_after_first = pdp.attribute_source.calls
        assert calls_after_first >= 1
        self.send_access_request(pdp, self.GOOSE)
        dep_a.wait_for(2)
        assert pdp.attribute_source.calls == calls_after_first  # cache hit

    def test_static_policy_derivation_never_calls_resolver(self, stack):
        pdp, _, dep_a, _ = stack
        pdp._policies = {"trip": trip_policy()}
        self.send_access_request(pdp, self.GOOSE)
        dep_a.wait_for(1)
        assert pdp.attribute_source.calls == 0

    def test_nexthop_resolved_from_registry_destination_match(self, stack):
        pdp, _, dep_a, dep_b = stack
        # no explicit nexthop ids: the registry must resolve them
        flow = parse_pattern('eth { ipv4 { dst == "10.0.0.2" udp { dstport == 40001 } } }')
        pdp._policies = {"fwd": Policy("fwd", Action.GRANT, flow)}
        frame = udp_frame("02:00:00:00:00:01", "02:00:00:00:00:02",
                          "10.0.0.1", "10.0.0.2", 40000, 40001, b"12345678")
        self.send_access_request(pdp, frame)
        (to_b,) = dep_b.wait_for(1)
        (decision,) = to_b.body.decisions
        assert decision.nexthop == {"dep-b"}

    def test_verification_returns_decisions_without_sessions(self, stack):
        pdp, _, dep_a, dep_b = stack
        pdp._policies = {"trip": trip_policy()}
        env = seal(ProtocolEnvelope("dep-a", time.monotonic_ns(), now_ms(),
                                    AccessVerificationRequest(trip_policy().flow)),
                   NOOP, "pdp-1")
        reply = oneshot(pdp.control_address, env, await_reply=True)
        assert isinstance(reply.body, AccessVerificationResponse)
        (decision,) = reply.body.decisions
        assert decision.action is Action.GRANT
        time.sleep(0.1)
        assert dep_a.received == [] and dep_b.received == []  # no side effects

    def test_verification_of_unknown_flow_denies(self, stack):
        pdp, _, _, _ = stack
        flow = parse_pattern("eth { sv { } }")
        env = seal(ProtocolEnvelope("dep-a", time.monotonic_ns(), now_ms(),
                                    AccessVerificationRequest(flow)), NOOP, "pdp-1")
        reply = oneshot(pdp.control_address, env, await_reply=True)
        (decision,) = reply.body.decisions
        assert decision.action is Action.DENY
        assert decision.flows == (flow,)

    def test_incremental_apply_and_delete(self, stack):
        pdp, _, _, _ = stack
        body = PolicyExchangeIncremental(((CrudOp.CREATE, "trip", trip_policy()),), 1)
        env = seal(ProtocolEnvelope("pasp", 1, now_ms(), body), NOOP, "pdp-1")
        oneshot(pdp.control_address, env, await_reply=False)
        deadline = time.time() + 2
        while time.time() < deadline and not pdp.policies():
            time.sleep(0.01)
        assert [p.id for p in pdp.policies()] == ["trip"]
        body = PolicyExchangeIncremental(((CrudOp.DELETE, "trip", None),), 2)
        env = seal(ProtocolEnvelope("pasp", 2, now_ms(), body), NOOP, "pdp-1")
        oneshot(pdp.control_address, env, await_reply=False)
        deadline = time.time() + 2
        while time.time() < deadline and pdp.policies():
            time.sleep(0.01)
        assert pdp.policies() == []
        assert pdp.revision == 2


class UdpCatcher:
    def __init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(2.0)

    @property
    def address(self):
        return self.sock.getsockname()[:2]

    def recv(self):
        data, _ = self.sock.recvfrom(65535)
        return data

    def drain(self, max_wait=0.3):
        out = []
        self.sock.settimeout(max_wait)
        try:
            while True:
                out.append(self.recv())
        except socket.timeout:
            return out


def make_dep(catcher_b: UdpCatcher, deliver: UdpCatcher, pdp_sink: EnvelopeSink,
             **overrides) -> DepService:
    registry = {
        "dep-a": DepRegistryEntry("dep-a", ("127.0.0.1", 9), ("127.0.0.1", 9),
                                  frozenset({"02:00:00:00:00:01"}), frozenset({"10.0.0.1"}),
                                  frozenset({40000})),
        "dep-b": DepRegistryEntry("dep-b", ("127.0.0.1", 9), catcher_b.address,
                                  frozenset({"02:00:00:00:00:02"}), frozenset({"10.0.0.2"}),
                                  frozenset({40001})),
    }
    cfg = ServiceConfig(id="dep-a", pdp=("pdp-1", pdp_sink.address), registry=registry,
                        device_deliver=deliver.address, **overrides)
    return DepService(cfg)


GOOSE_FRAME = goose_frame("02:00:00:00:00:01", "01:0c:cd:01:00:01", 5, b"t", pad_to=60)
GOOSE_FLOW = "eth { goose { appid == 5 } }"


def grant_to_b(flow=GOOSE_FLOW, until_offset=60_000):
    now = now_ms()
    return AccessDecision((parse_pattern(flow),), Action.GRANT, frozenset({"dep-b"}),
                          now - 1000, now + until_offset, frozenset({"trip"}))


def grant_to_a(flow=GOOSE_FLOW, until_offset=60_000):
    now = now_ms()
    return AccessDecision((parse_pattern(flow),), Action.GRANT, frozenset({"dep-a"}),
                          now - 1000, now + until_offset, frozenset({"trip"}))


class TestDepEgress:
    @pytest.fixture
    def dep(self):
        catcher, deliver, pdp = UdpCatcher(), UdpCatcher(), EnvelopeSink()
        service = make_dep(catcher, deliver, pdp)
        yield service, catcher, deliver, pdp
        service.stop()
        pdp.close()

    def test_granted_frame_forwarded_sealed_per_nexthop(self, dep):
        service, catcher, _, _ = dep
        service.egress_decisions.install(grant_to_b())
        service.handle_egress_frame(GOOSE_FRAME, now_ms())
        env = decode_envelope(catcher.recv())
        assert isinstance(env.body, PayloadExchangeRequest)
        assert env.body.frame == GOOSE_FRAME
        assert service.metrics.get("egress.forwarded") == 1

    def test_two_nexthops_two_sealed_requests(self, dep):
        service, catcher, _, _ = dep
        second = UdpCatcher()
        registry = dict(service.cfg.registry)
        registry["dep-c"] = DepRegistryEntry("dep-c", ("127.0.0.1", 9), second.address)
        service.cfg.registry = registry
        now = now_ms()
        decision = AccessDecision((parse_pattern(GOOSE_FLOW),), Action.GRANT,
                                  frozenset({"dep-b", "dep-c"}), now - 1000, now + 60_000)
        service.egress_decisions.install(decision)
        service.handle_egress_frame(GOOSE_FRAME, now)
        for caught in (catcher, second):
            env = decode_envelope(caught.recv())
            assert env.body.frame == GOOSE_FRAME
        assert service.metrics.get("egress.forwarded") == 2

    def test_denied_frame_dropped(self, dep):
        service, catcher, _, _ = dep
        service.egress_decisions.install(deny_decision(
            (parse_pattern(GOOSE_FLOW),), now_ms() - 1000, now_ms() + 60_000))
        service.handle_egress_frame(GOOSE_FRAME, now_ms())
        assert catcher.drain() == []
        assert service.metrics.get("egress.denied") == 1

    def test_no_decision_buffers_and_requests_once(self, dep):
        service, catcher, _, pdp = dep
        now = now_ms()
        for _ in range(5):
            service.handle_egress_frame(GOOSE_FRAME, now)
        received = pdp.wait_for(1)
        time.sleep(0.2)
        requests = [e for e in pdp.received if isinstance(e.body, AccessRequest)]
        assert len(requests) == 1  # deduplicated while pending
        assert service.metrics.get("egress.buffered") == 5
        assert catcher.drain() == []

    def test_rerequest_after_timeout(self, dep):
        service, _, _, pdp = dep
        now = now_ms()
        service.handle_egress_frame(GOOSE_FRAME, now)
        service.handle_egress_frame(GOOSE_FRAME, now + service.cfg.request_timeout_ms + 1)
        pdp.wait_for(2)
        requests = [e for e in pdp.received if isinstance(e.body, AccessRequest)]
        assert len(requests) == 2

    def test_buffer_bounded_drop_oldest(self, dep):
        service, _, _, _ = dep
        now = now_ms()
        for _ in range(service.cfg.buffer_limit + 10):
            service.handle_egress_frame(GOOSE_FRAME, now)
        assert service.metrics.get("egress.buffer-overflow") == 10
        (pending,) = service._pending.values()
        assert len(pending.frames) == service.cfg.buffer_limit

    def test_session_init_drains_fifo(self, dep):
        service, catcher, _, _ = dep
        now = now_ms()
        frames = [goose_frame("02:00:00:00:00:01", "01:0c:cd:01:00:01", 5,
                              bytes([i]), pad_to=60) for i in range(6)]
        for f in frames:
            service.handle_egress_frame(f, now)
        service.install_decisions((grant_to_b(),), now)
        forwarded = [decode_envelope(d).body.frame for d in catcher.drain()]
        assert forwarded == frames  # FIFO order preserved
        assert not service._pending

    def test_bypass_skips_authorization_entirely(self, dep):
        catcher, deliver, pdp = UdpCatcher(), UdpCatcher(), EnvelopeSink()
        service = make_dep(catcher, deliver, pdp,
                           bypass_rules=[BypassRule(parse_pattern("eth { ethertype == 0x0806 }"),
                                                    "both")])
        try:
            from flowgate.frames import ethernet_frame

            arp = ethernet_frame("02:00:00:00:00:01", "ff:ff:ff:ff:ff:ff", 0x0806, b"\x00" * 28)
            service.handle_egress_frame(arp, now_ms())
            raw = catcher.recv()
            assert raw == arp  # raw, not an envelope
            time.sleep(0.1)
            assert pdp.received == []  # zero protocol messages
        finally:
            service.stop()
            pdp.close()


class TestDepIngress:
    @pytest.fixture
    def dep(self):
        catcher, deliver, pdp = UdpCatcher(), UdpCatcher(), EnvelopeSink()
        service = make_dep(catcher, deliver, pdp)
        yield service, catcher, deliver, pdp
        service.stop()
        pdp.close()

    def sealed_payload(self, frame, seq=None):
        env = ProtocolEnvelope("dep-b", seq if seq is not None else time.monotonic_ns(),
                               now_ms(), PayloadExchangeRequest(frame))
        return encode_envelope(seal(env, NOOP, "dep-a"))

    def test_granted_frame_delivered_bit_exact(self, dep):
        service, _, deliver, _ = dep
        service.ingress_decisions.install(grant_to_a())
        service.handle_datagram(self.sealed_payload(GOOSE_FRAME), now_ms())
        assert deliver.recv() == GOOSE_FRAME
        assert service.metrics.get("ingress.delivered") == 1

    def test_not_in_nexthop_dropped(self, dep):
        service, _, deliver, _ = dep
        service.ingress_decisions.install(grant_to_b())  # nexthop is dep-b, we are dep-a
        service.handle_datagram(self.sealed_payload(GOOSE_FRAME), now_ms())
        assert deliver.drain() == []
        assert service.metrics.get("ingress.denied") == 1

    def test_no_decision_drops_without_requesting(self, dep):
        service, _, deliver, pdp = dep
        service.handle_datagram(self.sealed_payload(GOOSE_FRAME), now_ms())
        assert deliver.drain() == []
        time.sleep(0.1)
        assert pdp.received == []
        assert service.metrics.get("ingress.no-decision") == 1

    def test_tampered_envelope_dropped_before_matching(self, dep):
        catcher, deliver, pdp = UdpCatcher(), UdpCatcher(), EnvelopeSink()
        secret = bytes(range(32))
        registry = {
            "dep-a": DepRegistryEntry("dep-a", ("127.0.0.1", 9), ("127.0.0.1", 9)),
            "dep-b": DepRegistryEntry("dep-b", ("127.0.0.1", 9), catcher.address),
        }
        from flowgate.wire.auth import AuthScheme, HmacSha512Authenticator

        cfg = ServiceConfig(id="dep-a", scheme=AuthScheme.HMAC_SHA512,
                            peer_secrets={"dep-a": secret, "dep-b": secret},
                            pdp=("pdp-1", pdp.address), registry=registry,
                            device_deliver=deliver.address)
        service = DepService(cfg)
        try:
            service.ingress_decisions.install(grant_to_a())
            signer = HmacSha512Authenticator({"dep-a": secret})
            env = seal(ProtocolEnvelope("dep-b", 1, now_ms(),
                                        PayloadExchangeRequest(GOOSE_FRAME)), signer, "dep-a")
            raw = bytearray(encode_envelope(env))
            raw[-1] ^= 0x01  # inside the tag: decodes fine, verification fails
            service.handle_datagram(bytes(raw), now_ms())
            assert deliver.drain() == []
            assert service.metrics.get("ingress.auth-failure") == 1
            assert service.metrics.get("ingress.delivered") == 0
        finally:
            service.stop()
            pdp.close()

    def test_replayed_payload_dropped(self, dep):
        service, _, deliver, _ = dep
        service.ingress_decisions.install(grant_to_a())
        datagram = self.sealed_payload(GOOSE_FRAME, seq=77)
        service.handle_datagram(datagram, now_ms())
        service.handle_datagram(datagram, now_ms())
        assert len(deliver.drain()) == 1
        assert service.metrics.get("ingress.replay") == 1

    def test_expired_decision_skipped_on_install(self, dep):
        service, _, _, _ = dep
        now = now_ms()
        stale = AccessDecision((parse_pattern(GOOSE_FLOW),), Action.GRANT,
                               frozenset({"dep-a"}), now - 5000, now - 1000)
        service.install_decisions((stale,), now)
        assert len(service.ingress_decisions) == 0


class TestSessionVerification:
    def build(self, responder, fail_open=False):
        catcher, deliver, pdp = UdpCatcher(), UdpCatcher(), EnvelopeSink()
        verifier = EnvelopeSink(responder)
        registry = {
            "dep-a": DepRegistryEntry("dep-a", ("127.0.0.1", 9), ("127.0.0.1", 9)),
            "dep-b": DepRegistryEntry("dep-b", ("127.0.0.1", 9), catcher.address),
        }
        cfg = ServiceConfig(id="dep-a", pdp=("pdp-1", pdp.address), registry=registry,
                            device_deliver=deliver.address,
                            verifier_pdp=("pdp-2", verifier.address),
                            verify_fail_open=fail_open, control_timeout_s=0.4)
        return DepService(cfg), verifier, pdp

    def test_identical_decisions_accepted(self):
        decision = grant_to_a()

        def agree(env):
            if isinstance(env.body, AccessVerificationRequest):
                return AccessVerificationResponse((decision,))
            return None

        service, verifier, pdp = self.build(agree)
        try:
            service._handle_control(
                seal(ProtocolEnvelope("pdp-1", 1, now_ms(),
                                      SessionInitialization((decision,))), NOOP, "dep-a"),
                lambda body: None,
            )
            assert len(service.ingress_decisions) == 1
            assert service.metrics.get("session.verification-conflict") == 0
        finally:
            service.stop()
            verifier.close()
            pdp.close()

    def test_action_disagreement_installs_default_deny(self):
        granted = grant_to_a()
        denied = deny_decision(granted.flows, granted.valid_from, granted.valid_until)

        def disagree(env):
            if isinstance(env.body, AccessVerificationRequest):
                return AccessVerificationResponse((denied,))
            return None

        service, verifier, pdp = self.build(disagree)
        try:
            service._handle_control(
                seal(ProtocolEnvelope("pdp-1", 1, now_ms(),
                                      SessionInitialization((granted,))), NOOP, "dep-a"),
                lambda body: None,
            )
            assert service.metrics.get("session.verification-conflict") == 1
            installed = service.ingress_decisions.snapshot()
            assert len(installed) == 1
            assert installed[0].action is Action.DENY  # fallback, not the grant
        finally:
            service.stop()
            verifier.close()
            pdp.close()

    def test_unreachable_verifier_fails_closed_by_default(self):
        service, verifier, pdp = self.build(lambda env: None)
        verifier.close()  # nobody listening
        try:
            granted = grant_to_a()
            service._handle_control(
                seal(ProtocolEnvelope("pdp-1", 1, now_ms(),
                                      SessionInitialization((granted,))), NOOP, "dep-a"),
                lambda body: None,
            )
            assert service.metrics.get("session.verification-conflict") == 1
            installed = service.ingress_decisions.snapshot()
            assert all(d.action is Action.DENY for d in installed)
        finally:
            service.stop()
            pdp.close()


class TestRawCaptureMode:
    def test_raw_capture_flagged_on_and_constructible_or_refused(self):
        """Raw capture needs CAP_NET_RAW; accept either a working socket or
        a clean startup error, never a crash."""
        from flowgate.errors import ServiceStartupError

        pdp = EnvelopeSink()
        cfg = ServiceConfig(id="dep-raw", pdp=("pdp-1", pdp.address),
                            capture_interface="lo")
        try:
            service = DepService(cfg)
        except ServiceStartupError as exc:
            assert "raw capture" in str(exc)
        else:
            assert service.capture_address == "lo"
            service.stop()
        finally:
            pdp.close()
