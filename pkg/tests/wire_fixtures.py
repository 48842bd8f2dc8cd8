"""Deterministic envelopes for the golden wire-format fixtures.

One envelope per message variant, with fixed identities, sequences,
timestamps, and keys, so the canonical encoding of each is a stable byte
string.  The committed ``golden/*.hex`` files are the normative wire-format
reference; regenerate them with ``python tests/wire_fixtures.py`` only when
the format version changes, and expect the golden test to fail loudly until
the docs are updated too.
"""

from __future__ import annotations

import os

from flowgate.decisions import AccessDecision, deny_decision
from flowgate.frames import dissect, goose_frame
from flowgate.pattern_text import parse_pattern
from flowgate.policy import (
    Action,
    AttributeBinding,
    Comparison,
    CompareOp,
    FOREVER,
    GateOp,
    Policy,
    TreeGate,
    TreeLeaf,
    predicate,
    to_conjunctive_form,
)
from flowgate.wire.auth import (
    Ed25519Authenticator,
    HmacSha512Authenticator,
    NoopAuthenticator,
    seal,
)
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
    PolicyCrudResponse,
    PolicyExchangeComplete,
    PolicyExchangeIncremental,
    PolicyExchangeRequest,
    ProtocolEnvelope,
    SessionInitialization,
)

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")

HMAC_SECRET = bytes.fromhex(
    "8e2b54be8f7f0ad0dba204450a102c1a2c6ba17c26998211e6e269a541cf4997"
)
ED25519_PRIVATE = bytes.fromhex(
    "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60"
)

_BASE_TS = 1_755_000_000_000


def _policy(pid: str = "goose-trip") -> Policy:
    tree = TreeGate(
        GateOp.AND,
        (
            TreeLeaf(predicate("a1", Comparison("breaker-position", CompareOp.EQ, "closed"))),
            TreeGate(
                GateOp.OR,
                (
                    TreeLeaf(predicate("a2", Comparison("mode", CompareOp.EQ, "normal"))),
                    TreeLeaf(predicate("a3", Comparison("mode", CompareOp.EQ, "test"))),
                ),
            ),
        ),
    )
    return Policy(
        pid,
        Action.GRANT,
        parse_pattern("eth { goose { appid == 5 } }"),
        to_conjunctive_form(tree),
        static_max_validity=60_000,
        nexthop_ids=frozenset({"dep-b"}),
    )


def _grant_decision() -> AccessDecision:
    return AccessDecision(
        (parse_pattern("eth { goose { appid == 5 } }"),),
        Action.GRANT,
        frozenset({"dep-b"}),
        _BASE_TS,
        _BASE_TS + 60_000,
        frozenset({"goose-trip"}),
    )


GOOSE_FRAME = goose_frame("02:00:00:00:00:01", "01:0c:cd:01:00:01", 5, b"trip", pad_to=60)


def golden_envelopes() -> dict[str, ProtocolEnvelope]:
    """name -> sealed envelope, one per message variant."""
    noop = NoopAuthenticator()
    hmac = HmacSha512Authenticator({"pasp": HMAC_SECRET, "pdp-1": HMAC_SECRET})
    ed = Ed25519Authenticator(ED25519_PRIVATE, {})
    request_pattern = dissect(GOOSE_FRAME)

    def env(sender, seq, body):
        return ProtocolEnvelope(sender, seq, _BASE_TS + seq, body)

    sealed = {
        "policy-crud-request": seal(
            env("operator", 1, PolicyCrudRequest(CrudOp.CREATE, "goose-trip", _policy())),
            hmac, "pasp",
        ),
        "policy-crud-response": seal(
            env("pasp", 2, PolicyCrudResponse(
                CrudStatus.VALIDATION_FAILED, None, ("unknown attribute 'ghost'",)
            )),
            noop, "operator",
        ),
        "policy-exchange-incremental": seal(
            env("pasp", 3, PolicyExchangeIncremental(
                ((CrudOp.CREATE, "goose-trip", _policy()), (CrudOp.DELETE, "old-rule", None)),
                revision=42,
            )),
            noop, "pdp-1",
        ),
        "policy-exchange-request": seal(env("pdp-1", 4, PolicyExchangeRequest()), hmac, "pasp"),
        "policy-exchange-complete": seal(
            env("pasp", 5, PolicyExchangeComplete((_policy(), _policy("sv-meter")), revision=7)),
            noop, "pdp-1",
        ),
        "attribute-request": seal(
            env("pdp-1", 6, AttributeRequest(("breaker-position", "mode"))), noop, "aasp"
        ),
        "attribute-resolution": seal(
            env("aasp", 7, AttributeResolution(
                (
                    AttributeBinding("mode", "normal", _BASE_TS, _BASE_TS + 30_000),
                    AttributeBinding("site-id", "s1", _BASE_TS, FOREVER),
                ),
                ("ghost",),
            )),
            noop, "pdp-1",
        ),
        "access-request": seal(env("dep-a", 8, AccessRequest(request_pattern)), noop, "pdp-1"),
        "session-initialization": seal(
            env("pdp-1", 9, SessionInitialization((_grant_decision(),))), noop, "dep-a"
        ),
        "access-verification-request": seal(
            env("dep-a", 10, AccessVerificationRequest(parse_pattern("eth { goose { appid == 5 } }"))),
            noop, "pdp-1",
        ),
        "access-verification-response": seal(
            env("pdp-1", 11, AccessVerificationResponse(
                (deny_decision((parse_pattern("eth { goose { appid == 5 } }"),),
                               _BASE_TS, _BASE_TS + 5_000),)
            )),
            noop, "dep-a",
        ),
        "payload-exchange-request": seal(
            env("dep-a", 12, PayloadExchangeRequest(GOOSE_FRAME)), ed, "dep-b"
        ),
    }
    return sealed


def main() -> None:
    from flowgate.wire.messages import encode_envelope

    os.makedirs(GOLDEN_DIR, exist_ok=True)
    for name, envelope in golden_envelopes().items():
        path = os.path.join(GOLDEN_DIR, f"{name}.hex")
        with open(path, "w") as fp:
            fp.write(encode_envelope(envelope).hex() + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
