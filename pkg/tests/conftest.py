"""Shared test helpers: random pattern/request generators and an
independent brute-force matcher used as the oracle for the tree walker.

The oracle deliberately re-implements matching by flattening both sides
into (path, predicate) and (path, facts) tables and enumerating all pairs;
it shares no traversal or evaluation code with the production matcher.
"""

from __future__ import annotations

import random

import pytest

from flowgate.frames import FIELD_REGISTRY
from flowgate.patterns import (
    AccessRequestPattern,
    FlowPattern,
    MatchOp,
    PredicateKind,
    PredicateNode,
    RequestNode,
    where,
)

LAYERS = ["eth", "vlan", "ipv4", "udp", "tcp", "goose", "sv", "opaque"]

# Per-field value pools, with the demultiplexing constants mixed in so that
# auto-derived layer constraints are sometimes satisfiable.
VALUE_POOLS = {
    ("eth", "src"): ["02:00:00:00:00:01", "02:00:00:00:00:02", "01:0c:cd:01:00:01"],
    ("eth", "dst"): ["02:00:00:00:00:01", "02:00:00:00:00:02", "01:0c:cd:01:00:01"],
    ("eth", "ethertype"): [0x88B8, 0x88BA, 0x0800, 0x8100, 0x1234],
    ("vlan", "vid"): [1, 2, 100],
    ("vlan", "pcp"): [0, 4, 7],
    ("goose", "appid"): [1, 2, 5],
    ("goose", "length"): [20, 40, 60],
    ("sv", "appid"): [1, 2, 5],
    ("sv", "length"): [20, 40, 60],
    ("ipv4", "src"): ["10.0.0.1", "10.0.0.2", "192.168.1.9"],
    ("ipv4", "dst"): ["10.0.0.1", "10.0.0.2", "192.168.1.9"],
    ("ipv4", "protocol"): [6, 17, 99],
    ("udp", "srcport"): [102, 4000, 40000],
    ("udp", "dstport"): [102, 4000, 40001],
    ("tcp", "srcport"): [102, 4000, 40000],
    ("tcp", "dstport"): [102, 4000, 40001],
    ("tcp", "flags"): [0x02, 0x10, 0x18],
    ("opaque", "length"): [0, 8, 64],
}


def random_request(rng: random.Random, max_layers: int = 4) -> AccessRequestPattern:
    depth = rng.randint(1, max_layers)
    chain = [rng.choice(LAYERS) for _ in range(depth)]
    node = None
    for layer in reversed(chain):
        fields = list(FIELD_REGISTRY[layer])
        picked = rng.sample(fields, rng.randint(0, len(fields)))
        facts = tuple(sorted((f, rng.choice(VALUE_POOLS[(layer, f)])) for f in picked))
        node = RequestNode(layer, facts, node)
    return AccessRequestPattern(node)


def random_flow(rng: random.Random, max_layers: int = 4, max_preds: int = 3) -> FlowPattern:
    depth = rng.randint(1, max_layers)
    chain = [rng.choice(LAYERS) for _ in range(depth)]
    node = None
    for layer in reversed(chain):
        leaves = []
        fields = list(FIELD_REGISTRY[layer])
        for _ in range(rng.randint(0, max_preds)):
            field = rng.choice(fields)
            pool = VALUE_POOLS[(layer, field)]
            want = FIELD_REGISTRY[layer][field]
            op = rng.choice(list(MatchOp))
            if op is MatchOp.EQ:
                leaves.append(where(field, op, rng.choice(pool)))
            elif op is MatchOp.IN_SET:
                leaves.append(where(field, op, frozenset(rng.sample(pool, rng.randint(1, len(pool))))))
            elif op is MatchOp.PREFIX and want is str:
                value = rng.choice(pool)
                leaves.append(where(field, op, value[: rng.randint(1, len(value))]))
            elif op is MatchOp.RANGE and want is int:
                lo = rng.choice(pool)
                hi = lo + rng.randint(0, 30)
                leaves.append(where(field, op, (lo, hi)))
            # prefix on int fields / range on str fields: skip, not well-typed
        children = tuple(leaves) + ((node,) if node is not None else ())
        node = PredicateNode(PredicateKind.HIERARCHY, layer, children=tuple(children))
    return FlowPattern(node).normalized()


# -- independent brute-force matcher -------------------------------------------


def _flatten_flow(flow: FlowPattern) -> list[tuple[tuple[str, ...], PredicateNode]]:
    """(layer path, node) pairs, hierarchy nodes included."""
    out = []
    node = flow.normalized().root
    path: tuple[str, ...] = ()
    while node is not None:
        path = path + (node.ident,)
        out.append((path, node))
        for leaf in node.children:
            if leaf.kind is not PredicateKind.HIERARCHY:
                out.append((path, leaf))
        nxt = None
        for child in node.children:
            if child.kind is PredicateKind.HIERARCHY:
                nxt = child
        node = nxt
    return out


def _flatten_request(request: AccessRequestPattern) -> dict[tuple[str, ...], dict]:
    out = {}
    path: tuple[str, ...] = ()
    node = request.root
    while node is not None:
        path = path + (node.layer,)
        out[path] = dict(node.facts)
        node = node.child
    return out


def _brute_eval(node: PredicateNode, fact) -> bool:
    if fact is None:
        return False
    op, operand = node.op, node.operand
    if op is MatchOp.EQ:
        return type(fact) is type(operand) and fact == operand
    if op is MatchOp.IN_SET:
        return any(type(fact) is type(v) and fact == v for v in operand)
    if op is MatchOp.PREFIX:
        return type(fact) is str and fact.startswith(operand)
    return type(fact) is int and operand[0] <= fact <= operand[1]


def brute_match_at_root(flow: FlowPattern, request: AccessRequestPattern) -> bool:
    entries = _flatten_flow(flow)
    anchors = _flatten_request(request)
    for path, node in entries:
        if node.kind is PredicateKind.HIERARCHY:
            if path not in anchors:
                return False
        else:
            facts = anchors.get(path)
            if facts is None or not _brute_eval(node, facts.get(node.ident)):
                return False
    return True


def brute_match_nested(flow: FlowPattern, request: AccessRequestPattern):
    anchors = list(_flatten_request(request))
    anchors.sort(key=len)
    node = request.root
    chain = []
    while node is not None:
        chain.append(node)
        node = node.child
    for idx, anchor_node in enumerate(chain):
        sub = AccessRequestPattern(anchor_node)
        if brute_match_at_root(flow, sub):
            return tuple(n.layer for n in chain[: idx + 1])
    return None


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xF10C)
