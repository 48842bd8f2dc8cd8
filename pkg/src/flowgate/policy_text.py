"""Text formats: policy files, attribute catalogs, precondition expressions.

Policy file — one policy per document, ``#`` comments allowed::

    id goose-trip
    action GRANT
    static-max-validity 60000
    nexthop dep-b                      # optional, repeatable
    flow: eth { goose { appid == 5 } }
    aux: a1 && (a2 || a3)              # optional
    a1: breaker-position == "closed"
    a2: mode == "normal"
    a3: mode == "test"

The ``flow:`` clause may span lines; it ends when its braces balance.  Each
predicate referenced from ``aux:`` needs a definition line ``<id>: <key> <op>
<literal> [|| <key> <op> <literal> ...]`` with ops ==, !=, <, <=, >, >=.

Attribute catalog — one attribute per line::

    breaker-position string time-variable
    site-id string
    max-current int time-variable

Types: bool, int, decimal, string.
"""

from __future__ import annotations

import re
from typing import Optional

from .errors import PolicyError
from .pattern_text import _parse_literal, _tokenize, format_pattern, parse_pattern
from .policy import (
    Action,
    AttributeKey,
    AttributeValue,
    AuxiliaryPredicate,
    Comparison,
    CompareOp,
    GateOp,
    Policy,
    PredicateTree,
    TreeGate,
    TreeLeaf,
    predicate,
    to_conjunctive_form,
)

_COMPARE_OPS = {op.value: op for op in CompareOp}


def _strip(line: str) -> str:
    # Comments start at an unquoted '#'.
    out = []
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
        i += 1
    return "".join(out).strip()


def parse_catalog(text: str) -> dict[str, AttributeKey]:
    catalog: dict[str, AttributeKey] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise PolicyError(f"catalog line {lineno}: expected 'name type [time-variable]'")
        name, vtype = parts[0], parts[1]
        time_variable = False
        if len(parts) == 3:
            if parts[2] != "time-variable":
                raise PolicyError(f"catalog line {lineno}: unknown flag {parts[2]!r}")
            time_variable = True
        if name in catalog:
            raise PolicyError(f"catalog line {lineno}: duplicate attribute {name!r}")
        catalog[name] = AttributeKey(name, vtype, time_variable)
    return catalog


def format_catalog(catalog: dict[str, AttributeKey]) -> str:
    lines = []
    for key in sorted(catalog.values(), key=lambda k: k.name):
        suffix = " time-variable" if key.time_variable else ""
        lines.append(f"{key.name} {key.value_type}{suffix}")
    return "\n".join(lines) + "\n"


def parse_comparison_chain(text: str) -> list[Comparison]:
    """``key op literal`` groups joined by ``||``."""
    comparisons = []
    for part in text.split("||"):
        m = re.match(r"\s*([A-Za-z_][\w\-]*)\s*(==|!=|<=|>=|<|>)\s*(.+?)\s*$", part)
        if m is None:
            raise PolicyError(f"bad comparison {part.strip()!r}")
        key, op, literal = m.groups()
        comparisons.append(Comparison(key, _COMPARE_OPS[op], _parse_attr_literal(literal)))
    return comparisons


def _parse_attr_literal(text: str) -> AttributeValue:
    tokens = _tokenize(text)
    if len(tokens) != 1:
        raise PolicyError(f"bad literal {text!r}")
    return _parse_literal(tokens[0])


# Precondition expression parser: ident, ! unary, ^ binds tighter than &&,
# which binds tighter than ||.  All gates are binary.

_EXPR_TOKEN = re.compile(r"\s*(\(|\)|&&|\|\||\^|!|[A-Za-z_][\w\-]*)")


def _expr_tokens(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _EXPR_TOKEN.match(text, pos)
        if m is None:
            rest = text[pos:].strip()
            if not rest:
                break
            raise PolicyError(f"bad precondition expression near {rest!r}")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def parse_tree(text: str, definitions: dict[str, AuxiliaryPredicate]) -> PredicateTree:
    tokens = _expr_tokens(text)
    pos = 0

    def peek() -> Optional[str]:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        tok = peek()
        if tok is None:
            raise PolicyError("unexpected end of precondition expression")
        pos += 1
        return tok

    def parse_atom() -> PredicateTree:
        tok = take()
        if tok == "(":
            node = parse_or()
            if take() != ")":
                raise PolicyError("unbalanced parenthesis in precondition")
            return node
        if tok == "!":
            return TreeGate(GateOp.NOT, (parse_atom(),))
        if tok in ("&&", "||", "^", ")"):
            raise PolicyError(f"unexpected {tok!r} in precondition")
        if tok not in definitions:
            raise PolicyError(f"undefined predicate {tok!r}")
        return TreeLeaf(definitions[tok])

    def parse_binary(sub, ops: tuple[str, ...]) -> PredicateTree:
        node = sub()
        while peek() in ops:
            op = take()
            right = sub()
            node = TreeGate(GateOp(op), (node, right))
        return node

    def parse_xor() -> PredicateTree:
        return parse_binary(parse_atom, ("^",))

    def parse_and() -> PredicateTree:
        return parse_binary(parse_xor, ("&&",))

    def parse_or() -> PredicateTree:
        return parse_binary(parse_and, ("||",))

    tree = parse_or()
    if peek() is not None:
        raise PolicyError(f"trailing input in precondition: {peek()!r}")
    return tree


def parse_policy(text: str) -> Policy:
    """Parse one policy document."""
    fields: dict[str, str] = {}
    nexthops: list[str] = []
    definitions: dict[str, AuxiliaryPredicate] = {}
    aux_expr: Optional[str] = None
    flow_text: Optional[str] = None

    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = _strip(lines[i])
        i += 1
        if not line:
            continue
        if line.startswith("flow:"):
            chunk = line[len("flow:") :]
            depth = chunk.count("{") - chunk.count("}")
            while (depth > 0 or not chunk.strip()) and i < len(lines):
                more = _strip(lines[i])
                i += 1
                chunk += " " + more
                depth += more.count("{") - more.count("}")
            flow_text = chunk.strip()
            continue
        if line.startswith("aux:"):
            aux_expr = line[len("aux:") :].strip()
            continue
        m = re.match(r"([A-Za-z_][\w\-]*)\s*:\s*(.+)$", line)
        if m is not None:
            pid, body = m.groups()
            if pid in definitions:
                raise PolicyError(f"predicate {pid!r} defined twice")
            definitions[pid] = predicate(pid, *parse_comparison_chain(body))
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise PolicyError(f"bad policy line {line!r}")
        key, value = parts
        if key == "nexthop":
            nexthops.extend(value.split())
        elif key in fields:
            raise PolicyError(f"duplicate policy field {key!r}")
        else:
            fields[key] = value

    if "id" not in fields:
        raise PolicyError("policy has no id")
    if flow_text is None:
        raise PolicyError("policy has no flow pattern")
    action_name = fields.get("action", "DENY").upper()
    try:
        action = Action(action_name)
    except ValueError:
        raise PolicyError(f"unknown action {action_name!r}") from None

    auxiliary: frozenset[AuxiliaryPredicate] = frozenset()
    if aux_expr:
        auxiliary = to_conjunctive_form(parse_tree(aux_expr, definitions))

    return Policy(
        id=fields["id"],
        action=action,
        flow=parse_pattern(flow_text),
        auxiliary=auxiliary,
        static_max_validity=int(fields.get("static-max-validity", "60000")),
        nexthop_ids=frozenset(nexthops),
    )


def format_policy(policy: Policy) -> str:
    """Serialize a policy; preconditions are emitted in conjunctive form."""
    lines = [
        f"id {policy.id}",
        f"action {policy.action.value}",
        f"static-max-validity {policy.static_max_validity}",
    ]
    for dep in sorted(policy.nexthop_ids):
        lines.append(f"nexthop {dep}")
    lines.append(f"flow: {format_pattern(policy.flow)}")
    preds = sorted(policy.auxiliary, key=lambda p: p.id)
    if preds:
        names = []
        for idx, pred in enumerate(preds):
            name = f"c{idx}"
            names.append(name)
            chain = " || ".join(_format_term(t) for t in pred.terms)
            lines.append(f"{name}: {chain}")
        lines.insert(3 + len(policy.nexthop_ids), "aux: " + " && ".join(names))
    return "\n".join(lines) + "\n"


def _format_term(term) -> str:
    if term.negated:
        flipped = {
            CompareOp.EQ: CompareOp.NE,
            CompareOp.NE: CompareOp.EQ,
            CompareOp.LT: CompareOp.GE,
            CompareOp.LE: CompareOp.GT,
            CompareOp.GT: CompareOp.LE,
            CompareOp.GE: CompareOp.LT,
        }
        if len(term.comparisons) != 1:
            raise PolicyError(
                f"cannot re-serialize negated multi-comparison predicate {term.source_id!r}"
            )
        c = term.comparisons[0]
        return _format_comparison(Comparison(c.key, flipped[c.op], c.value))
    return " || ".join(_format_comparison(c) for c in term.comparisons)


def _format_comparison(c: Comparison) -> str:
    from .pattern_text import _format_literal

    return f"{c.key} {c.op.value} {_format_literal(c.value)}"


def parse_policy_set(text: str) -> list[Policy]:
    """Parse a multi-policy document with ``---`` separators."""
    docs = re.split(r"^\s*---\s*$", text, flags=re.MULTILINE)
    return [parse_policy(doc) for doc in docs if _has_content(doc)]


def format_policy_set(policies: list[Policy]) -> str:
    return "\n---\n".join(format_policy(p) for p in sorted(policies, key=lambda p: p.id))


def _has_content(doc: str) -> bool:
    return any(_strip(line) for line in doc.splitlines())
