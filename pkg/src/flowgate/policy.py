"""Access policies, auxiliary predicates, and time-variability classification.

A policy is a three-tuple: the action to take, the flow pattern selecting
the frames it applies to, and an auxiliary precondition over non-flow system
attributes.  The precondition is held in conjunctive form — a set of
predicates that must all be true.  Operators author preconditions as binary
expression trees (AND/OR/XOR/NOT over named predicates); `to_conjunctive_form`
converts a tree to the conjunctive set by computing its CNF and merging each
disjunctive clause into one atomic predicate.

Attribute values are time-stamped: a binding is only usable inside its
validity interval, and a key declared time-variable in the catalog makes
every policy referencing it *dynamic* (its decisions inherit the shortest
binding validity instead of a fixed cache lifetime).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Mapping, Optional, Union

from .errors import ClassificationError, EvaluationError, PolicyError
from .patterns import FlowPattern, PredicateKind, flow_pattern_violations
from .frames import FIELD_REGISTRY

#: Binding timestamp meaning "never expires"; fits the wire u64.
FOREVER = 2**64 - 1

#: Trees above this leaf count are rejected: preconditions are authored by
#: hand and distribution-based CNF is exponential in the worst case.
MAX_TREE_LEAVES = 12

AttributeValue = Union[bool, int, float, str]

_TYPE_NAMES = {"bool": bool, "int": int, "decimal": float, "string": str}


class Action(Enum):
    GRANT = "GRANT"
    DENY = "DENY"


#: Applied when no policy speaks for a frame.
DEFAULT_ACTION = Action.DENY


class PolicyClass(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class AttributeKey:
    """Catalog entry for one system attribute."""

    name: str
    value_type: str = "string"
    time_variable: bool = False

    def __post_init__(self):
        if self.value_type not in _TYPE_NAMES:
            raise PolicyError(f"unknown attribute type {self.value_type!r}")


Catalog = Mapping[str, AttributeKey]


@dataclass(frozen=True)
class AttributeBinding:
    """A system attribute value together with its validity interval (ms)."""

    key: str
    value: AttributeValue
    valid_from: int
    valid_until: int

    def __post_init__(self):
        if self.valid_from > self.valid_until:
            raise PolicyError(f"binding {self.key!r}: valid_from exceeds valid_until")

    def valid_at(self, now: int) -> bool:
        return self.valid_from <= now <= self.valid_until


class CompareOp(Enum):
    EQ = "=="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="


@dataclass(frozen=True)
class Comparison:
    key: str
    op: CompareOp
    value: AttributeValue

    def evaluate(self, values: Mapping[str, AttributeValue]) -> bool:
        if self.key not in values:
            raise EvaluationError(f"attribute {self.key!r} is not bound")
        actual = values[self.key]
        if self.op is CompareOp.EQ:
            return type(actual) is type(self.value) and actual == self.value
        if self.op is CompareOp.NE:
            return not (type(actual) is type(self.value) and actual == self.value)
        if not _ordered_compatible(actual, self.value):
            raise EvaluationError(
                f"attribute {self.key!r}: cannot order {type(actual).__name__} "
                f"against {type(self.value).__name__}"
            )
        if self.op is CompareOp.LT:
            return actual < self.value
        if self.op is CompareOp.LE:
            return actual <= self.value
        if self.op is CompareOp.GT:
            return actual > self.value
        return actual >= self.value


def _ordered_compatible(a: AttributeValue, b: AttributeValue) -> bool:
    if type(a) is str and type(b) is str:
        return True
    return type(a) in (int, float) and type(b) in (int, float)


@dataclass(frozen=True)
class Term:
    """One disjunct of a predicate: a possibly negated comparison group.

    `source_id` names the authored predicate this term came from, so a
    conjunctive form can still be evaluated abstractly against a truth
    assignment of the original leaves.
    """

    source_id: str
    negated: bool
    comparisons: tuple[Comparison, ...]

    def __post_init__(self):
        if not self.comparisons:
            raise PolicyError(f"term {self.source_id!r} has no comparisons")

    def evaluate(self, values: Mapping[str, AttributeValue]) -> bool:
        result = any(c.evaluate(values) for c in self.comparisons)
        return not result if self.negated else result


@dataclass(frozen=True)
class AuxiliaryPredicate:
    """Atomic precondition: a disjunction of terms over attribute bindings."""

    id: str
    terms: tuple[Term, ...]

    def __post_init__(self):
        if not self.terms:
            raise PolicyError(f"predicate {self.id!r} has no terms")

    @property
    def required_keys(self) -> frozenset[str]:
        return frozenset(c.key for t in self.terms for c in t.comparisons)

    def evaluate(self, values: Mapping[str, AttributeValue]) -> bool:
        return any(t.evaluate(values) for t in self.terms)

    def evaluate_abstract(self, assignment: Mapping[str, bool]) -> bool:
        """Evaluate under a truth assignment of the original leaf predicates."""
        return any(assignment[t.source_id] ^ t.negated for t in self.terms)


def predicate(pid: str, *comparisons: Comparison) -> AuxiliaryPredicate:
    """A plain (leaf) predicate: one term, no negation."""
    return AuxiliaryPredicate(pid, (Term(pid, False, tuple(comparisons)),))


# ---------------------------------------------------------------------------
# Predicate trees and conversion to conjunctive form
# ---------------------------------------------------------------------------


class GateOp(Enum):
    AND = "&&"
    OR = "||"
    XOR = "^"
    NOT = "!"


@dataclass(frozen=True)
class TreeLeaf:
    predicate: AuxiliaryPredicate

    def evaluate_abstract(self, assignment: Mapping[str, bool]) -> bool:
        return assignment[self.predicate.id]


@dataclass(frozen=True)
class TreeGate:
    op: GateOp
    children: tuple["PredicateTree", ...]

    def __post_init__(self):
        want = 1 if self.op is GateOp.NOT else 2
        if len(self.children) != want:
            raise PolicyError(f"{self.op.name} takes exactly {want} operand(s)")

    def evaluate_abstract(self, assignment: Mapping[str, bool]) -> bool:
        vals = [c.evaluate_abstract(assignment) for c in self.children]
        if self.op is GateOp.NOT:
            return not vals[0]
        if self.op is GateOp.AND:
            return vals[0] and vals[1]
        if self.op is GateOp.OR:
            return vals[0] or vals[1]
        return vals[0] ^ vals[1]


PredicateTree = Union[TreeLeaf, TreeGate]


def tree_leaves(tree: PredicateTree) -> dict[str, AuxiliaryPredicate]:
    """Distinct leaf predicates by id; rejects one id bound to two bodies."""
    out: dict[str, AuxiliaryPredicate] = {}

    def walk(node: PredicateTree) -> None:
        if isinstance(node, TreeLeaf):
            prior = out.get(node.predicate.id)
            if prior is not None and prior != node.predicate:
                raise PolicyError(f"predicate id {node.predicate.id!r} bound twice")
            out[node.predicate.id] = node.predicate
            return
        for c in node.children:
            walk(c)

    walk(tree)
    return out


# A literal is (leaf id, negated); a clause is the disjunction of its literals.
_Literal = tuple[str, bool]
_Clause = frozenset[_Literal]


def _cnf_clauses(node: PredicateTree, negate: bool) -> set[_Clause]:
    """Distribution-based CNF with negation pushed to the leaves."""
    if isinstance(node, TreeLeaf):
        return {frozenset({(node.predicate.id, negate)})}
    op = node.op
    if op is GateOp.NOT:
        return _cnf_clauses(node.children[0], not negate)
    if op is GateOp.XOR:
        a, b = node.children
        # a ^ b  = (a|b) & (!a|!b);   !(a ^ b) = (a|!b) & (!a|b)
        if not negate:
            rewritten = TreeGate(
                GateOp.AND,
                (
                    TreeGate(GateOp.OR, (a, b)),
                    TreeGate(GateOp.OR, (TreeGate(GateOp.NOT, (a,)), TreeGate(GateOp.NOT, (b,)))),
                ),
            )
        else:
            rewritten = TreeGate(
                GateOp.AND,
                (
                    TreeGate(GateOp.OR, (a, TreeGate(GateOp.NOT, (b,)))),
                    TreeGate(GateOp.OR, (TreeGate(GateOp.NOT, (a,)), b)),
                ),
            )
        return _cnf_clauses(rewritten, False)
    if negate:
        op = GateOp.OR if op is GateOp.AND else GateOp.AND
    left = _cnf_clauses(node.children[0], negate)
    right = _cnf_clauses(node.children[1], negate)
    if op is GateOp.AND:
        return left | right
    return {ca | cb for ca in left for cb in right}


def _simplify(clauses: set[_Clause]) -> set[_Clause]:
    kept: set[_Clause] = set()
    for clause in clauses:
        if any((lid, not neg) in clause for lid, neg in clause):
            continue  # tautology
        kept.add(clause)
    # Subsumption: a clause implied by a strict subset adds nothing.
    return {c for c in kept if not any(o < c for o in kept)}


def _literal_name(lid: str, negated: bool) -> str:
    return f"!{lid}" if negated else lid


def _merge_clause(clause: _Clause, leaves: Mapping[str, AuxiliaryPredicate]) -> AuxiliaryPredicate:
    lits = sorted(clause, key=lambda l: (l[0], l[1]))
    if len(lits) == 1 and not lits[0][1]:
        return leaves[lits[0][0]]
    terms = []
    for lid, neg in lits:
        leaf = leaves[lid]
        if len(leaf.terms) != 1 or leaf.terms[0].negated:
            raise PolicyError(f"tree leaf {lid!r} must be a plain predicate")
        terms.append(Term(lid, neg, leaf.terms[0].comparisons))
    merged_id = "|".join(_literal_name(lid, neg) for lid, neg in lits)
    return AuxiliaryPredicate(merged_id, tuple(terms))


def to_conjunctive_form(tree: PredicateTree) -> frozenset[AuxiliaryPredicate]:
    """Equivalent conjunctive set of atomic predicates.

    Each element is an original leaf, a negated leaf, or a disjunction of
    (possibly negated) leaves merged into one predicate whose required keys
    are the union of its parts.
    """
    leaves = tree_leaves(tree)
    if len(leaves) > MAX_TREE_LEAVES:
        raise PolicyError(
            f"predicate tree has {len(leaves)} distinct leaves; the limit is {MAX_TREE_LEAVES}"
        )
    clauses = _simplify(_cnf_clauses(tree, False))
    if not clauses:
        # Tautological precondition; an empty conjunction means the same.
        return frozenset()
    return frozenset(_merge_clause(c, leaves) for c in clauses)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

DEFAULT_STATIC_MAX_VALIDITY_MS = 60_000


@dataclass(frozen=True)
class Policy:
    """(action, flow pattern, auxiliary precondition), plus artifact fields.

    `nexthop_ids` is the explicit fallback forwarding set used when the
    enforcement-point registry matches no destination-side predicate of the
    flow; it is not part of the core tuple.
    """

    id: str
    action: Action
    flow: FlowPattern
    auxiliary: frozenset[AuxiliaryPredicate] = frozenset()
    static_max_validity: int = DEFAULT_STATIC_MAX_VALIDITY_MS
    nexthop_ids: frozenset[str] = frozenset()

    @property
    def required_keys(self) -> frozenset[str]:
        keys: frozenset[str] = frozenset()
        for pred in self.auxiliary:
            keys |= pred.required_keys
        return keys


def classify(policy: Policy, catalog: Catalog) -> PolicyClass:
    """Dynamic iff any required attribute is declared time-variable.

    Raises ClassificationError on a key missing from the catalog; callers
    treat such a policy as non-evaluable and deny.
    """
    dynamic = False
    for key in sorted(policy.required_keys):
        entry = catalog.get(key)
        if entry is None:
            raise ClassificationError(f"policy {policy.id!r} references unknown attribute {key!r}")
        dynamic = dynamic or entry.time_variable
    return PolicyClass.DYNAMIC if dynamic else PolicyClass.STATIC


def evaluate_auxiliary(
    predicates: Iterable[AuxiliaryPredicate],
    bindings: Iterable[AttributeBinding],
    now: int,
) -> bool:
    """Conjunction over the predicate set; the empty set is TRUE.

    Raises EvaluationError when a required binding is missing or not valid
    at `now` — never defaults.
    """
    by_key: dict[str, AttributeBinding] = {b.key: b for b in bindings}
    values: dict[str, AttributeValue] = {}
    preds = list(predicates)
    for pred in preds:
        for key in pred.required_keys:
            binding = by_key.get(key)
            if binding is None:
                raise EvaluationError(f"no binding for attribute {key!r}")
            if not binding.valid_at(now):
                raise EvaluationError(f"binding for {key!r} is outside its validity interval")
            values[key] = binding.value
    return all(pred.evaluate(values) for pred in preds)


def validate_policy(
    policy: Policy,
    catalog: Optional[Catalog] = None,
    registry: Mapping[str, Mapping[str, type]] = FIELD_REGISTRY,
) -> list[str]:
    """All contract violations of a policy; an empty list means valid."""
    violations = flow_pattern_violations(policy.flow.root)
    if not policy.id:
        violations.append("empty policy id")
    if policy.static_max_validity <= 0:
        violations.append("static-max-validity must be positive")

    def check_fields(node) -> None:
        fields = registry.get(node.ident)
        if fields is None:
            violations.append(f"unknown layer {node.ident!r}")
            return
        for leaf in node.leaf_children():
            if leaf.kind is not PredicateKind.PARAMETRIC:
                continue
            want = fields.get(leaf.ident)
            if want is None:
                violations.append(f"unknown field {node.ident}.{leaf.ident}")
            elif not _operand_typed(leaf, want):
                violations.append(f"operand of {node.ident}.{leaf.ident} is not {want.__name__}")
        child = node.hierarchy_child()
        if child is not None:
            check_fields(child)

    if not violations:
        check_fields(policy.flow.root)
    if catalog is not None:
        for key in sorted(policy.required_keys):
            if key not in catalog:
                violations.append(f"unknown attribute {key!r}")
    return violations


def _operand_typed(leaf, want: type) -> bool:
    from .patterns import MatchOp

    if leaf.op is MatchOp.EQ:
        return type(leaf.operand) is want
    if leaf.op is MatchOp.IN_SET:
        return all(type(v) is want for v in leaf.operand)
    if leaf.op is MatchOp.PREFIX:
        return want is str
    return want is int


def exhaustive_assignments(ids: list[str]) -> Iterator[dict[str, bool]]:
    """All truth assignments of the given predicate ids (2^n of them)."""
    for bits in itertools.product((False, True), repeat=len(ids)):
        yield dict(zip(ids, bits))
