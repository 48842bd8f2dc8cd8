"""flowgate: attribute-gated, pattern-matched frame forwarding fabric.

Four cooperating services form the fabric: a policy administration point
(CRUD, persistence, distribution), an attribute store (value resolution with
validity intervals), a decision point (policy evaluation and decision
derivation), and inline enforcement points that sit bump-in-the-wire in
front of the devices they protect.  The supporting layers — flow-pattern
matching, frame dissection, the policy model, the decision engine, and the
authenticated wire protocol — are importable on their own.
"""

__version__ = "0.1.0"
