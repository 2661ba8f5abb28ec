"""Spatial knowledge base: weighted first-order rules over cell predicates,
and their grounding over a leaf frontier into a weighted ground program.

Predicates: Flood (open, one per leaf - the inference target), and theable
closed predicates Adjacent, Lower, HighElevation which are evaluated to crisp
0/1 constants from cell geometry and mean elevation during grounding.

Rule DSL, one rule per line:

    w=<float>: Lit ('&' Lit)* '->' Lit
    Lit := ['!'] Pred '(' Var [',' Var] ')'

plus `param <name>=<float>` lines (e.g. the HighElevation threshold e).
Lines starting with '#' and blank lines are ignored.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .hierarchy import Frontier, adjacency_index_pairs, leaf_means
from .raster import SparseLabels

PREDICATE_ARITY = {"Flood": 1, "Adjacent": 2, "Lower": 2, "HighElevation": 1}
OPEN_PREDICATE = "Flood"


class KBSyntaxError(ValueError):
    """Rule text rejected: syntax, unknown predicate, bad arity or weight."""


@dataclass(frozen=True)
class Literal:
    predicate: str
    args: tuple
    negated: bool = False

    def __str__(self):
        bang = "!" if self.negated else ""
        return f"{bang}{self.predicate}({', '.join(self.args)})"


@dataclass(frozen=True)
class Rule:
    """One weighted implication: body literals -> head literal."""

    name: str
    weight: float
    body: tuple
    head: Literal
    parameters: Mapping = field(default_factory=dict)

    def variables(self) -> tuple:
        seen = []
        for lit in (*self.body, self.head):
            for v in lit.args:
                if v not in seen:
                    seen.append(v)
        return tuple(seen)


@dataclass(frozen=True)
class KnowledgeBase:
    rules: tuple
    parameters: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.rules:
            raise ValueError("knowledge base must contain at least one rule")

    def __len__(self):
        return len(self.rules)


DEFAULT_KB_TEXT = """\
# Flood-domain defaults. Thresholds and weights are configuration values.
param e=60
w=1.0: Flood(A) & Adjacent(A,B) & Lower(B,A) -> Flood(B)
w=1.0: !Flood(A) & Adjacent(A,B) & Lower(A,B) -> !Flood(B)
w=0.2: Flood(A) & Adjacent(A,B) -> Flood(B)
w=1.0: HighElevation(A) -> !Flood(A)
"""

_PARAM_RE = re.compile(r"^param\s+([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(\S+)\s*$")
_RULE_RE = re.compile(r"^w\s*=\s*([^\s:]+)\s*:\s*(.+)$")
_LIT_RE = re.compile(
    r"^(!?)\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(\s*([A-Za-z_][A-Za-z0-9_]*)"
    r"\s*(?:,\s*([A-Za-z_][A-Za-z0-9_]*)\s*)?\)$")


def _parse_literal(text: str, lineno: int) -> Literal:
    m = _LIT_RE.match(text.strip())
    if not m:
        raise KBSyntaxError(f"line {lineno}: cannot parse literal {text.strip()!r}")
    neg, pred, a1, a2 = m.groups()
    if pred not in PREDICATE_ARITY:
        raise KBSyntaxError(f"line {lineno}: unknown predicate {pred!r}")
    args = (a1,) if a2 is None else (a1, a2)
    if len(args) != PREDICATE_ARITY[pred]:
        raise KBSyntaxError(f"line {lineno}: {pred} takes {PREDICATE_ARITY[pred]} "
                            f"argument(s), got {len(args)}")
    return Literal(predicate=pred, args=args, negated=bool(neg))


def parse_kb(text: str) -> KnowledgeBase:
    """Parse rule DSL text into a validated KnowledgeBase.

    Raises:
        KBSyntaxError: malformed line (with line number), unknown predicate,
            negative or non-finite weight, more than two distinct variables,
            or a HighElevation rule without a `param e=` line.
    """
    params: dict = {}
    raw_rules = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        pm = _PARAM_RE.match(line)
        if pm:
            try:
                params[pm.group(1)] = float(pm.group(2))
            except ValueError:
                raise KBSyntaxError(f"line {lineno}: bad param value {pm.group(2)!r}") from None
            continue
        rm = _RULE_RE.match(line)
        if not rm:
            raise KBSyntaxError(f"line {lineno}: expected 'w=<float>: body -> head' "
                                f"or 'param name=<float>', got {line!r}")
        try:
            weight = float(rm.group(1))
        except ValueError:
            raise KBSyntaxError(f"line {lineno}: bad weight {rm.group(1)!r}") from None
        if not np.isfinite(weight) or weight < 0:
            raise KBSyntaxError(f"line {lineno}: weight must be finite and >= 0, "
                                f"got {weight}")
        sides = rm.group(2).split("->")
        if len(sides) != 2:
            raise KBSyntaxError(f"line {lineno}: rule needs exactly one '->'")
        body = tuple(_parse_literal(part, lineno) for part in sides[0].split("&"))
        head = _parse_literal(sides[1], lineno)
        raw_rules.append((lineno, weight, body, head))

    rules = []
    for i, (lineno, weight, body, head) in enumerate(raw_rules):
        rule = Rule(name=f"R{i + 1}", weight=weight, body=body, head=head,
                    parameters=dict(params))
        if len(rule.variables()) > 2:
            raise KBSyntaxError(f"line {lineno}: at most 2 distinct variables "
                                f"per rule, got {rule.variables()}")
        uses_high = any(l.predicate == "HighElevation" for l in (*body, head))
        if uses_high and "e" not in params:
            raise KBSyntaxError(f"line {lineno}: HighElevation requires a "
                                f"'param e=<float>' line")
        rules.append(rule)
    if not rules:
        raise KBSyntaxError("no rules found")
    return KnowledgeBase(rules=tuple(rules), parameters=dict(params))


def default_kb() -> KnowledgeBase:
    return parse_kb(DEFAULT_KB_TEXT)


# ---------------------------------------------------------------------------
# Grounding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundLiteral:
    """A literal with its variables substituted.

    Either an open atom reference (atom set, const None) with a negation
    flag, or a pre-evaluated closed predicate (atom None, const in [0,1],
    negation already folded into const).
    """

    atom: Optional[int]
    negated: bool
    const: Optional[float]


@dataclass(frozen=True)
class GroundRule:
    rule_index: int
    name: str
    weight: float
    body: tuple
    head: GroundLiteral
    cells: tuple  # bound leaf indices, in rule-variable order


class GroundProgram:
    """Grounded weighted rules over atom indices - the solver's input.

    One open atom per frontier leaf (canonical leaf order). `observed` maps
    atom index to a clamped truth value; label-derived clamps are 0/1, and
    the pipeline may add soft clamps for leaves frozen at previously solved
    values. Rules whose pre-evaluated constants make them satisfied for every
    assignment (a false closed body literal, or a true closed head) are
    omitted at grounding time.

    The constructor also compiles the rule list into flat arrays used by the
    vectorized objective/subgradient: with x the atom-value vector, rule r's
    body truth is max(0, sum_j b_sgn[r,j]*x[b_idx[r,j]] + b_base[r]) and its
    head truth is h_sgn[r]*x[h_idx[r]] + h_base[r].
    """

    def __init__(self, n_atoms: int, leaves: tuple, rules: Sequence,
                 observed: Mapping, conflicted: Sequence = (),
                 _compiled: Optional[dict] = None):
        self.n_atoms = int(n_atoms)
        self.leaves = tuple(leaves)
        self.rules = tuple(rules)
        self.observed = dict(observed)
        self.conflicted = tuple(conflicted)
        for idx, val in self.observed.items():
            if not (0 <= idx < self.n_atoms):
                raise ValueError(f"observed atom {idx} out of range")
            if not (0.0 <= val <= 1.0):
                raise ValueError(f"observed value {val} outside [0,1]")
        self._arrays = _compiled if _compiled is not None else self._compile()
        self.clamp_idx = np.fromiter(sorted(self.observed), dtype=np.int64,
                                     count=len(self.observed))
        self.clamp_val = np.array([self.observed[i] for i in self.clamp_idx],
                                  dtype=np.float64)
        self.free_mask = np.ones(self.n_atoms, dtype=bool)
        self.free_mask[self.clamp_idx] = False

    def _compile(self) -> dict:
        R = len(self.rules)
        lmax = max((sum(1 for l in r.body if l.atom is not None) for r in self.rules),
                   default=0)
        lmax = max(lmax, 1)
        b_idx = np.full((R, lmax), -1, dtype=np.int64)
        b_sgn = np.zeros((R, lmax), dtype=np.float64)
        b_base = np.zeros(R, dtype=np.float64)
        w = np.zeros(R, dtype=np.float64)
        h_idx = np.full(R, -1, dtype=np.int64)
        h_sgn = np.zeros(R, dtype=np.float64)
        h_base = np.zeros(R, dtype=np.float64)
        for r, gr in enumerate(self.rules):
            w[r] = gr.weight
            base = -(len(gr.body) - 1)
            j = 0
            for lit in gr.body:
                if lit.atom is None:
                    base += lit.const
                elif lit.negated:
                    b_idx[r, j] = lit.atom
                    b_sgn[r, j] = -1.0
                    base += 1.0
                    j += 1
                else:
                    b_idx[r, j] = lit.atom
                    b_sgn[r, j] = 1.0
                    j += 1
            b_base[r] = base
            if gr.head.atom is None:
                h_base[r] = gr.head.const
            elif gr.head.negated:
                h_idx[r] = gr.head.atom
                h_sgn[r] = -1.0
                h_base[r] = 1.0
            else:
                h_idx[r] = gr.head.atom
                h_sgn[r] = 1.0
        return {"b_idx": b_idx, "b_sgn": b_sgn, "b_base": b_base, "w": w,
                "h_idx": h_idx, "h_sgn": h_sgn, "h_base": h_base}

    @property
    def arrays(self) -> dict:
        return self._arrays

    def clamp(self, extra: Mapping) -> "GroundProgram":
        """New program with additional clamped atoms (values in [0,1]).

        Re-clamping an atom to a different value is an error.
        """
        merged = dict(self.observed)
        for idx, val in extra.items():
            if idx in merged and merged[idx] != val:
                raise ValueError(f"atom {idx} already clamped to {merged[idx]}, "
                                 f"cannot re-clamp to {val}")
            merged[int(idx)] = float(val)
        return GroundProgram(self.n_atoms, self.leaves, self.rules, merged,
                             self.conflicted, _compiled=self._arrays)


def _instantiate(rule: Rule, rule_index: int, binding: Mapping,
                 elev_mean: np.ndarray, pairset, params: Mapping) -> Optional[GroundRule]:
    """Ground one rule under a variable binding; None if trivially satisfied."""

    def lit_value(lit: Literal):
        # returns GroundLiteral; closed predicates evaluate to crisp 0/1
        if lit.predicate == OPEN_PREDICATE:
            return GroundLiteral(atom=int(binding[lit.args[0]]),
                                 negated=lit.negated, const=None)
        if lit.predicate == "Adjacent":
            a, b = binding[lit.args[0]], binding[lit.args[1]]
            truth = 1.0 if (min(a, b), max(a, b)) in pairset and a != b else 0.0
        elif lit.predicate == "Lower":
            a, b = binding[lit.args[0]], binding[lit.args[1]]
            truth = 1.0 if elev_mean[a] <= elev_mean[b] else 0.0
        else:  # HighElevation
            a = binding[lit.args[0]]
            truth = 1.0 if elev_mean[a] > params["e"] else 0.0
        if lit.negated:
            truth = 1.0 - truth
        return GroundLiteral(atom=None, negated=False, const=truth)

    body = []
    for lit in rule.body:
        g = lit_value(lit)
        if g.atom is None and g.const == 0.0:
            return None  # body conjunction can never exceed 0: satisfied
        body.append(g)
    head = lit_value(rule.head)
    if head.atom is None and head.const == 1.0:
        return None  # head always true: satisfied
    cells = tuple(int(binding[v]) for v in rule.variables())
    return GroundRule(rule_index=rule_index, name=rule.name, weight=rule.weight,
                      body=tuple(body), head=head, cells=cells)


def ground(kb: KnowledgeBase, frontier: Frontier, elevation: np.ndarray,
           sparse: SparseLabels) -> GroundProgram:
    """Instantiate the knowledge base over the frontier's leaves.

    One open atom per leaf. Two-variable rules are instantiated over adjacent
    leaf pairs, both directions. Closed predicates are evaluated from per-leaf
    mean elevation: Lower(x, y) iff elev(x) <= elev(y); HighElevation(x) iff
    elev(x) > e. A leaf containing sparse labels is clamped to their majority
    label; ties leave the leaf free and are recorded as conflicted.

    Output ordering is canonical: rules in knowledge-base order, then leaf /
    pair order, so repeated runs produce identical programs.
    """
    n = len(frontier)
    elev_mean = leaf_means(elevation, frontier)
    pairs = adjacency_index_pairs(frontier)
    pairset = {(int(i), int(j)) for i, j in pairs}

    owner = frontier.owner_map()
    votes: dict = {}
    for row, col, label in sparse.entries:
        idx = int(owner[row, col])
        votes.setdefault(idx, [0, 0])[label] += 1
    observed = {}
    conflicted = []
    for idx in sorted(votes):
        zeros, ones = votes[idx]
        if ones > zeros:
            observed[idx] = 1.0
        elif zeros > ones:
            observed[idx] = 0.0
        else:
            conflicted.append(idx)

    grounded = []
    for rule_index, rule in enumerate(kb.rules):
        variables = rule.variables()
        if len(variables) == 1:
            var = variables[0]
            for a in range(n):
                g = _instantiate(rule, rule_index, {var: a}, elev_mean,
                                 pairset, kb.parameters)
                if g is not None:
                    grounded.append(g)
        else:
            v1, v2 = variables
            for i, j in pairs:
                for a, b in ((int(i), int(j)), (int(j), int(i))):
                    g = _instantiate(rule, rule_index, {v1: a, v2: b},
                                     elev_mean, pairset, kb.parameters)
                    if g is not None:
                        grounded.append(g)

    return GroundProgram(n_atoms=n, leaves=frontier.leaves, rules=grounded,
                         observed=observed, conflicted=conflicted)


@dataclass(frozen=True)
class CountsReport:
    n_atoms: int
    n_ground_rules: int
    n_clamped: int

    def as_dict(self) -> dict:
        return {"n_atoms": self.n_atoms, "n_ground_rules": self.n_ground_rules,
                "n_clamped": self.n_clamped}


def count_ground_atoms(program: GroundProgram) -> CountsReport:
    """Pure accounting used by the grounding-economy comparisons."""
    return CountsReport(n_atoms=program.n_atoms,
                        n_ground_rules=len(program.rules),
                        n_clamped=len(program.observed))
