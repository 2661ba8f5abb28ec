"""Small shared builders for the test suite."""

import numpy as np

from skihl.hierarchy import HierarchyConfig, build_root, refine
from skihl.knowledge import GroundLiteral, GroundProgram, GroundRule
from skihl.raster import FeatureStack


def make_stack(rows, cols, bands=2, seed=0):
    g = np.random.Generator(np.random.Philox(seed))
    values = g.uniform(-1.0, 1.0, size=(bands, rows, cols))
    elevation = g.uniform(0.0, 100.0, size=(rows, cols))
    return FeatureStack(rows=rows, cols=cols, bands=bands,
                        values=values, elevation=elevation)


def random_frontier(rng, rows=None, cols=None, eta=None, max_level=None,
                    n_steps=3):
    """A frontier after a random sequence of valid refinements.

    Dimensions deliberately include non-multiples of eta^K so clipped edge
    cells participate.
    """
    rows = int(rng.integers(5, 40)) if rows is None else rows
    cols = int(rng.integers(5, 40)) if cols is None else cols
    eta = int(rng.integers(2, 4)) if eta is None else eta
    max_level = int(rng.integers(1, 4)) if max_level is None else max_level
    frontier = build_root(rows, cols, HierarchyConfig(eta=eta, max_level=max_level))
    for _ in range(n_steps):
        refinable = [c for c in frontier.leaves if c.level >= 1]
        if not refinable:
            break
        k = int(rng.integers(0, len(refinable) + 1))
        picked = rng.choice(len(refinable), size=k, replace=False)
        frontier = refine(frontier, {refinable[i] for i in picked})
    return frontier


def open_lit(atom, negated=False):
    return GroundLiteral(atom=int(atom), negated=negated, const=None)


def closed_lit(const):
    return GroundLiteral(atom=None, negated=False, const=float(const))


def grule(weight, body, head, rule_index=0, name="T"):
    return GroundRule(rule_index=rule_index, name=name, weight=float(weight),
                      body=tuple(body), head=head, cells=())


def make_program(n_atoms, rules, observed=None):
    return GroundProgram(n_atoms=n_atoms, leaves=tuple(range(n_atoms)),
                         rules=tuple(rules), observed=observed or {})


def random_program(rng, n_free_max=3):
    """A random small ground program plus a grid-aligned init.

    Shape restrictions keep the exact minimizer near the 0.01 oracle grid:
    bodies hold at most one open atom (plus optional 0/1 constants), heads are
    open or constant, and clamps are crisp. Returns (program, init values).
    """
    n_atoms = int(rng.integers(1, 6))
    n_free = int(rng.integers(1, min(n_free_max, n_atoms) + 1))
    clamped = rng.choice(n_atoms, size=n_atoms - n_free, replace=False)
    observed = {int(i): float(rng.integers(0, 2)) for i in clamped}

    rules = []
    for r in range(int(rng.integers(1, 7))):
        body = [open_lit(rng.integers(0, n_atoms), negated=bool(rng.integers(0, 2)))]
        if rng.integers(0, 2):
            body.append(closed_lit(rng.integers(0, 2)))
        if rng.integers(0, 3) == 0:
            head = closed_lit(rng.integers(0, 2))
        else:
            head = open_lit(rng.integers(0, n_atoms), negated=bool(rng.integers(0, 2)))
        weight = float(rng.choice([0.5, 1.0, 2.0]))
        rules.append(grule(weight, body, head, rule_index=r, name=f"G{r}"))

    program = make_program(n_atoms, rules, observed)
    init = rng.integers(0, 101, size=n_atoms) / 100.0
    for i, v in observed.items():
        init[i] = v
    return program, init
