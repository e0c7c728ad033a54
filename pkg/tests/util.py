"""Shared builders for randomized designs used across the test modules."""

from __future__ import annotations

import numpy as np

from ascalib import (
    DesignSpec,
    Factor,
    ResponseMatrix,
    build_model_matrix,
    parse_model_formula,
)


def make_oneway(levels=("g1", "g2", "g3"), reps=2, *, nature="fixed"):
    f = Factor("A", tuple(levels), nature=nature)
    terms = parse_model_formula("A", [f])
    table = {"A": [lev for lev in levels for _ in range(reps)]}
    return DesignSpec.from_table([f], terms, table)


def make_twoway(levels_a=3, levels_b=2, reps=2, *, interaction=True):
    A = Factor("A", tuple(f"a{i+1}" for i in range(levels_a)))
    B = Factor("B", tuple(f"b{i+1}" for i in range(levels_b)))
    model = "A + B + A*B" if interaction else "A + B"
    terms = parse_model_formula(model, [A, B])
    col_a, col_b = [], []
    for a in A.levels:
        for b in B.levels:
            for _ in range(reps):
                col_a.append(a)
                col_b.append(b)
    return DesignSpec.from_table([A, B], terms, {"A": col_a, "B": col_b})


def make_repeated_measures(n_group_a=4, n_group_b=3, n_times=3):
    """Two crossed fixed factors plus a random subject factor nested in one."""
    subjects = [f"P{i+1:02d}" for i in range(n_group_a + n_group_b)]
    groups = ["R"] * n_group_a + ["NR"] * n_group_b
    times = [f"t{k+1}" for k in range(n_times)]
    col_g, col_t, col_p = [], [], []
    for subj, grp in zip(subjects, groups):
        for t in times:
            col_g.append(grp)
            col_t.append(t)
            col_p.append(subj)
    factors = [
        Factor("Responder", ("R", "NR")),
        Factor("Time", tuple(times)),
        Factor("Patient", tuple(subjects), nature="random", nested_in="Responder"),
    ]
    terms = parse_model_formula(
        "Responder + Time + Patient(Responder) + Responder*Time", factors
    )
    table = {"Responder": col_g, "Time": col_t, "Patient": col_p}
    return DesignSpec.from_table(factors, terms, table)


def random_balanced_design(rng: np.random.Generator, *, max_samples=200):
    """2-3 crossed factors, 2-4 levels, >=2 replicates, full interaction model."""
    while True:
        k = int(rng.integers(2, 4))
        sizes = [int(rng.integers(2, 5)) for _ in range(k)]
        reps = int(rng.integers(2, 4))
        if reps * int(np.prod(sizes)) <= max_samples:
            break
    factors = [
        Factor(f"F{i+1}", tuple(f"f{i+1}_{j+1}" for j in range(g)))
        for i, g in enumerate(sizes)
    ]
    pairs = " + ".join(
        f"{factors[i].name}*{factors[j].name}"
        for i in range(k)
        for j in range(i + 1, k)
    )
    model = " + ".join(f.name for f in factors) + " + " + pairs
    terms = parse_model_formula(model, factors)
    combos = [()]
    for f in factors:
        combos = [c + (lev,) for c in combos for lev in f.levels]
    table = {f.name: [] for f in factors}
    for combo in combos:
        for _ in range(reps):
            for f, lev in zip(factors, combo):
                table[f.name].append(lev)
    return DesignSpec.from_table(factors, terms, table)


def random_unbalanced_design(rng: np.random.Generator, *, max_cell=4):
    """Like the balanced generator but with 1..max_cell samples per cell."""
    k = int(rng.integers(2, 4))
    sizes = [int(rng.integers(2, 4)) for _ in range(k)]
    factors = [
        Factor(f"F{i+1}", tuple(f"f{i+1}_{j+1}" for j in range(g)))
        for i, g in enumerate(sizes)
    ]
    pairs = " + ".join(
        f"{factors[i].name}*{factors[j].name}"
        for i in range(k)
        for j in range(i + 1, k)
    )
    model = " + ".join(f.name for f in factors) + " + " + pairs
    terms = parse_model_formula(model, factors)
    combos = [()]
    for f in factors:
        combos = [c + (lev,) for c in combos for lev in f.levels]
    table = {f.name: [] for f in factors}
    for combo in combos:
        for _ in range(int(rng.integers(1, max_cell + 1))):
            for f, lev in zip(factors, combo):
                table[f.name].append(lev)
    return DesignSpec.from_table(factors, terms, table)


def random_response(spec: DesignSpec, rng: np.random.Generator, n_vars=5,
                    *, effect_sd=1.0) -> ResponseMatrix:
    """Noise plus a random contribution from every model term's span."""
    mm = build_model_matrix(spec)
    Y = rng.standard_normal((spec.n_samples, n_vars))
    for term in spec.terms[1:]:
        cols = mm.columns_of(term)
        Y += cols @ rng.standard_normal((cols.shape[1], n_vars)) * effect_sd
    variables = tuple(f"v{j+1}" for j in range(n_vars))
    return ResponseMatrix(Y, variables, spec.sample_ids)
