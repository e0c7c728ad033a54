"""Experimental-design structures: factors, model terms and their derived quantities.

The :class:`DesignSpec` is the single source of truth for the structure of an
experiment.  Everything downstream (coding, degrees of freedom, F-ratio
references, permutation schemes) is derived from it, never re-inferred from
data.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import FormulaError, InvalidDesignError

NATURES = ("fixed", "random")
KINDS = ("nominal", "ordinal")


@dataclass(frozen=True)
class Factor:
    """One experimental factor with its ordered level labels.

    ``nested_in`` names the parent factor when the levels of this factor only
    occur under a single parent level each (checked against the design table
    when a :class:`DesignSpec` is built).  ``kind`` is reporting metadata only;
    all factors are coded as categorical.
    """

    name: str
    levels: tuple[str, ...]
    nature: str = "fixed"
    kind: str = "nominal"
    nested_in: str | None = None

    def __post_init__(self) -> None:
        if not self.name or not self.name.isidentifier():
            raise InvalidDesignError(f"factor name {self.name!r} is not an identifier")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if len(self.levels) < 2:
            raise InvalidDesignError(f"factor {self.name!r} needs >= 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise InvalidDesignError(f"factor {self.name!r} has duplicate level labels")
        if self.nature not in NATURES:
            raise InvalidDesignError(f"factor {self.name!r}: nature must be one of {NATURES}")
        if self.kind not in KINDS:
            raise InvalidDesignError(f"factor {self.name!r}: kind must be one of {KINDS}")
        if self.nested_in == self.name:
            raise InvalidDesignError(f"factor {self.name!r} cannot be nested in itself")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class Term:
    """One component of the model: intercept, main/nested factor or interaction.

    ``order`` follows the usual hierarchy convention: main factors have order
    1, a nested factor has its parent's order plus one, and an interaction sums
    the orders of its members.  The residual pseudo-term is used as an F-ratio
    reference and never appears in a model term list.
    """

    kind: str  # intercept | main | nested | interaction | residual
    factors: tuple[str, ...]
    order: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.kind == "interaction" and len(self.factors) < 2:
            raise InvalidDesignError("interaction terms need >= 2 distinct factors")
        if len(set(self.factors)) != len(self.factors):
            raise InvalidDesignError(f"term references factor twice: {self.factors}")

    @property
    def label(self) -> str:
        if self.kind == "intercept":
            return "(intercept)"
        if self.kind == "residual":
            return "(residuals)"
        if self.kind == "interaction":
            return "*".join(self.factors)
        return self.factors[0]

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.label


INTERCEPT = Term("intercept", ())
RESIDUAL = Term("residual", ())


def _factor_order(name: str, factor_map: Mapping[str, Factor]) -> int:
    order, seen = 1, {name}
    parent = factor_map[name].nested_in
    while parent is not None:
        if parent in seen:
            raise InvalidDesignError(f"nesting cycle through factor {name!r}")
        seen.add(parent)
        order += 1
        parent = factor_map[parent].nested_in
    return order


def nesting_ancestors(name: str, factor_map: Mapping[str, Factor]) -> tuple[str, ...]:
    """All factors the named factor is (transitively) nested in."""
    out: list[str] = []
    parent = factor_map[name].nested_in
    while parent is not None:
        if parent in out:
            raise InvalidDesignError(f"nesting cycle through factor {name!r}")
        out.append(parent)
        parent = factor_map[parent].nested_in
    return tuple(out)


def main_term(name: str, factor_map: Mapping[str, Factor]) -> Term:
    """Main-effect term for one factor; becomes a nested term if the factor is nested."""
    if name not in factor_map:
        raise FormulaError(f"unknown factor {name!r}")
    kind = "nested" if factor_map[name].nested_in else "main"
    return Term(kind, (name,), _factor_order(name, factor_map))


def interaction_term(names: Sequence[str], factor_map: Mapping[str, Factor]) -> Term:
    for name in names:
        if name not in factor_map:
            raise FormulaError(f"unknown factor {name!r}")
    for name in names:
        ancestors = nesting_ancestors(name, factor_map)
        hit = set(ancestors) & set(names)
        if hit:
            raise InvalidDesignError(
                f"interaction {'*'.join(names)} pairs {name!r} with its nesting "
                f"parent {sorted(hit)[0]!r}; such a term does not exist"
            )
    order = sum(_factor_order(n, factor_map) for n in names)
    return Term("interaction", tuple(names), order)


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """Immutable description of a designed experiment and its model.

    ``assignments`` maps each factor name to integer level codes (indices into
    ``Factor.levels``) per sample.  The intercept is always ``terms[0]``.
    Instances are safe to share read-only across workers.
    """

    factors: tuple[Factor, ...]
    terms: tuple[Term, ...]
    sample_ids: tuple[str, ...]
    assignments: Mapping[str, np.ndarray]
    _factor_map: dict[str, Factor] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_factor_map", {f.name: f for f in self.factors})
        if len(self._factor_map) != len(self.factors):
            raise InvalidDesignError("duplicate factor names")
        for f in self.factors:
            if f.nested_in is not None and f.nested_in not in self._factor_map:
                raise InvalidDesignError(
                    f"factor {f.name!r} nested in undeclared factor {f.nested_in!r}"
                )
            nesting_ancestors(f.name, self._factor_map)  # raises on cycles
        if not self.terms or self.terms[0].kind != "intercept":
            raise InvalidDesignError("terms must start with the intercept")
        seen: set[tuple] = set()
        for t in self.terms:
            key = (t.kind, t.factors)
            if key in seen:
                raise InvalidDesignError(f"duplicate term {t.label!r}")
            seen.add(key)
            for name in t.factors:
                if name not in self._factor_map:
                    raise InvalidDesignError(f"term {t.label!r} references unknown factor")
        n = len(self.sample_ids)
        for f in self.factors:
            codes = self.assignments[f.name]
            if codes.shape != (n,):
                raise InvalidDesignError(f"assignment column {f.name!r} has wrong length")
            if codes.min(initial=0) < 0 or codes.max(initial=0) >= f.n_levels:
                raise InvalidDesignError(f"assignment column {f.name!r} has out-of-range codes")
            present = np.unique(codes)
            if len(present) != f.n_levels:
                missing = [f.levels[i] for i in range(f.n_levels) if i not in present]
                raise InvalidDesignError(
                    f"level(s) {missing} of factor {f.name!r} never occur in the design table"
                )
        self._check_nesting_consistency()

    @classmethod
    def from_table(
        cls,
        factors: Sequence[Factor],
        terms: Sequence[Term],
        table: Mapping[str, Sequence[str]],
        sample_ids: Sequence[str] | None = None,
    ) -> "DesignSpec":
        """Build a spec from per-sample level labels (one column per factor)."""
        factors = tuple(factors)
        lengths = {len(col) for col in table.values()}
        if len(lengths) > 1:
            raise InvalidDesignError("design table columns have unequal lengths")
        n = lengths.pop() if lengths else 0
        if sample_ids is None:
            sample_ids = tuple(f"s{i + 1}" for i in range(n))
        else:
            sample_ids = tuple(str(s) for s in sample_ids)
            if len(sample_ids) != n:
                raise InvalidDesignError("sample_ids length does not match design table")
        assignments: dict[str, np.ndarray] = {}
        for f in factors:
            if f.name not in table:
                raise InvalidDesignError(f"design table lacks a column for factor {f.name!r}")
            index = {lev: i for i, lev in enumerate(f.levels)}
            codes = np.empty(n, dtype=np.intp)
            for i, label in enumerate(table[f.name]):
                label = str(label)
                if label not in index:
                    raise InvalidDesignError(
                        f"sample {sample_ids[i]!r}: label {label!r} is not a declared "
                        f"level of factor {f.name!r}"
                    )
                codes[i] = index[label]
            codes.setflags(write=False)
            assignments[f.name] = codes
        return cls(factors, tuple(terms), sample_ids, assignments)

    def _check_nesting_consistency(self) -> None:
        for f in self.factors:
            if f.nested_in is None:
                continue
            child = self.assignments[f.name]
            parent = self.assignments[f.nested_in]
            for code in np.unique(child):
                parents = np.unique(parent[child == code])
                if len(parents) > 1:
                    raise InvalidDesignError(
                        f"level {f.levels[code]!r} of {f.name!r} occurs under "
                        f"{len(parents)} levels of {f.nested_in!r}; nesting requires exactly one"
                    )

    # -- structural queries -------------------------------------------------

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def factor(self, name: str) -> Factor:
        try:
            return self._factor_map[name]
        except KeyError:
            raise InvalidDesignError(f"unknown factor {name!r}") from None

    def term_by_label(self, label: str) -> Term:
        for t in self.terms:
            if t.label == label:
                return t
        raise InvalidDesignError(f"model has no term {label!r}")

    def child_to_parent(self, name: str) -> np.ndarray:
        """For a nested factor: parent level code per child level code."""
        f = self.factor(name)
        if f.nested_in is None:
            raise InvalidDesignError(f"factor {name!r} is not nested")
        child = self.assignments[name]
        parent = self.assignments[f.nested_in]
        out = np.empty(f.n_levels, dtype=np.intp)
        for code in range(f.n_levels):
            out[code] = parent[child == code][0]
        return out

    def cells_of(self, term: Term) -> np.ndarray:
        """Cell id per sample under the given term (0..n_cells-1)."""
        if term.kind in ("intercept", "residual"):
            return np.zeros(self.n_samples, dtype=np.intp)
        cols = [self.assignments[name] for name in term.factors]
        if len(cols) == 1:
            return cols[0].copy()
        stacked = np.stack(cols, axis=1)
        _, inverse = np.unique(stacked, axis=0, return_inverse=True)
        return inverse.astype(np.intp)

    def is_random_term(self, term: Term) -> bool:
        return any(self.factor(name).nature == "random" for name in term.factors)

    def pretty_formula(self) -> str:
        """Formula text for the non-intercept terms, `C(A)` marking nesting."""
        parts = []
        for t in self.terms[1:]:
            if t.kind == "nested":
                parts.append(f"{t.factors[0]}({self.factor(t.factors[0]).nested_in})")
            else:
                parts.append(t.label)
        return " + ".join(parts)


# -- degrees of freedom -----------------------------------------------------


def dof_of_term(spec: DesignSpec, term: Term) -> int:
    """Degrees of freedom of one model term.

    Main factor: levels minus one.  Nested factor: own levels minus the parent
    factor's levels.  Interaction: product of the member factors' DoFs.
    """
    if term.kind == "intercept":
        return 1
    if term.kind == "residual":
        return residual_dof(spec)
    if term.kind == "main":
        return spec.factor(term.factors[0]).n_levels - 1
    if term.kind == "nested":
        f = spec.factor(term.factors[0])
        parent = spec.factor(f.nested_in)
        dof = f.n_levels - parent.n_levels
        if dof <= 0:
            raise InvalidDesignError(
                f"nested factor {f.name!r} has {f.n_levels} levels, not more than "
                f"its parent {parent.name!r} ({parent.n_levels})"
            )
        return dof
    dof = 1
    for name in term.factors:
        dof *= dof_of_term(spec, main_term(name, spec._factor_map))
    return dof


def residual_dof(spec: DesignSpec) -> int:
    """(n - 1) minus the DoFs of all non-intercept model terms."""
    used = sum(dof_of_term(spec, t) for t in spec.terms if t.kind != "intercept")
    dof = spec.n_samples - 1 - used
    if dof < 0:
        raise InvalidDesignError(
            f"over-parameterized design: model terms use {used} DoFs "
            f"but only {spec.n_samples - 1} are available"
        )
    return dof


# -- F-ratio reference selection ---------------------------------------------


def _refines(spec: DesignSpec, finer: Term, coarser: Term) -> bool:
    """True when every cell of `finer` lies inside a single cell of `coarser`."""
    a = spec.cells_of(finer)
    b = spec.cells_of(coarser)
    pairs = np.unique(np.stack([a, b], axis=1), axis=0)
    return len(np.unique(pairs[:, 0])) == len(pairs)


def reference_term(spec: DesignSpec, term: Term) -> Term:
    """Reference term for the F-ratio denominator of a tested term.

    Returns the random model term of lowest order whose cells strictly
    subdivide the tested term's cells, or the residual pseudo-term when no
    such term exists.  Several random candidates are fine as long as they
    form a refinement chain (split-plot strata pick the nearest layer);
    incomparable random candidates would demand a quasi-F denominator and
    are rejected instead.
    """
    if term.kind == "intercept":
        raise InvalidDesignError("the intercept has no F-ratio reference")
    candidates = []
    for i, u in enumerate(spec.terms):
        if u.kind == "intercept" or (u.kind, u.factors) == (term.kind, term.factors):
            continue
        if not spec.is_random_term(u):
            continue
        if _refines(spec, u, term) and not _refines(spec, term, u):
            candidates.append((u.order, i, u))
    if not candidates:
        return RESIDUAL
    for a, (_, _, u) in enumerate(candidates):
        for _, _, v in candidates[a + 1:]:
            if not (_refines(spec, u, v) or _refines(spec, v, u)):
                raise InvalidDesignError(
                    f"random terms {u.label!r} and {v.label!r} both sit below "
                    f"{term.label!r} without ordering; a quasi-F reference "
                    "would be required and is not supported"
                )
    candidates.sort(key=lambda c: (c[0], c[1]))
    return candidates[0][2]


# -- model formula ------------------------------------------------------------

_ATOM_RE = re.compile(r"^([A-Za-z_]\w*)(?:\(([A-Za-z_]\w*)\))?$")


def parse_model_formula(
    text: str,
    factors: Sequence[Factor],
    *,
    hierarchy_closure: bool = True,
) -> list[Term]:
    """Parse `A + B + C(A) + A*B` into an ordered term list, intercept first.

    `C(A)` must agree with ``Factor.nested_in``; bare `C` is accepted for a
    nested factor and means the same term.  With ``hierarchy_closure`` (the
    default) an interaction implies the main terms of its members, inserted
    ahead of it in order of appearance.
    """
    factor_map = {f.name: f for f in factors}
    terms: list[Term] = [INTERCEPT]
    seen: set[tuple] = {("intercept", ())}

    def push(term: Term, *, implied: bool = False) -> None:
        key = (term.kind, term.factors)
        if key in seen:
            if implied:
                return
            raise FormulaError(f"duplicate term {term.label!r} in formula")
        seen.add(key)
        terms.append(term)

    chunks = [c.strip() for c in text.split("+")]
    if any(not c for c in chunks):
        raise FormulaError(f"empty term in formula {text!r}")
    for chunk in chunks:
        atoms = [a.strip() for a in chunk.split("*")]
        names: list[str] = []
        for atom in atoms:
            m = _ATOM_RE.match(atom.replace(" ", ""))
            if not m:
                raise FormulaError(f"cannot parse term {chunk!r}")
            name, parent = m.group(1), m.group(2)
            if name not in factor_map:
                raise FormulaError(f"unknown factor {name!r} in formula")
            declared = factor_map[name].nested_in
            if parent is not None and parent != declared:
                raise FormulaError(
                    f"formula writes {name}({parent}) but factor {name!r} is "
                    + (f"nested in {declared!r}" if declared else "not nested")
                )
            names.append(name)
        if len(names) == 1:
            push(main_term(names[0], factor_map))
        else:
            if hierarchy_closure:
                for name in names:
                    push(main_term(name, factor_map), implied=True)
            push(interaction_term(names, factor_map))
    return terms
