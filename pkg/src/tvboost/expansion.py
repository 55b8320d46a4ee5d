"""Signed-word expansion of the boosted operator and its exact matrix evaluation.

A word is an ordered product of operator atoms tiling an interval; atoms are
composed earliest interval first, so on row-stochastic matrices the word
``[a1, a2, a3]`` evaluates to ``M(a1) @ M(a2) @ M(a3)`` (the operator acting
on column vectors ``f`` applies ``a3`` first, matching ``Q_{s,u} = Q_{s,t} Q_{t,u}``).

Atom endpoints are integer indices on the grid of the atom's level.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .matrix import MatrixSemigroup, expm
from .order_params import GridSpec, OrderParams, _q_formula, m_steps


@dataclass(frozen=True)
class Base:
    """``Q^{delta_l}`` from index ``start`` to ``stop`` on level ``level``."""

    level: int
    start: int
    stop: int

    def __post_init__(self):
        if self.stop < self.start:
            raise ValueError("atom interval must have start <= stop")

    def label(self) -> str:
        return f"Q[l{self.level}]({self.start},{self.stop})"


@dataclass(frozen=True)
class Boosted:
    """Order-``order`` boosted operator over one step of level ``level``."""

    order: int
    level: int
    start: int

    @property
    def stop(self) -> int:
        return self.start + 1

    def label(self) -> str:
        return f"Qhat{self.order}[l{self.level}]({self.start},{self.stop})"


@dataclass(frozen=True)
class Exact:
    """The exact semigroup ``P`` over a level-``level`` interval."""

    level: int
    start: int
    stop: int

    def __post_init__(self):
        if self.stop < self.start:
            raise ValueError("atom interval must have start <= stop")

    def label(self) -> str:
        return f"P[l{self.level}]({self.start},{self.stop})"


@dataclass(frozen=True)
class Diff:
    """``plus - minus`` over a shared interval (one difference factor)."""

    plus: "Atom"
    minus: "Atom"

    def __post_init__(self):
        if (self.plus.level, self.plus.start, self.plus.stop) != (
            self.minus.level,
            self.minus.start,
            self.minus.stop,
        ):
            raise ValueError("difference factor operands must span the same interval")

    @property
    def level(self) -> int:
        return self.plus.level

    @property
    def start(self) -> int:
        return self.plus.start

    @property
    def stop(self) -> int:
        return self.plus.stop

    def label(self) -> str:
        return f"({self.plus.label()} - {self.minus.label()})"


Atom = Union[Base, Boosted, Exact, Diff]


@dataclass(frozen=True)
class ExpansionTerm:
    """One signed word; ``grid_times`` are the correction indices ``t_1 < ... < t_i``.

    ``grid`` and ``alpha`` give the context needed to turn indices into step
    sizes and to expand boosted atoms.
    """

    sign: int
    atoms: tuple
    grid_times: tuple = ()
    grid: GridSpec = field(default_factory=lambda: GridSpec(1.0, 2))
    alpha: int = 1
    depth: int = 0
    kind: str = "base"

    def interval(self) -> tuple[int, int, int]:
        return self.atoms[0].level, self.atoms[0].start, self.atoms[-1].stop

    def tiles(self) -> bool:
        """True when consecutive atoms share endpoints on a common level."""
        level = self.atoms[0].level
        for a, b in zip(self.atoms, self.atoms[1:]):
            if a.level != level or b.level != level or a.stop != b.start:
                return False
        return True

    def n_differences(self) -> int:
        return sum(isinstance(a, Diff) for a in self.atoms)

    def label(self) -> str:
        s = "+" if self.sign > 0 else "-"
        return f"{s} " + " . ".join(a.label() for a in self.atoms)


def _interval_indices(grid: GridSpec, l: int, s: float, t: float) -> int:
    try:
        i = grid.index_of(s, l)
        j = grid.index_of(t, l)
    except ValueError as exc:
        raise ValueError(f"interval [{s}, {t}] not aligned to the level-{l} grid") from exc
    if j - i != 1:
        raise ValueError(f"interval [{s}, {t}] must span exactly one level-{l} step")
    return i


def _word(sign, atoms, times, grid, alpha, depth, kind):
    return ExpansionTerm(sign, tuple(atoms), tuple(times), grid, alpha, depth, kind)


def _correction_words(nu, alpha, grid, l, start, factor, closing, kind, depth, strata):
    """Words of the form ``prod_j Q(t_{j-1}, t_j - 1) F(t_j - 1, t_j)`` closed by ``closing``."""
    n = grid.n
    a = start * n
    b = a + n
    fine = l + 1
    words = []
    for i in strata:
        for times in itertools.combinations(range(a + 1, b + 1), i):
            atoms = []
            prev = a
            for tj in times:
                atoms.append(Base(fine, prev, tj - 1))
                atoms.append(factor(i, fine, tj - 1))
                prev = tj
            atoms.append(closing(fine, prev, b))
            words.append(_word(1, atoms, times, grid, alpha, depth, kind))
    return words


def build_expansion_at(nu: int, alpha: int, grid: GridSpec, l: int, start: int, depth: int = 0):
    """Expansion of the order-``nu`` boosted operator over level-``l`` step ``start``."""
    n = grid.n
    a = start * n
    m = m_steps(l, nu, alpha)
    terms = [_word(1, [Base(l + 1, a, a + n)], (), grid, alpha, depth, "base")]

    def factor(i, fine, s0):
        q = _q_formula(i, l, nu, alpha)
        return Diff(Boosted(q, fine, s0), Base(fine, s0, s0 + 1))

    terms += _correction_words(
        nu, alpha, grid, l, start, factor, Base, "Ihat", depth, range(1, m)
    )
    return terms


def build_expansion(params: OrderParams, l: int, s: float, t: float) -> list[ExpansionTerm]:
    """Signed words of ``Qhat^{nu, delta_l}_{s,t}``: the fine base word plus every
    correction word with ``i = 1..m-1`` difference factors."""
    start = _interval_indices(params.grid, l, s, t)
    return build_expansion_at(params.nu, params.alpha, params.grid, l, start)


@dataclass
class ProofDecomposition:
    base: list
    corrections: dict  # i -> words of I_i
    remainder: list  # words of R_m
    m: int

    def all_terms(self) -> list:
        out = list(self.base)
        for i in sorted(self.corrections):
            out += self.corrections[i]
        return out + list(self.remainder)


def build_proof_decomposition(params: OrderParams, l: int, s: float, t: float) -> ProofDecomposition:
    """``P = Q + sum_{i<m} I_i + R_m`` over one level-``l`` step.

    For ``nu = 0`` the telescope is taken with ``m = 1``.
    """
    grid, alpha, nu = params.grid, params.alpha, params.nu
    start = _interval_indices(grid, l, s, t)
    a = start * grid.n
    m = max(m_steps(l, nu, alpha), 1)
    base = [_word(1, [Base(l + 1, a, a + grid.n)], (), grid, alpha, 0, "base")]

    def pq(i, fine, s0):
        return Diff(Exact(fine, s0, s0 + 1), Base(fine, s0, s0 + 1))

    corrections = {
        i: _correction_words(nu, alpha, grid, l, start, pq, Base, "I", 0, [i]) for i in range(1, m)
    }
    remainder = _correction_words(nu, alpha, grid, l, start, pq, Exact, "R", 0, [m])
    return ProofDecomposition(base, corrections, remainder, m)


def expand_pairs(term: ExpansionTerm) -> list[ExpansionTerm]:
    """Replace each difference factor by its two operands: ``2**k`` signed words."""
    choices = []
    for atom in term.atoms:
        if isinstance(atom, Diff):
            choices.append(((1, atom.plus), (-1, atom.minus)))
        else:
            choices.append(((1, atom),))
    out = []
    for combo in itertools.product(*choices):
        sign = term.sign
        for sg, _ in combo:
            sign *= sg
        atoms = tuple(a for _, a in combo)
        out.append(
            ExpansionTerm(sign, atoms, term.grid_times, term.grid, term.alpha, term.depth, term.kind)
        )
    return out


def difference_words(params: OrderParams, i: int, l: int = 0, start: int = 0):
    """``I_i - Ihat_i`` rewritten with factors in ``{Q - P, P - Qhat}``.

    The index set has ``2**i`` elements per grid tuple; the element with every
    factor equal to ``Q - P`` does not occur, so ``2**i - 1`` words are
    returned per tuple, all carrying the sign ``(-1)**(i + 1)``.
    """
    grid, alpha, nu = params.grid, params.alpha, params.nu
    m = m_steps(l, nu, alpha)
    if not 1 <= i <= m - 1:
        raise ValueError(f"correction index {i} outside [1, {m - 1}]")
    q = _q_formula(i, l, nu, alpha)
    n = grid.n
    a = start * n
    b = a + n
    fine = l + 1
    sign = (-1) ** (i + 1)
    words = []
    for times in itertools.combinations(range(a + 1, b + 1), i):
        for h in itertools.product((0, 1), repeat=i):
            if all(bit == 0 for bit in h):
                continue  # all factors Q - P: excluded
            atoms = []
            prev = a
            for bit, tj in zip(h, times):
                atoms.append(Base(fine, prev, tj - 1))
                if bit == 0:
                    atoms.append(Diff(Base(fine, tj - 1, tj), Exact(fine, tj - 1, tj)))
                else:
                    atoms.append(Diff(Exact(fine, tj - 1, tj), Boosted(q, fine, tj - 1)))
                prev = tj
            atoms.append(Base(fine, prev, b))
            words.append(_word(sign, atoms, times, grid, alpha, 0, f"Lambda{h}"))
    return words


def _atom_matrix(atom, backend: MatrixSemigroup, grid: GridSpec, alpha: int) -> np.ndarray:
    if isinstance(atom, Diff):
        return _atom_matrix(atom.plus, backend, grid, alpha) - _atom_matrix(
            atom.minus, backend, grid, alpha
        )
    delta = grid.step(atom.level)
    if isinstance(atom, Base):
        return backend.base_power(delta, atom.stop - atom.start, atom.start * delta)
    if isinstance(atom, Exact):
        if not backend.homogeneous:
            raise ValueError("exact atoms require a time-homogeneous backend")
        key = ("exact", grid, atom.level, atom.stop - atom.start)
        hit = backend._boost_cache.get(key)
        if hit is None:
            hit = expm((atom.stop - atom.start) * delta * backend.generator)
            backend._boost_cache[key] = hit
        return hit
    if isinstance(atom, Boosted):
        key = ("boost", grid, alpha, atom.order, atom.level)
        if not backend.homogeneous:
            key = key + (atom.start,)
        hit = backend._boost_cache.get(key)
        if hit is None:
            words = build_expansion_at(atom.order, alpha, grid, atom.level, atom.start)
            hit = evaluate_matrix(words, backend)
            # concurrent writers store identical values
            backend._boost_cache.setdefault(key, hit)
        return hit
    raise TypeError(f"unknown atom {atom!r}")


def evaluate_matrix(terms, backend: MatrixSemigroup) -> np.ndarray:
    """Sum of ``sign * prod(atom matrices)`` over the words."""
    total = np.zeros((backend.states, backend.states))
    for term in terms:
        if not term.tiles():
            raise ValueError(f"word does not tile its interval: {term.label()}")
        M = np.eye(backend.states)
        for atom in term.atoms:
            M = M @ _atom_matrix(atom, backend, term.grid, term.alpha)
        total += term.sign * M
    return total


def qhat_matrix(params: OrderParams, backend: MatrixSemigroup, l: int = 0) -> np.ndarray:
    """``Qhat^{nu, delta_l}`` over the first level-``l`` step, by word enumeration."""
    grid = params.grid
    return evaluate_matrix(build_expansion(params, l, 0.0, grid.step(l)), backend)


def qhat_matrix_dp(nu: int, alpha: int, grid: GridSpec, backend: MatrixSemigroup, l: int = 0):
    """Same operator by a generating-function recursion, without enumerating words.

    The sum over ``i``-tuples of the fine grid is the ``eps**i`` coefficient of
    ``(B + eps D)**n``, accumulated one fine step at a time.
    """
    if not backend.homogeneous:
        raise ValueError("the recursion assumes a time-homogeneous backend")
    n = grid.n
    d = backend.states
    B = backend.one_step(grid.step(l + 1))
    out = np.linalg.matrix_power(B, n)
    for i in range(1, m_steps(l, nu, alpha)):
        D = qhat_matrix_dp(_q_formula(i, l, nu, alpha), alpha, grid, backend, l + 1) - B
        coeff = [np.eye(d)] + [np.zeros((d, d)) for _ in range(i)]
        for _ in range(n):
            coeff = [coeff[0] @ B] + [coeff[k] @ B + coeff[k - 1] @ D for k in range(1, i + 1)]
        out = out + coeff[i]
    return out


def expansion_tree(params: OrderParams, max_depth: int | None = None, l: int = 0):
    """Lines ``(depth, term)`` of the term tree; each distinct boosted atom
    ``(order, level)`` is expanded once, below its first occurrence."""
    seen = set()
    lines = []

    def walk(nu, level, start, depth):
        for term in build_expansion_at(nu, params.alpha, params.grid, level, start, depth):
            lines.append((depth, term))
            for atom in term.atoms:
                inner = atom.plus if isinstance(atom, Diff) else atom
                if isinstance(inner, Boosted) and (inner.order, inner.level) not in seen:
                    seen.add((inner.order, inner.level))
                    if max_depth is None or depth + 1 <= max_depth:
                        walk(inner.order, inner.level, inner.start, depth + 1)

    walk(params.nu, l, 0, 0)
    return lines
