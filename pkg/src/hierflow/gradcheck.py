"""Central-finite-difference verification of every analytic energy gradient.

The checker perturbs raw logits and coordinates entrywise, so it exercises the
full softmax chain rule, not just the probability-space formulas.  States that
sit within a guard margin of a non-smooth point (ReLU corners, eigenvalue
crossings) are redrawn: central differences are only meaningful where the term
is smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energies import EnergyConfig, EnergyContext, TERM_NAMES, energy_term, \
    energy_term_grads, soft_laplacian
from .molstate import BondOrderVector, ElementTable, pair_count, soft_degrees
from .energies import soft_element_constant
from .synth import random_relaxed_state

DEFAULT_H = 1e-5
DEFAULT_REL_TOL = 1e-5
_KINK_MARGIN = 1e-3


@dataclass
class TermCheck:
    term: str
    n_states: int
    max_rel_err: float
    passed: bool


def _random_context(rng: np.random.Generator, state, table, omega,
                    config: EnergyConfig) -> EnergyContext:
    n = state.n_atoms
    similarity = rng.uniform(0.0, 1.0, size=pair_count(n))
    atoms = rng.permutation(n)
    cut = max(2, n // 2)
    motifs = (tuple(sorted(int(a) for a in atoms[:cut])),
              tuple(sorted(int(a) for a in atoms[cut:])))
    ring_size = int(rng.integers(3, min(6, n) + 1))
    ring = tuple(int(a) for a in rng.choice(n, size=ring_size, replace=False))
    return EnergyContext(table, omega, config, hier_similarity=similarity,
                         motif_atoms=motifs, rings=(ring,))


def _away_from_kinks(term: str, state, ctx: EnergyContext) -> bool:
    """Reject states within the guard margin of a term's non-smooth set."""
    if term == "valence":
        deg = soft_degrees(state, ctx.omega)
        dbar = soft_element_constant(state.atom_probs, "d_max", ctx.table)
        return bool(np.all(np.abs(deg - dbar) > _KINK_MARGIN))
    if term == "conn_lambda2":
        vals = np.linalg.eigvalsh(soft_laplacian(state))
        lam2, lam3 = vals[1], vals[2] if vals.size > 2 else np.inf
        return (abs(ctx.config.lambda2_threshold - lam2) > _KINK_MARGIN / 10
                and lam3 - lam2 > 1e-4)
    if term == "ring_exclusivity":
        p = state.edge_probs
        n = state.n_atoms
        for ring in ctx.rings:
            neighbors = {}
            for a, b in zip(ring, list(ring[1:]) + [ring[0]]):
                neighbors.setdefault(a, set()).add(b)
                neighbors.setdefault(b, set()).add(a)
            for i, nbrs in neighbors.items():
                ext = ring_sum = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    a, b = (i, j) if i < j else (j, i)
                    pid = a * (2 * n - a - 1) // 2 + (b - a - 1)
                    if j in nbrs:
                        ring_sum += p[pid]
                    else:
                        ext += p[pid]
                if abs(ext - ctx.config.ring_beta * ring_sum) <= _KINK_MARGIN:
                    return False
        return True
    return True


def _term_value(term: str, state, ctx: EnergyContext) -> float:
    value = energy_term(term, state, ctx)
    return value[0] if isinstance(value, tuple) else float(value)


def fd_term_check(term: str, state, ctx: EnergyContext, h: float = DEFAULT_H) -> float:
    """Max relative error between analytic and FD gradients over all blocks.

    The error scale has a floor of 1 so near-zero blocks compare absolutely;
    energy gradients of active terms are O(0.1..100) on the states used here.
    """
    _, grads = energy_term_grads(term, state, ctx)
    worst = 0.0
    for block, analytic in (("atom_logits", grads.atom_logits),
                            ("bond_logits", grads.bond_logits),
                            ("coords", grads.coords)):
        base = getattr(state, block if block != "coords" else "coords")
        fd = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            f_plus = _term_value(term, state.replace(**{block: plus}), ctx)
            f_minus = _term_value(term, state.replace(**{block: minus}), ctx)
            fd[idx] = (f_plus - f_minus) / (2 * h)
        scale = max(float(np.abs(analytic).max(initial=0.0)),
                    float(np.abs(fd).max(initial=0.0)), 1.0)
        worst = max(worst, float(np.abs(analytic - fd).max(initial=0.0)) / scale)
    return worst


def _state_for_term(term: str, rng: np.random.Generator, table, omega,
                    config: EnergyConfig, max_atoms: int):
    n = int(rng.integers(4, max_atoms + 1))
    state = random_relaxed_state(rng, n, table, omega)
    if term == "conn_lambda2":
        # the threshold only activates on nearly edge-free graphs
        bond = state.bond_logits.copy()
        bond[:, 0] += 12.0
        state = state.replace(bond_logits=bond)
    return state


def run_gradcheck_suite(n_states: int = 50, seed: int = 0, max_atoms: int = 10,
                        h: float = DEFAULT_H, rel_tol: float = DEFAULT_REL_TOL,
                        terms: tuple[str, ...] | None = None,
                        table: ElementTable | None = None,
                        omega: BondOrderVector | None = None,
                        config: EnergyConfig | None = None) -> list[TermCheck]:
    """Run the finite-difference suite over random states for every term."""
    table = table or ElementTable.default()
    omega = omega or BondOrderVector.default()
    config = config or EnergyConfig()
    if config.m_target is None:
        config = config.replace(m_target={n: float(n) for n in range(2, max_atoms + 1)})
    terms = terms or TERM_NAMES
    results = []
    for term_index, term in enumerate(terms):
        rng = np.random.default_rng([seed, term_index])
        worst = 0.0
        checked = 0
        while checked < n_states:
            state = _state_for_term(term, rng, table, omega, config, max_atoms)
            ctx = _random_context(rng, state, table, omega, config)
            if not _away_from_kinks(term, state, ctx):
                continue
            worst = max(worst, fd_term_check(term, state, ctx, h))
            checked += 1
        results.append(TermCheck(term, checked, worst, worst < rel_tol))
    return results
