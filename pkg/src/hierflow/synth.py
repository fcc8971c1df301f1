"""Synthetic molecules, plans, and relaxed states for demos and tests.

None of this is part of the generative mechanism; it exists so every part of
the library can be exercised without a dataset or a trained model.
"""

from __future__ import annotations

import numpy as np

from .hierarchy import HierarchyPlan, KIND_LEAF, KIND_ROOT
from .molstate import BondOrderVector, ElementTable, Molecule, RelaxedState, \
    pair_count, pair_indices, probs_to_logits, recenter

# heavier sampling weight on organic workhorse elements
_ELEMENT_WEIGHTS = {"C": 0.55, "N": 0.15, "O": 0.15, "F": 0.05, "S": 0.05, "Cl": 0.05}


def _element_probs(table: ElementTable) -> np.ndarray:
    w = np.array([_ELEMENT_WEIGHTS.get(s, 0.0) for s in table.symbols])
    if w.sum() == 0:
        w = np.ones(table.n_elements)
    return w / w.sum()


def random_molecule(rng: np.random.Generator, n_atoms: int | None = None,
                    table: ElementTable | None = None,
                    omega: BondOrderVector | None = None,
                    extra_edge_rate: float = 0.15,
                    higher_order_rate: float = 0.2,
                    respect_valence: bool = True) -> Molecule:
    """Random connected molecule over heavy atoms.

    A random spanning tree guarantees connectivity; extra edges create rings
    and some single bonds are upgraded to higher orders.  With
    ``respect_valence`` the generator never exceeds element valences, so the
    output is a clean target; without it the output is deliberately
    over-bonded (for repair tests).  Coordinates are random and centered.
    """
    table = table or ElementTable.default()
    omega = omega or BondOrderVector.default()
    if n_atoms is None:
        n_atoms = int(rng.integers(3, 13))
    elements = rng.choice(table.n_elements, size=n_atoms, p=_element_probs(table))
    dmax = table.max_valence[elements]
    bonds = np.zeros((n_atoms, n_atoms), dtype=int)

    def order_sum(i):
        return float(np.sum(omega.orders[bonds[i]]))

    def capacity(i):
        return dmax[i] - order_sum(i) if respect_valence else np.inf

    for i in range(1, n_atoms):
        candidates = [j for j in range(i) if capacity(j) >= 1]
        j = int(rng.choice(candidates)) if candidates else max(range(i), key=capacity)
        bonds[i, j] = bonds[j, i] = 1

    n_extra = rng.binomial(pair_count(n_atoms), extra_edge_rate * 2.0 / max(n_atoms - 1, 1))
    for _ in range(n_extra):
        i, j = rng.integers(0, n_atoms, size=2)
        if i == j or bonds[i, j] or (respect_valence and (capacity(i) < 1 or capacity(j) < 1)):
            continue
        bonds[i, j] = bonds[j, i] = 1

    iu, ju = np.nonzero(np.triu(bonds, k=1))
    for i, j in zip(iu, ju):
        if rng.random() >= higher_order_rate:
            continue
        for k in (3, 2):  # prefer the strongest upgrade that fits
            if k >= omega.n_types:
                continue
            gain = omega.orders[k] - omega.orders[bonds[i, j]]
            if not respect_valence or (capacity(i) >= gain and capacity(j) >= gain):
                bonds[i, j] = bonds[j, i] = k
                break

    coords = recenter(rng.normal(0.0, 2.0, size=(n_atoms, 3)))
    return Molecule(elements, bonds, coords)


def overbond(rng: np.random.Generator, mol: Molecule, n_extra: int = 3,
             omega: BondOrderVector | None = None) -> Molecule:
    """Add extra single bonds (ignoring valence) to force violations."""
    bonds = mol.bonds.copy()
    n = mol.n_atoms
    added = 0
    for _ in range(50 * n_extra):
        if added == n_extra:
            break
        i, j = rng.integers(0, n, size=2)
        if i != j and bonds[i, j] == 0:
            bonds[i, j] = bonds[j, i] = 1
            added += 1
    return Molecule(mol.elements, bonds, mol.coords)


def leaf_only_plan(n_atoms: int, n_types: int) -> HierarchyPlan:
    """Minimal plan (ROOT plus one leaf per atom) for states without motifs."""
    a_total = 1 + n_atoms
    kinds = np.array([KIND_ROOT] + [KIND_LEAF] * n_atoms)
    type_probs = np.zeros((a_total, n_types))
    type_probs[:, 0] = 1.0
    parent_probs = np.zeros((a_total, a_total))
    parent_probs[1:, 0] = 1.0
    return HierarchyPlan(kinds, type_probs, parent_probs,
                         1 + np.arange(n_atoms), np.ones(a_total, dtype=bool))


def random_relaxed_state(rng: np.random.Generator, n_atoms: int,
                         table: ElementTable | None = None,
                         omega: BondOrderVector | None = None,
                         logit_scale: float = 1.0,
                         n_types: int = 4) -> RelaxedState:
    """Diffuse random state over a trivial ROOT+leaves token layout."""
    table = table or ElementTable.default()
    omega = omega or BondOrderVector.default()
    a_total = 1 + n_atoms
    state = RelaxedState(
        atom_logits=rng.normal(0, logit_scale, (n_atoms, table.n_elements)),
        bond_logits=rng.normal(0, logit_scale, (pair_count(n_atoms), omega.n_types)),
        type_logits=rng.normal(0, logit_scale, (a_total, n_types)),
        parent_logits=rng.normal(0, logit_scale, (a_total, a_total)),
        coords=recenter(rng.normal(0, 1.5, (n_atoms, 3))),
        t=float(rng.uniform(0, 1)),
        atom_mask=np.ones(n_atoms, dtype=bool),
        token_mask=np.ones(a_total, dtype=bool),
        leaf_anchor=1 + np.arange(n_atoms),
    )
    return state.enforce_masks()


def random_soft_plan(rng: np.random.Generator, n_tokens: int,
                     n_leaves: int | None = None, n_types: int = 4) -> HierarchyPlan:
    """Random causedly-valid soft plan: trailing slots are leaves, parent rows
    are Dirichlet draws over the valid earlier slots."""
    if n_tokens < 2:
        raise ValueError("need at least ROOT plus one token")
    if n_leaves is None:
        n_leaves = int(rng.integers(1, n_tokens))
    n_leaves = min(n_leaves, n_tokens - 1)
    kinds = np.zeros(n_tokens, dtype=int)
    kinds[1:] = 1
    kinds[n_tokens - n_leaves:] = KIND_LEAF
    type_probs = np.zeros((n_tokens, n_types))
    type_probs[:, 0] = 1.0
    parent_probs = np.zeros((n_tokens, n_tokens))
    for a in range(1, n_tokens):
        parent_probs[a, :a] = rng.dirichlet(np.ones(a))
    leaf_anchor = np.arange(n_tokens - n_leaves, n_tokens)
    return HierarchyPlan(kinds, type_probs, parent_probs, leaf_anchor,
                         np.ones(n_tokens, dtype=bool))
