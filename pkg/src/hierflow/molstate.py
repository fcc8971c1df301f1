"""Core molecular data model.

Discrete molecules, relaxed simplex-valued states, element constant tables,
coordinate gauge fixing, and probability/logit transforms.  Everything here is
an immutable value snapshot; all operations are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

PROB_CLIP = 1e-6     # default clipping applied to probabilities before taking logs
SIMPLEX_ATOL = 1e-9  # tolerance when validating that a vector lies on the simplex

# Bundled element constants: symbol, max valence, covalent radius (A),
# van der Waals radius (A).  Radii are the standard published single-bond
# covalent and Bondi vdW values.
_DEFAULT_ELEMENTS = (
    ("H", 1, 0.31, 1.20),
    ("C", 4, 0.76, 1.70),
    ("N", 3, 0.71, 1.55),
    ("O", 2, 0.66, 1.52),
    ("F", 1, 0.57, 1.47),
    ("P", 5, 1.07, 1.80),
    ("S", 6, 1.05, 1.80),
    ("Cl", 1, 1.02, 1.75),
    ("Br", 1, 1.20, 1.85),
    ("I", 1, 1.39, 1.98),
)


class DimensionError(ValueError):
    """Shapes or vocabularies of two objects do not agree."""


@dataclass(frozen=True)
class ElementTable:
    """Per-element constants: maximum valence and covalent/vdW radii.

    The row order defines the atom-type vocabulary; molecules and relaxed
    states index into it.
    """

    symbols: tuple[str, ...]
    max_valence: np.ndarray
    r_cov: np.ndarray
    r_vdw: np.ndarray

    def __post_init__(self):
        if len(self.symbols) == 0:
            raise ValueError("element table must not be empty")
        for name in ("max_valence", "r_cov", "r_vdw"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (len(self.symbols),):
                raise DimensionError(f"{name} must have one entry per element")
        if np.any(self.max_valence < 1):
            raise ValueError("max valence must be >= 1 for every element")
        if np.any(self.r_cov <= 0) or np.any(self.r_vdw <= 0):
            raise ValueError("all radii must be positive")

    @property
    def n_elements(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown element symbol {symbol!r}") from None

    def column(self, name: str) -> np.ndarray:
        """Constant column by name: 'd_max' / 'max_valence', 'r_cov', 'r_vdw'."""
        if name in ("d_max", "max_valence"):
            return self.max_valence
        if name == "r_cov":
            return self.r_cov
        if name == "r_vdw":
            return self.r_vdw
        raise KeyError(f"unknown element column {name!r}")

    @classmethod
    def default(cls) -> "ElementTable":
        syms, val, cov, vdw = zip(*_DEFAULT_ELEMENTS)
        return cls(tuple(syms), np.array(val, float), np.array(cov, float), np.array(vdw, float))

    @classmethod
    def from_dict(cls, d: dict) -> "ElementTable":
        syms = tuple(d.keys())
        val = np.array([d[s]["max_valence"] for s in syms], float)
        cov = np.array([d[s]["r_cov"] for s in syms], float)
        vdw = np.array([d[s]["r_vdw"] for s in syms], float)
        return cls(syms, val, cov, vdw)

    def to_dict(self) -> dict:
        return {
            s: {"max_valence": int(self.max_valence[i]),
                "r_cov": float(self.r_cov[i]),
                "r_vdw": float(self.r_vdw[i])}
            for i, s in enumerate(self.symbols)
        }

    @classmethod
    def from_json(cls, path: str | Path) -> "ElementTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class BondOrderVector:
    """Scalar bond order per bond-type category.

    Category 0 is always "no bond" with order 0; single/double/triple carry
    orders 1/2/3 and an optional aromatic category carries 1.5.
    """

    orders: np.ndarray
    aromatic_index: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.orders, dtype=float)
        object.__setattr__(self, "orders", arr)
        if arr.ndim != 1 or arr.size < 2:
            raise DimensionError("bond order vector needs at least two categories")
        if arr[0] != 0.0:
            raise ValueError("category 0 must be the no-bond category with order 0")
        if np.any(arr < 0):
            raise ValueError("bond orders must be non-negative")
        core = np.delete(arr, self.aromatic_index) if self.aromatic_index is not None else arr
        if np.any(np.diff(core) < 0):
            raise ValueError("bond orders must be non-decreasing outside the aromatic slot")

    @property
    def n_types(self) -> int:
        return self.orders.size

    @classmethod
    def default(cls, include_aromatic: bool = True) -> "BondOrderVector":
        if include_aromatic:
            return cls(np.array([0.0, 1.0, 2.0, 3.0, 1.5]), aromatic_index=4)
        return cls(np.array([0.0, 1.0, 2.0, 3.0]))


# ---------------------------------------------------------------------------
# pair bookkeeping: bond distributions are stored once per unordered pair in
# row-major upper-triangular order and mirrored on access.

def pair_count(n_atoms: int) -> int:
    return n_atoms * (n_atoms - 1) // 2


def pair_indices(n_atoms: int) -> tuple[np.ndarray, np.ndarray]:
    """Arrays (iu, ju) listing every unordered pair i<j in storage order."""
    return np.triu_indices(n_atoms, k=1)


def pair_id(i: int, j: int, n_atoms: int) -> int:
    """Storage slot of pair (i, j); order of i and j does not matter."""
    if i == j:
        raise ValueError("no pair slot for a self-pair")
    i, j = (i, j) if i < j else (j, i)
    if not (0 <= i and j < n_atoms):
        raise IndexError("atom index out of range")
    return i * (2 * n_atoms - i - 1) // 2 + (j - i - 1)


@dataclass(frozen=True)
class Molecule:
    """Discrete molecule: element indices, symmetric bond-type matrix, coordinates."""

    elements: np.ndarray   # (N,) int, indices into an ElementTable
    bonds: np.ndarray      # (N, N) int, symmetric with zero diagonal
    coords: np.ndarray     # (N, 3) float, Angstrom

    def __post_init__(self):
        elements = np.asarray(self.elements, dtype=int)
        bonds = np.asarray(self.bonds, dtype=int)
        coords = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "bonds", bonds)
        object.__setattr__(self, "coords", coords)
        n = elements.shape[0]
        if elements.ndim != 1 or n == 0:
            raise DimensionError("a molecule needs at least one atom")
        if bonds.shape != (n, n):
            raise DimensionError("bond matrix shape must be (N, N)")
        if coords.shape != (n, 3):
            raise DimensionError("coords shape must be (N, 3)")
        if np.any(bonds != bonds.T):
            raise ValueError("bond matrix must be symmetric")
        if np.any(np.diag(bonds) != 0):
            raise ValueError("bond matrix diagonal must be zero")
        if np.any(bonds < 0):
            raise ValueError("bond types must be non-negative")
        if np.any(elements < 0):
            raise ValueError("element indices must be non-negative")

    @property
    def n_atoms(self) -> int:
        return self.elements.shape[0]

    def bond_list(self) -> list[tuple[int, int, int]]:
        """Sorted (i, j, type) triples for every present bond, i < j."""
        iu, ju = np.nonzero(np.triu(self.bonds, k=1))
        return [(int(i), int(j), int(self.bonds[i, j])) for i, j in zip(iu, ju)]

    def check_vocab(self, table: ElementTable, omega: BondOrderVector) -> None:
        if np.any(self.elements >= table.n_elements):
            raise DimensionError("element index outside the element table")
        if np.any(self.bonds >= omega.n_types):
            raise DimensionError("bond type outside the bond vocabulary")

    # --- external interchange formats -------------------------------------

    def to_json_dict(self, table: ElementTable) -> dict:
        return {
            "elements": [table.symbols[e] for e in self.elements],
            "bonds": [[i, j, k] for i, j, k in self.bond_list()],
            "coords": [[float(x) for x in row] for row in self.coords],
        }

    @classmethod
    def from_json_dict(cls, d: dict, table: ElementTable) -> "Molecule":
        elements = np.array([table.index(s) for s in d["elements"]], dtype=int)
        n = elements.shape[0]
        bonds = np.zeros((n, n), dtype=int)
        for i, j, k in d.get("bonds", ()):
            if not (0 <= i < j < n):
                raise ValueError(f"bond ({i},{j}) must satisfy 0 <= i < j < N")
            if k < 1:
                raise ValueError("serialized bonds must have type >= 1")
            bonds[i, j] = bonds[j, i] = k
        coords = np.asarray(d["coords"], dtype=float)
        return cls(elements, bonds, coords)

    def to_xyz(self, table: ElementTable, comment: str = "") -> str:
        lines = [str(self.n_atoms), comment]
        for e, (x, y, z) in zip(self.elements, self.coords):
            lines.append(f"{table.symbols[e]} {x:.8f} {y:.8f} {z:.8f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# probability/logit transforms and the coordinate gauge


def logits_to_probs(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis.  Invariant to constant shifts of z."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def probs_to_logits(p: np.ndarray, eps0: float = PROB_CLIP) -> np.ndarray:
    """Log of p after clipping to [eps0, 1-eps0] and renormalizing.

    The round trip ``logits_to_probs(probs_to_logits(p))`` reproduces the
    clipped-and-renormalized p.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    q = np.clip(p, eps0, 1.0 - eps0)
    q = q / q.sum(axis=-1, keepdims=True)
    return np.log(q)


def recenter(coords: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Shift coordinates so the mean over unmasked atoms is the origin."""
    coords = np.asarray(coords, dtype=float)
    if mask is None:
        if coords.shape[0] == 0:
            raise ValueError("cannot recenter zero atoms")
        return coords - coords.mean(axis=0, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot recenter with zero unmasked atoms")
    center = coords[mask].mean(axis=0, keepdims=True)
    out = coords.copy()
    out[mask] = coords[mask] - center
    return out


def expected_bond_order(x_ij: np.ndarray, omega: BondOrderVector) -> float:
    """Expectation of the bond order under one bond-type distribution."""
    x_ij = np.asarray(x_ij, dtype=float)
    if x_ij.shape[-1] != omega.n_types:
        raise DimensionError("bond distribution and order vector lengths differ")
    return float(x_ij @ omega.orders) if x_ij.ndim == 1 else x_ij @ omega.orders


def pad_slot_logits(n_categories: int, eps0: float = PROB_CLIP) -> np.ndarray:
    """Logits pinning probability mass to category 0 (the padding convention)."""
    one_hot = np.zeros(n_categories)
    one_hot[0] = 1.0
    return probs_to_logits(one_hot, eps0)


@dataclass(frozen=True)
class RelaxedState:
    """Simplex-relaxed molecular state during generation.

    Logits are the source of truth for all categorical blocks; the probability
    views are softmax reads (so simplex feasibility holds at every step by
    construction).  Parent-pointer probabilities are additionally masked to
    the causally valid support (parents strictly earlier in the token order)
    and renormalized on access, so invalid slots are exactly zero.

    Arrays are treated as immutable; build modified copies via ``replace``.
    """

    atom_logits: np.ndarray     # (N, C_a)
    bond_logits: np.ndarray     # (P, K), P = N(N-1)/2 pairs in i<j storage order
    type_logits: np.ndarray     # (A, C_h) hierarchy token types
    parent_logits: np.ndarray   # (A, A) hierarchy parent pointers
    coords: np.ndarray          # (N, 3)
    t: float
    atom_mask: np.ndarray       # (N,) bool
    token_mask: np.ndarray      # (A,) bool
    leaf_anchor: np.ndarray     # (N,) int, token slot of each atom's leaf

    @property
    def n_atoms(self) -> int:
        return self.atom_logits.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.type_logits.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.bond_logits.shape[0]

    @cached_property
    def atom_probs(self) -> np.ndarray:
        return logits_to_probs(self.atom_logits)

    @cached_property
    def bond_probs(self) -> np.ndarray:
        return logits_to_probs(self.bond_logits)

    @cached_property
    def type_probs(self) -> np.ndarray:
        return logits_to_probs(self.type_logits)

    @cached_property
    def parent_valid(self) -> np.ndarray:
        """(A, A) bool: slot (a, b) may carry parent mass iff b < a, both unmasked."""
        a = self.n_tokens
        earlier = np.tril(np.ones((a, a), dtype=bool), k=-1)
        return earlier & self.token_mask[:, None] & self.token_mask[None, :]

    @cached_property
    def parent_probs(self) -> np.ndarray:
        """Causally masked parent distributions; invalid slots are exactly 0."""
        valid = self.parent_valid
        z = np.where(valid, self.parent_logits, -np.inf)
        out = np.zeros_like(z)
        rows = valid.any(axis=1)
        if rows.any():
            zr = z[rows]
            zr = zr - zr.max(axis=1, keepdims=True)
            e = np.where(np.isfinite(zr), np.exp(zr), 0.0)
            out[rows] = e / e.sum(axis=1, keepdims=True)
        return out

    @cached_property
    def edge_probs(self) -> np.ndarray:
        """(P,) probability that each pair carries any bond: 1 - x0."""
        return 1.0 - self.bond_probs[:, 0]

    @cached_property
    def pair_mask(self) -> np.ndarray:
        iu, ju = pair_indices(self.n_atoms)
        return self.atom_mask[iu] & self.atom_mask[ju]

    def replace(self, **kw) -> "RelaxedState":
        return replace(self, **kw)

    def validate(self, atol: float = SIMPLEX_ATOL) -> None:
        """Check simplex feasibility, mask conventions, and finiteness."""
        for name in ("atom_logits", "bond_logits", "type_logits", "parent_logits", "coords"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("time must lie in [0, 1]")
        for probs in (self.atom_probs, self.bond_probs, self.type_probs):
            if np.any(probs < -atol):
                raise ValueError("negative probability mass")
            if np.any(np.abs(probs.sum(axis=-1) - 1.0) > atol):
                raise ValueError("distribution does not sum to 1")
        rho = self.parent_probs
        rows = self.parent_valid.any(axis=1)
        if np.any(np.abs(rho[rows].sum(axis=1) - 1.0) > atol):
            raise ValueError("parent distribution does not sum to 1 over valid parents")
        if np.any(rho[~self.parent_valid] != 0.0):
            raise ValueError("parent mass on causally invalid slots")
        if self.leaf_anchor.shape != (self.n_atoms,):
            raise DimensionError("leaf anchor must map every atom")
        for i in np.nonzero(self.atom_mask)[0]:
            if not self.token_mask[self.leaf_anchor[i]]:
                raise ValueError("leaf anchor points at a masked token")

    def enforce_masks(self) -> "RelaxedState":
        """Re-apply padding conventions after a raw logit update.

        Masked atoms/tokens get pad-pattern logits (mass pinned to category 0),
        masked pairs get no-bond pad logits, and causally invalid parent slots
        are pushed far below the valid ones so that a plain softmax agrees with
        the masked view to ~1e-87.
        """
        atom_logits = self.atom_logits
        bond_logits = self.bond_logits
        type_logits = self.type_logits
        if not self.atom_mask.all():
            atom_logits = atom_logits.copy()
            atom_logits[~self.atom_mask] = pad_slot_logits(atom_logits.shape[1])
            bond_logits = bond_logits.copy()
            bond_logits[~self.pair_mask] = pad_slot_logits(bond_logits.shape[1])
        if not self.token_mask.all():
            type_logits = type_logits.copy()
            type_logits[~self.token_mask] = pad_slot_logits(type_logits.shape[1])
        valid = self.parent_valid
        parent_logits = self.parent_logits.copy()
        rows = valid.any(axis=1)
        floor = np.full(self.n_tokens, 0.0)
        floor[rows] = np.where(valid[rows], parent_logits[rows], -np.inf).max(axis=1) - 200.0
        parent_logits = np.where(valid, parent_logits, floor[:, None])
        return self.replace(atom_logits=atom_logits, bond_logits=bond_logits,
                            type_logits=type_logits, parent_logits=parent_logits)


def soft_degrees(state: RelaxedState, omega: BondOrderVector) -> np.ndarray:
    """Expected total bond order of every atom; padded atoms and pairs count 0."""
    ebo = expected_bond_order(state.bond_probs, omega) * state.pair_mask
    iu, ju = pair_indices(state.n_atoms)
    deg = np.zeros(state.n_atoms)
    np.add.at(deg, iu, ebo)
    np.add.at(deg, ju, ebo)
    deg[~state.atom_mask] = 0.0
    return deg


def soft_degree(state: RelaxedState, i: int, omega: BondOrderVector) -> float:
    """Expected total bond order of atom i."""
    if not 0 <= i < state.n_atoms:
        raise IndexError(f"atom index {i} out of range")
    return float(soft_degrees(state, omega)[i])
