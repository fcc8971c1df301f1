"""Deterministic multi-scale hierarchy plans over molecules.

A plan is a rooted token tree: one ROOT token, motif tokens for multi-atom
substructures, and one leaf token per atom (the atom's fixed anchor into the
tree).  The builder extracts fused ring systems, fragments the acyclic
remainder with explicit RECAP/BRICS-like cut rules, joins motifs by a maximum
spanning tree of their intersection graph, and emits tokens in a fixed causal
order (ROOT, motifs in BFS order, leaves by atom index) so that every parent
precedes its children.

Parent pointers are distributions during generation; the soft-ancestor dynamic
program turns them into per-atom ancestor probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .graphutil import connected_components, cycle_basis, wl_hash
from .molstate import ElementTable, Molecule

KIND_ROOT, KIND_MOTIF, KIND_LEAF = 0, 1, 2
_KIND_NAMES = {KIND_ROOT: "root", KIND_MOTIF: "motif", KIND_LEAF: "leaf"}

HETEROATOM_SYMBOLS = frozenset({"N", "O", "S"})

DEFAULT_M_MAX = 16
DEFAULT_N_MAX = 64


class BudgetError(ValueError):
    """A molecule does not fit the configured motif/atom budgets."""


class CausalityError(ValueError):
    """Parent distributions put mass on non-causal slots."""


@dataclass
class TokenVocabulary:
    """Token-type ids: ROOT, UNK, one id per element, then motif signatures.

    Motif signatures are registered on first sight; at sampling time a frozen
    vocabulary maps unseen signatures to UNK.
    """

    n_elements: int
    signature_ids: dict[str, int] | None = None
    frozen: bool = False

    ROOT_ID = 0
    UNK_ID = 1

    def __post_init__(self):
        if self.signature_ids is None:
            self.signature_ids = {}

    @property
    def size(self) -> int:
        return 2 + self.n_elements + len(self.signature_ids)

    def element_type_id(self, element: int) -> int:
        if not 0 <= element < self.n_elements:
            raise IndexError("element index outside the vocabulary")
        return 2 + element

    def motif_type_id(self, signature: str) -> int:
        existing = self.signature_ids.get(signature)
        if existing is not None:
            return existing
        if self.frozen:
            return self.UNK_ID
        new_id = 2 + self.n_elements + len(self.signature_ids)
        self.signature_ids[signature] = new_id
        return new_id

    def motif_ids(self) -> list[int]:
        return sorted(self.signature_ids.values())


@dataclass(frozen=True)
class HierarchyConfig:
    fragmentation: str = "recap_like"   # or "brics_like"
    m_max: int = DEFAULT_M_MAX
    n_max: int = DEFAULT_N_MAX

    @property
    def a_max(self) -> int:
        return 1 + self.m_max + self.n_max


@dataclass(frozen=True)
class MotifDecomposition:
    """Motifs (sorted atom tuples, in motif-ID order), their signatures, and
    intersection-graph edges (a, b, shared_atom_count) including bonded pairs."""

    motifs: tuple[tuple[int, ...], ...]
    signatures: tuple[str, ...]
    edges: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class HierarchyPlan:
    """Token tree with probabilistic parent pointers.

    kinds: structural slot type per token (root/motif/leaf), fixed by layout.
    type_probs: (A, C_h) token-type distributions.
    parent_probs: (A, A); row 0 is all-zero (ROOT has no parent) and every row
        satisfies the causal constraint rho[a, b] = 0 for b >= a.
    leaf_anchor: token slot of each atom's leaf.
    token_mask: real (True) vs padding (False) slots.
    """

    kinds: np.ndarray
    type_probs: np.ndarray
    parent_probs: np.ndarray
    leaf_anchor: np.ndarray
    token_mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.kinds.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.leaf_anchor.shape[0]

    @property
    def n_types(self) -> int:
        return self.type_probs.shape[1]

    def is_hard(self, atol: float = 0.0) -> bool:
        real = self.token_mask
        one_hot_types = np.all(np.isin(self.type_probs[real], (0.0, 1.0)))
        rows = real.copy()
        rows[0] = False
        one_hot_parents = np.all(np.isin(self.parent_probs[rows], (0.0, 1.0)))
        return bool(one_hot_types and one_hot_parents)

    def hard_parents(self) -> np.ndarray:
        """(A,) parent slot per token (-1 for ROOT and padding)."""
        parents = np.full(self.n_tokens, -1, dtype=int)
        for a in range(1, self.n_tokens):
            if self.token_mask[a]:
                parents[a] = int(np.argmax(self.parent_probs[a]))
        return parents

    def depths(self) -> np.ndarray:
        """Token depths for hard plans (ROOT = 0)."""
        parents = self.hard_parents()
        depths = np.zeros(self.n_tokens, dtype=int)
        for a in range(1, self.n_tokens):
            if self.token_mask[a]:
                depths[a] = depths[parents[a]] + 1
        return depths

    def replace(self, **kw) -> "HierarchyPlan":
        return replace(self, **kw)

    # --- plan interchange format -------------------------------------------

    def to_json_dict(self) -> dict:
        tokens = []
        for a in range(self.n_tokens):
            row = self.parent_probs[a]
            if a == 0 or not self.token_mask[a]:
                parent = None
            elif np.isin(row, (0.0, 1.0)).all():
                parent = int(np.argmax(row))
            else:
                parent = [float(x) for x in row]
            tokens.append({
                "kind": _KIND_NAMES[int(self.kinds[a])],
                "type_id": int(np.argmax(self.type_probs[a])),
                "parent": parent,
            })
        return {
            "tokens": tokens,
            "leaf_anchor": [int(x) for x in self.leaf_anchor],
            "mask": [bool(x) for x in self.token_mask],
        }

    @classmethod
    def from_json_dict(cls, d: dict, n_types: int) -> "HierarchyPlan":
        tokens = d["tokens"]
        a_total = len(tokens)
        name_to_kind = {v: k for k, v in _KIND_NAMES.items()}
        kinds = np.array([name_to_kind[t["kind"]] for t in tokens], dtype=int)
        type_probs = np.zeros((a_total, n_types))
        parent_probs = np.zeros((a_total, a_total))
        for a, tok in enumerate(tokens):
            type_probs[a, tok["type_id"]] = 1.0
            parent = tok["parent"]
            if parent is None:
                continue
            if isinstance(parent, list):
                parent_probs[a] = np.asarray(parent, dtype=float)
            else:
                parent_probs[a, int(parent)] = 1.0
        return cls(kinds, type_probs, parent_probs,
                   np.asarray(d["leaf_anchor"], dtype=int),
                   np.asarray(d["mask"], dtype=bool))


# ---------------------------------------------------------------------------
# motif extraction


def perceive_rings(mol: Molecule) -> list[list[int]]:
    """Smallest-cycle basis of the bond graph as ordered atom cycles.

    Deterministic for a fixed input; acyclic graphs give an empty list.
    """
    rings = cycle_basis(mol.bonds)
    return sorted(rings, key=lambda r: (len(r), tuple(sorted(r))))


def fuse_rings(rings: list[list[int]]) -> list[tuple[int, ...]]:
    """Union rings that share at least one atom into fused ring systems."""
    parent = list(range(len(rings)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    sets = [set(r) for r in rings]
    for a in range(len(rings)):
        for b in range(a + 1, len(rings)):
            if sets[a] & sets[b]:
                parent[find(a)] = find(b)
    groups: dict[int, set[int]] = {}
    for a in range(len(rings)):
        groups.setdefault(find(a), set()).update(sets[a])
    return sorted((tuple(sorted(g)) for g in groups.values()), key=lambda g: g[0])


def _heavy_degree(mol: Molecule, table: ElementTable) -> np.ndarray:
    heavy = np.array([table.symbols[e] != "H" for e in mol.elements])
    return ((mol.bonds > 0) & heavy[None, :]).sum(axis=1)


def fragment_acyclic(mol: Molecule, ring_atoms: set[int], mode: str,
                     table: ElementTable | None = None) -> list[tuple[int, ...]]:
    """Partition non-ring atoms into motifs by cutting eligible single bonds.

    recap_like cuts single bonds with a heteroatom (N/O/S) endpoint where both
    endpoints have heavy-atom degree >= 2.  brics_like additionally cuts C-C
    single bonds (same degree condition) where an endpoint has a heteroatom
    neighbor besides the other endpoint.  Components with no eligible cut stay
    whole.
    """
    if mode not in ("recap_like", "brics_like"):
        raise ValueError(f"unknown fragmentation mode {mode!r}")
    table = table or ElementTable.default()
    region = [i for i in range(mol.n_atoms) if i not in ring_atoms]
    if not region:
        return []
    symbols = [table.symbols[e] for e in mol.elements]
    hetero = [s in HETEROATOM_SYMBOLS for s in symbols]
    heavy_deg = _heavy_degree(mol, table)

    def has_hetero_neighbor(i: int, excluding: int) -> bool:
        for j in np.nonzero(mol.bonds[i] > 0)[0]:
            if j != excluding and hetero[j]:
                return True
        return False

    cut = np.zeros_like(mol.bonds, dtype=bool)
    for i in region:
        for j in np.nonzero(mol.bonds[i] > 0)[0]:
            j = int(j)
            if j <= i or j in ring_atoms or mol.bonds[i, j] != 1:
                continue
            if heavy_deg[i] < 2 or heavy_deg[j] < 2:
                continue
            eligible = hetero[i] or hetero[j]
            if not eligible and mode == "brics_like":
                both_carbon = symbols[i] == "C" and symbols[j] == "C"
                eligible = both_carbon and (has_hetero_neighbor(i, j) or has_hetero_neighbor(j, i))
            if eligible:
                cut[i, j] = cut[j, i] = True

    remaining = mol.bonds.copy()
    remaining[cut] = 0
    comps = connected_components(remaining, subset=region)
    return [tuple(c) for c in comps]


def motif_signature(mol: Molecule, atoms: tuple[int, ...],
                    table: ElementTable | None = None) -> str:
    """Canonical label of a motif subgraph with attachment-point markers.

    Seeds combine element symbol and the count of bonds leaving the motif, so
    two motifs match only if they agree as attachment-annotated subgraphs.
    """
    table = table or ElementTable.default()
    atom_list = list(atoms)
    inside = set(atom_list)
    sub = mol.bonds[np.ix_(atom_list, atom_list)]
    seeds = []
    for i in atom_list:
        external = sum(1 for j in np.nonzero(mol.bonds[i] > 0)[0] if int(j) not in inside)
        seeds.append(f"{table.symbols[mol.elements[i]]}|a{external}")
    return wl_hash(sub, seeds, rounds=len(atom_list))


def _motifs_adjacent(mol: Molecule, a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    if set(a) & set(b):
        return True
    return bool(np.any(mol.bonds[np.ix_(list(a), list(b))] > 0))


def _merge_to_budget(mol: Molecule, motifs: list[tuple[int, ...]], m_max: int) -> list[tuple[int, ...]]:
    """Greedily merge the smallest adjacent motif pair until within budget."""
    motifs = sorted(motifs)
    while len(motifs) > m_max:
        best = None
        for a in range(len(motifs)):
            for b in range(a + 1, len(motifs)):
                if not _motifs_adjacent(mol, motifs[a], motifs[b]):
                    continue
                key = (len(motifs[a]) + len(motifs[b]),
                       min(len(motifs[a]), len(motifs[b])), motifs[a], motifs[b])
                if best is None or key < best[0]:
                    best = (key, a, b)
        if best is None:
            raise BudgetError(
                f"{len(motifs)} motifs remain after merging but the budget is "
                f"{m_max}; the motif graph has too many components")
        _, a, b = best
        merged = tuple(sorted(set(motifs[a]) | set(motifs[b])))
        motifs = sorted([m for k, m in enumerate(motifs) if k not in (a, b)] + [merged])
    return motifs


def build_motif_decomposition(mol: Molecule, config: HierarchyConfig | None = None,
                               table: ElementTable | None = None) -> MotifDecomposition:
    """Ring-first motif extraction with deterministic IDs.

    Fused ring systems become motifs, the acyclic remainder is fragmented by
    the configured rule set, oversize decompositions are merged down to the
    motif budget, and IDs are assigned by (decreasing atom count, signature,
    member atoms).
    """
    config = config or HierarchyConfig()
    table = table or ElementTable.default()
    fused = fuse_rings(perceive_rings(mol))
    ring_atoms = set().union(*map(set, fused)) if fused else set()
    fragments = fragment_acyclic(mol, ring_atoms, config.fragmentation, table)
    # motifs are multi-atom substructures; lone atoms stay motif-free
    motifs = list(fused) + [f for f in fragments if len(f) >= 2]
    motifs = _merge_to_budget(mol, motifs, config.m_max)
    signatures = [motif_signature(mol, m, table) for m in motifs]
    order = sorted(range(len(motifs)),
                   key=lambda k: (-len(motifs[k]), signatures[k], motifs[k]))
    motifs = [motifs[k] for k in order]
    signatures = [signatures[k] for k in order]
    edges = []
    for a in range(len(motifs)):
        for b in range(a + 1, len(motifs)):
            shared = len(set(motifs[a]) & set(motifs[b]))
            if shared > 0 or _motifs_adjacent(mol, motifs[a], motifs[b]):
                edges.append((a, b, shared))
    return MotifDecomposition(tuple(motifs), tuple(signatures), tuple(edges))


def build_motif_tree(decomp: MotifDecomposition) -> np.ndarray:
    """Rooted motif forest from the intersection graph.

    Maximum spanning tree per connected component (Kruskal; ties broken by the
    lexicographically smaller motif-ID pair), rooted at the motif with maximal
    atom coverage (ties by motif ID).  Returns the parent ID per motif with -1
    for component roots, which attach to ROOT.
    """
    n = len(decomp.motifs)
    parent_uf = list(range(n))

    def find(a):
        while parent_uf[a] != a:
            parent_uf[a] = parent_uf[parent_uf[a]]
            a = parent_uf[a]
        return a

    chosen: dict[int, list[int]] = {a: [] for a in range(n)}
    for a, b, w in sorted(decomp.edges, key=lambda e: (-e[2], e[0], e[1])):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent_uf[ra] = rb
            chosen[a].append(b)
            chosen[b].append(a)

    parents = np.full(n, -1, dtype=int)
    seen: set[int] = set()
    for comp_root in sorted(range(n), key=lambda m: (-len(decomp.motifs[m]), m)):
        if comp_root in seen:
            continue
        seen.add(comp_root)
        stack = [comp_root]
        while stack:
            u = stack.pop()
            for v in sorted(chosen[u]):
                if v not in seen:
                    seen.add(v)
                    parents[v] = u
                    stack.append(v)
    return parents


def build_hierarchy(mol: Molecule, config: HierarchyConfig | None = None,
                    vocab: TokenVocabulary | None = None,
                    table: ElementTable | None = None) -> HierarchyPlan:
    """Deterministic hard plan for a molecule (compact layout, no padding).

    Token order: ROOT, motif tokens in BFS order of the rooted motif forest
    (ties by motif ID), then leaf tokens by atom index.  Every leaf's parent
    is the deepest motif containing its atom, or ROOT for motif-free atoms.
    """
    config = config or HierarchyConfig()
    table = table or ElementTable.default()
    vocab = vocab or TokenVocabulary(table.n_elements)
    if mol.n_atoms > config.n_max:
        raise BudgetError(f"molecule has {mol.n_atoms} atoms, budget is {config.n_max}")
    decomp = build_motif_decomposition(mol, config, table)
    motif_parents = build_motif_tree(decomp)
    n_motifs = len(decomp.motifs)

    # BFS order over the forest: component roots by ID, children by ID
    children: dict[int, list[int]] = {m: [] for m in range(n_motifs)}
    roots = [m for m in range(n_motifs) if motif_parents[m] == -1]
    for m in range(n_motifs):
        if motif_parents[m] >= 0:
            children[motif_parents[m]].append(m)
    bfs: list[int] = []
    queue = list(sorted(roots))
    while queue:
        m = queue.pop(0)
        bfs.append(m)
        queue.extend(sorted(children[m]))
    slot_of_motif = {m: 1 + rank for rank, m in enumerate(bfs)}

    depth = np.zeros(n_motifs, dtype=int)
    for m in bfs:
        depth[m] = 0 if motif_parents[m] == -1 else depth[motif_parents[m]] + 1

    containing: dict[int, list[int]] = {}
    for m, atoms in enumerate(decomp.motifs):
        for i in atoms:
            containing.setdefault(i, []).append(m)

    n_atoms = mol.n_atoms
    a_total = 1 + n_motifs + n_atoms
    kinds = np.array([KIND_ROOT] + [KIND_MOTIF] * n_motifs + [KIND_LEAF] * n_atoms)
    parent_probs = np.zeros((a_total, a_total))
    type_ids = np.zeros(a_total, dtype=int)
    type_ids[0] = vocab.ROOT_ID
    for m in bfs:
        slot = slot_of_motif[m]
        type_ids[slot] = vocab.motif_type_id(decomp.signatures[m])
        p = motif_parents[m]
        parent_probs[slot, 0 if p == -1 else slot_of_motif[p]] = 1.0
    for i in range(n_atoms):
        slot = 1 + n_motifs + i
        type_ids[slot] = vocab.element_type_id(int(mol.elements[i]))
        owners = containing.get(i, [])
        if owners:
            deepest = min(owners, key=lambda m: (-depth[m], m))
            parent_probs[slot, slot_of_motif[deepest]] = 1.0
        else:
            parent_probs[slot, 0] = 1.0

    # the vocabulary may have grown while registering signatures
    type_probs = np.zeros((a_total, vocab.size))
    type_probs[np.arange(a_total), type_ids] = 1.0
    leaf_anchor = 1 + n_motifs + np.arange(n_atoms)
    plan = HierarchyPlan(kinds, type_probs, parent_probs, leaf_anchor,
                         np.ones(a_total, dtype=bool))
    validate_causal(plan)
    return plan


# ---------------------------------------------------------------------------
# causal masking and the soft-ancestor dynamic program


def causal_renormalize(parent_probs: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
    """Project arbitrary non-negative parent scores onto the causal support.

    Entries at slots b >= a or at masked parents are zeroed; remaining mass is
    renormalized per row.  Rows with no remaining mass fall back to uniform
    over the valid parents.  The ROOT row must carry no mass.
    """
    rho = np.asarray(parent_probs, dtype=float)
    mask = np.asarray(token_mask, dtype=bool)
    a_total = rho.shape[0]
    if rho.shape != (a_total, a_total):
        raise ValueError("parent matrix must be square")
    if np.any(rho < 0):
        raise ValueError("parent scores must be non-negative")
    if np.any(rho[0] > 0):
        raise CausalityError("the ROOT token cannot be given a parent")
    valid = np.tril(np.ones((a_total, a_total), dtype=bool), k=-1) & mask[None, :] & mask[:, None]
    out = np.where(valid, rho, 0.0)
    for a in range(1, a_total):
        if not mask[a]:
            out[a] = 0.0
            continue
        total = out[a].sum()
        if total > 0:
            out[a] /= total
        else:
            n_valid = valid[a].sum()
            if n_valid:
                out[a, valid[a]] = 1.0 / n_valid
    return out


def validate_causal(plan: HierarchyPlan, atol: float = 1e-9) -> None:
    """Raise CausalityError unless the plan's parent pointers are causal."""
    rho = plan.parent_probs
    a_total = plan.n_tokens
    bad = np.triu(np.ones((a_total, a_total), dtype=bool), k=0)
    if np.any(rho[bad] != 0.0):
        raise CausalityError("parent mass on slots b >= a")
    if np.any(rho[:, ~plan.token_mask] != 0.0):
        raise CausalityError("parent mass on masked tokens")
    if np.any(rho[0] != 0.0):
        raise CausalityError("ROOT must have no parent")
    rows = plan.token_mask.copy()
    rows[0] = False
    sums = rho[rows].sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise CausalityError("unmasked parent rows must sum to 1")


def soft_ancestor_mask(plan: HierarchyPlan) -> np.ndarray:
    """Probability that each token lies on each atom's ancestor chain.

    pi[i, anchor(i)] = 1; for earlier slots b the mass flows down the
    probabilistic parent pointers, pi[i, b] = sum_{a > b} pi[i, a] * rho[a, b];
    slots after the anchor are 0.  For hard plans this is the 0/1 ancestor
    indicator.
    """
    validate_causal(plan)
    rho = plan.parent_probs
    n_atoms, a_total = plan.n_atoms, plan.n_tokens
    pi = np.zeros((n_atoms, a_total))
    pi[np.arange(n_atoms), plan.leaf_anchor] = 1.0
    for b in range(a_total - 2, -1, -1):
        col = pi[:, b + 1:] @ rho[b + 1:, b]
        pi[:, b] = np.where(plan.leaf_anchor == b, 1.0, col)
    return pi


# ---------------------------------------------------------------------------
# padding


def pad_plan(plan: HierarchyPlan, m_max: int, n_max: int) -> HierarchyPlan:
    """Embed a compact plan into the fixed slot layout of size 1 + m_max + n_max.

    Slot layout: ROOT at 0, motif slots 1..m_max (unused ones masked), leaf
    slots after that (one per atom budget).  Already-padded plans of the same
    layout pass through unchanged.
    """
    n_motifs = int(np.sum((plan.kinds == KIND_MOTIF) & plan.token_mask))
    n_atoms = plan.n_atoms
    if n_motifs > m_max or n_atoms > n_max:
        raise BudgetError(f"plan with {n_motifs} motifs / {n_atoms} atoms exceeds "
                          f"budget ({m_max}, {n_max})")
    a_new = 1 + m_max + n_max
    if plan.n_tokens == a_new and np.array_equal(
            plan.leaf_anchor, 1 + m_max + np.arange(n_atoms)):
        return plan

    old_motif_slots = np.nonzero((plan.kinds == KIND_MOTIF) & plan.token_mask)[0]
    old_leaf_slots = plan.leaf_anchor
    remap = np.full(plan.n_tokens, -1, dtype=int)
    remap[0] = 0
    remap[old_motif_slots] = 1 + np.arange(n_motifs)
    remap[old_leaf_slots] = 1 + m_max + np.arange(n_atoms)

    kinds = np.concatenate(([KIND_ROOT], np.full(m_max, KIND_MOTIF), np.full(n_max, KIND_LEAF)))
    token_mask = np.zeros(a_new, dtype=bool)
    token_mask[0] = True
    token_mask[1:1 + n_motifs] = True
    token_mask[1 + m_max:1 + m_max + n_atoms] = True

    type_probs = np.zeros((a_new, plan.n_types))
    type_probs[:, 0] = 1.0  # padding pins mass to category 0
    parent_probs = np.zeros((a_new, a_new))
    parent_probs[1:, 0] = 1.0
    parent_probs[0, 0] = 0.0
    old_real = np.nonzero(plan.token_mask)[0]
    type_probs[remap[old_real]] = plan.type_probs[old_real]
    for a in old_real:
        if a == 0:
            continue
        row = np.zeros(a_new)
        for b in np.nonzero(plan.parent_probs[a] > 0)[0]:
            row[remap[b]] = plan.parent_probs[a, b]
        parent_probs[remap[a]] = row
    leaf_anchor = 1 + m_max + np.arange(n_atoms)
    padded = HierarchyPlan(kinds, type_probs, parent_probs, leaf_anchor, token_mask)
    validate_causal(padded)
    return padded


def unpad_plan(plan: HierarchyPlan) -> HierarchyPlan:
    """Strip masked slots, recovering the compact layout."""
    real = np.nonzero(plan.token_mask)[0]
    remap = np.full(plan.n_tokens, -1, dtype=int)
    remap[real] = np.arange(real.size)
    kinds = plan.kinds[real]
    type_probs = plan.type_probs[real]
    parent_probs = plan.parent_probs[np.ix_(real, real)]
    leaf_anchor = remap[plan.leaf_anchor]
    return HierarchyPlan(kinds, type_probs, parent_probs, leaf_anchor,
                         np.ones(real.size, dtype=bool))
