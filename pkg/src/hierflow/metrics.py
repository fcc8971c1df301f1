"""Strict validity auditing, uniqueness, and batch accounting.

Validity goes beyond "the data structure parses": summed bond orders against
element valences, single-component connectivity, ring/aromaticity plausibility,
and hard geometric windows for bonded and non-bonded distances.  Failure causes
are assigned in a fixed priority order so invalidity histograms are
deterministic and exhaustive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphutil import connected_components, wl_hash
from .hierarchy import perceive_rings
from .molstate import BondOrderVector, ElementTable, Molecule

CAUSE_ORDER = ("valence", "disconnected", "ring_aromaticity", "geometry")


@dataclass(frozen=True)
class ValidityConfig:
    """Strictness knobs for the structural checks."""

    bond_length_min: float = 0.6   # Angstrom
    bond_length_max: float = 2.2
    clash_distance: float = 0.9    # non-bonded heavy-atom floor
    include_hydrogens_in_connectivity: bool = False
    check_geometry: bool = True


@dataclass(frozen=True)
class ValidityReport:
    valence_ok: bool
    connected: bool
    rings_plausible: bool
    geometry_ok: bool

    @property
    def valid(self) -> bool:
        return self.valence_ok and self.connected and self.rings_plausible and self.geometry_ok

    @property
    def cause(self) -> str | None:
        """First failing category in the fixed order; None when valid."""
        flags = {"valence": self.valence_ok, "disconnected": self.connected,
                 "ring_aromaticity": self.rings_plausible, "geometry": self.geometry_ok}
        for cause in CAUSE_ORDER:
            if not flags[cause]:
                return cause
        return None


def check_validity(mol: Molecule, table: ElementTable, omega: BondOrderVector,
                   config: ValidityConfig | None = None) -> ValidityReport:
    """Audit one molecule: valence, connectivity, rings/aromaticity, geometry."""
    config = config or ValidityConfig()
    n = mol.n_atoms
    orders = omega.orders[mol.bonds]
    degree = orders.sum(axis=1)
    valence_ok = bool(np.all(degree <= table.max_valence[mol.elements] + 1e-9))

    heavy = np.array([table.symbols[e] != "H" for e in mol.elements])
    conn_atoms = list(range(n)) if config.include_hydrogens_in_connectivity else \
        [i for i in range(n) if heavy[i]]
    if not conn_atoms:
        conn_atoms = list(range(n))
    connected = len(connected_components(mol.bonds, subset=conn_atoms)) == 1

    rings = perceive_rings(mol)
    rings_ok = all(len(r) >= 3 for r in rings)
    if omega.aromatic_index is not None:
        ring_edges = set()
        for ring in rings:
            for a, b in zip(ring, ring[1:] + ring[:1]):
                ring_edges.add((a, b) if a < b else (b, a))
        arom_i, arom_j = np.nonzero(np.triu(mol.bonds == omega.aromatic_index, k=1))
        rings_ok = rings_ok and all((int(i), int(j)) in ring_edges
                                    for i, j in zip(arom_i, arom_j))

    geometry_ok = True
    if config.check_geometry:
        dists = np.linalg.norm(mol.coords[:, None, :] - mol.coords[None, :, :], axis=-1)
        bonded = mol.bonds >= 1
        iu, ju = np.triu_indices(n, k=1)
        bonded_pairs = bonded[iu, ju]
        d = dists[iu, ju]
        if np.any(bonded_pairs):
            db = d[bonded_pairs]
            geometry_ok = bool(np.all((db >= config.bond_length_min) &
                                      (db <= config.bond_length_max)))
        if geometry_ok:
            heavy_pair = heavy[iu] & heavy[ju] & ~bonded_pairs
            if np.any(heavy_pair):
                geometry_ok = bool(np.all(d[heavy_pair] >= config.clash_distance))

    return ValidityReport(valence_ok, connected, rings_ok, geometry_ok)


def canonical_hash(mol: Molecule, table: ElementTable | None = None) -> str:
    """Graph hash invariant under atom relabeling (coordinates are ignored).

    Iterative neighborhood refinement seeded by element plus the incident
    bond-type multiset, run for N rounds, then a digest of the sorted labels.
    Refinement-equivalent non-isomorphic graphs can collide (the usual
    refinement limit); for molecular graphs this is vanishingly rare.
    """
    table = table or ElementTable.default()
    seeds = []
    for i in range(mol.n_atoms):
        incident = sorted(int(k) for k in mol.bonds[i] if k > 0)
        seeds.append(f"{table.symbols[mol.elements[i]]}|{incident}")
    return wl_hash(mol.bonds, seeds, rounds=mol.n_atoms)


@dataclass(frozen=True)
class BatchStats:
    """Aggregate rates over one sample batch.

    ``cause_histogram`` is normalized over invalid samples (percent).  The
    novelty rate is present only when a reference hash registry was supplied.
    """

    n_samples: int
    n_failed: int
    valid: float
    valid_unique: float
    cause_histogram: dict[str, float]
    novel: float | None = None


def batch_stats(reports: list[ValidityReport], hashes: list[str],
                n_failed: int = 0, registry: set[str] | None = None) -> BatchStats:
    """Fold per-molecule reports and hashes into batch rates.

    Valid&Unique counts a sample when it is valid and its hash has not
    appeared earlier in the batch.
    """
    if len(reports) != len(hashes):
        raise ValueError("reports and hashes must be parallel")
    total = len(reports) + n_failed
    if total == 0:
        raise ValueError("cannot summarize an empty batch")
    n_valid = 0
    n_valid_unique = 0
    n_novel = 0
    seen: set[str] = set()
    causes = {cause: 0 for cause in CAUSE_ORDER}
    for report, digest in zip(reports, hashes):
        if report.valid:
            n_valid += 1
            if digest not in seen:
                n_valid_unique += 1
            if registry is not None and digest not in registry:
                n_novel += 1
        else:
            causes[report.cause] += 1
        seen.add(digest)
    n_invalid = len(reports) - n_valid
    histogram = {cause: (100.0 * count / n_invalid if n_invalid else 0.0)
                 for cause, count in causes.items()}
    return BatchStats(
        n_samples=total,
        n_failed=n_failed,
        valid=n_valid / total,
        valid_unique=n_valid_unique / total,
        cause_histogram=histogram,
        novel=(n_novel / total) if registry is not None else None,
    )


def pp_conversion_rate(valid_raw: float, valid_pp: float) -> float:
    """Fraction of initially invalid samples converted by post-processing.

    Arguments are percentages; (valid_pp - valid_raw) / (100 - valid_raw).
    """
    if not 0.0 <= valid_raw <= valid_pp <= 100.0:
        raise ValueError("need 0 <= valid_raw <= valid_pp <= 100")
    if valid_raw == 100.0:
        raise ValueError("conversion rate is undefined when nothing is invalid")
    return (valid_pp - valid_raw) / (100.0 - valid_raw)
