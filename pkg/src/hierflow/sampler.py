"""Coupled logit-space / coordinate ODE sampling with annealed energy guidance.

The categorical state evolves as unconstrained logits; probabilities are
softmax reads, so simplex feasibility holds at every step by construction.
Each block is driven toward the predictor's endpoint at rate 1/(1 - t + eps)
and nudged by annealed energy gradients: the chemistry group on atom/bond
logits, the hierarchy-consistency group on bond logits, and the geometry group
on coordinates always and on logits only after a late-time threshold.  The
connectivity gradient is refreshed on a fixed cadence once its activation time
is reached and held in between.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .energies import EnergyContext, LogitGrads, anneal, \
    chem_gradients, connectivity_gradients, consistency_gradients, geom_gradients
from .hierarchy import HierarchyConfig
from .molstate import BondOrderVector, ElementTable, Molecule, RelaxedState, \
    pair_indices, probs_to_logits, recenter
from .training import EndpointPrediction, pair_similarity_from_tokens


class SamplerError(RuntimeError):
    """Integration failed (non-finite state or drift)."""


@dataclass(frozen=True)
class SamplerConfig:
    """Solver and guidance settings."""

    steps: int = 100
    eps: float = 1e-3            # endpoint-flow denominator regularizer
    t_geom: float = 0.7          # geometry-to-topology coupling threshold
    t_conn: float = 0.6          # connectivity-gradient activation time
    conn_every: int = 5          # connectivity refresh cadence in solver steps
    enable_chem: bool = True
    enable_cons: bool = True
    enable_geom: bool = True
    sigma_r: float = 1.0         # prior coordinate scale (Angstrom)
    batch_size: int = 16
    valence_repair: bool = False
    record_trajectory: bool = False
    validate_each_step: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one solver step")
        for name in ("t_geom", "t_conn"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.conn_every < 1:
            raise ValueError("connectivity cadence must be >= 1")

    def replace(self, **kw) -> "SamplerConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorTables:
    """Empirical marginals the prior draws from.

    Conditionals are keyed by atom count; ``motif_type_probs`` ranges over the
    full token-type vocabulary (mass only on motif-signature ids).
    ``mean_edges`` doubles as the edge-count target table for the sparsity
    energy.
    """

    size_probs: dict[int, float]
    atom_probs_by_n: dict[int, np.ndarray]
    bond_probs_by_n: dict[int, np.ndarray]
    motif_count_by_n: dict[int, np.ndarray]
    motif_type_probs: np.ndarray
    n_token_types: int
    sigma_r: float = 1.0
    mean_edges: dict[int, float] | None = None

    def __post_init__(self):
        total = sum(self.size_probs.values())
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError("atom-count marginal must sum to 1")
        for n in self.size_probs:
            for name, table in (("atom", self.atom_probs_by_n),
                                ("bond", self.bond_probs_by_n),
                                ("motif count", self.motif_count_by_n)):
                if n not in table:
                    raise ValueError(f"missing {name} marginal for N={n}")
                probs = np.asarray(table[n], float)
                if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-9):
                    raise ValueError(f"invalid {name} marginal for N={n}")
        mt = np.asarray(self.motif_type_probs, float)
        if mt.shape != (self.n_token_types,) or not np.isclose(mt.sum(), 1.0, atol=1e-9):
            raise ValueError("motif-type marginal must be a distribution over the vocabulary")

    @property
    def supported_sizes(self) -> list[int]:
        return sorted(self.size_probs)

    @classmethod
    def uniform(cls, sizes, table: ElementTable, omega: BondOrderVector,
                n_token_types: int, max_motifs: int = 4, sigma_r: float = 1.0,
                no_bond_mass: float = 0.7) -> "PriorTables":
        """Featureless tables: uniform sizes and types, sparse-leaning bonds."""
        sizes = sorted(int(n) for n in sizes)
        size_probs = {n: 1.0 / len(sizes) for n in sizes}
        atom = np.full(table.n_elements, 1.0 / table.n_elements)
        bond = np.full(omega.n_types, (1.0 - no_bond_mass) / (omega.n_types - 1))
        bond[0] = no_bond_mass
        motif_type = np.zeros(n_token_types)
        motif_type[1] = 1.0  # UNK: no signature registry
        counts = np.full(max_motifs + 1, 1.0 / (max_motifs + 1))
        return cls(size_probs,
                   {n: atom for n in sizes},
                   {n: bond for n in sizes},
                   {n: counts for n in sizes},
                   motif_type, n_token_types, sigma_r,
                   mean_edges={n: float(n - 1) for n in sizes})

    @classmethod
    def from_molecules(cls, mols, plans, table: ElementTable, omega: BondOrderVector,
                       n_token_types: int, sigma_r: float = 1.0) -> "PriorTables":
        """Estimate every marginal from a molecule corpus with built plans."""
        if len(mols) == 0:
            raise ValueError("need at least one molecule")
        by_n: dict[int, list[int]] = {}
        for idx, mol in enumerate(mols):
            by_n.setdefault(mol.n_atoms, []).append(idx)
        size_probs = {n: len(ids) / len(mols) for n, ids in by_n.items()}
        atom_by_n, bond_by_n, count_by_n, edges_by_n = {}, {}, {}, {}
        max_motifs = 0
        motif_type_counts = np.zeros(n_token_types)
        motif_counts_raw: dict[int, list[int]] = {}
        for n, ids in by_n.items():
            atom_counts = np.zeros(table.n_elements)
            bond_counts = np.zeros(omega.n_types)
            edge_total = 0.0
            motif_counts_raw[n] = []
            for idx in ids:
                mol, plan = mols[idx], plans[idx]
                np.add.at(atom_counts, mol.elements, 1.0)
                iu, ju = pair_indices(mol.n_atoms)
                np.add.at(bond_counts, mol.bonds[iu, ju], 1.0)
                edge_total += float(np.sum(mol.bonds[iu, ju] >= 1))
                motif_slots = (plan.kinds == KIND_MOTIF) & plan.token_mask
                m = int(motif_slots.sum())
                motif_counts_raw[n].append(m)
                max_motifs = max(max_motifs, m)
                types = np.argmax(plan.type_probs, axis=1)
                np.add.at(motif_type_counts, types[motif_slots], 1.0)
            atom_by_n[n] = atom_counts / atom_counts.sum()
            bond_by_n[n] = bond_counts / bond_counts.sum()
            edges_by_n[n] = edge_total / len(ids)
        for n, raw in motif_counts_raw.items():
            counts = np.zeros(max_motifs + 1)
            np.add.at(counts, raw, 1.0)
            count_by_n[n] = counts / counts.sum()
        if motif_type_counts.sum() == 0:
            motif_type_counts[1] = 1.0  # corpus without motifs: fall back to UNK
        motif_type = motif_type_counts / motif_type_counts.sum()
        return cls(size_probs, atom_by_n, bond_by_n, count_by_n, motif_type,
                   n_token_types, sigma_r, mean_edges=edges_by_n)

    def to_json_dict(self) -> dict:
        return {
            "size_probs": {str(k): v for k, v in self.size_probs.items()},
            "atom_probs_by_n": {str(k): np.asarray(v).tolist()
                                for k, v in self.atom_probs_by_n.items()},
            "bond_probs_by_n": {str(k): np.asarray(v).tolist()
                                for k, v in self.bond_probs_by_n.items()},
            "motif_count_by_n": {str(k): np.asarray(v).tolist()
                                 for k, v in self.motif_count_by_n.items()},
            "motif_type_probs": np.asarray(self.motif_type_probs).tolist(),
            "n_token_types": self.n_token_types,
            "sigma_r": self.sigma_r,
            "mean_edges": None if self.mean_edges is None else
                {str(k): v for k, v in self.mean_edges.items()},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PriorTables":
        return cls(
            size_probs={int(k): float(v) for k, v in d["size_probs"].items()},
            atom_probs_by_n={int(k): np.asarray(v, float)
                             for k, v in d["atom_probs_by_n"].items()},
            bond_probs_by_n={int(k): np.asarray(v, float)
                             for k, v in d["bond_probs_by_n"].items()},
            motif_count_by_n={int(k): np.asarray(v, float)
                              for k, v in d["motif_count_by_n"].items()},
            motif_type_probs=np.asarray(d["motif_type_probs"], float),
            n_token_types=int(d["n_token_types"]),
            sigma_r=float(d.get("sigma_r", 1.0)),
            mean_edges=None if d.get("mean_edges") is None else
                {int(k): float(v) for k, v in d["mean_edges"].items()},
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "PriorTables":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _one_hot_rows(rng: np.random.Generator, probs: np.ndarray, rows: int,
                  width: int) -> np.ndarray:
    draws = rng.choice(width, size=rows, p=probs)
    out = np.zeros((rows, width))
    out[np.arange(rows), draws] = 1.0
    return out


def sample_prior(tables: PriorTables, seed: int, hier: HierarchyConfig,
                 table: ElementTable, omega: BondOrderVector,
                 n_atoms: int | None = None, n_motifs: int | None = None) -> RelaxedState:
    """Draw the t=0 relaxed state.

    Atom and bond endpoints are i.i.d. category draws from the conditional
    marginals (one-hot, then clipped and converted to logits); the motif count
    and motif types come from their marginals; leaf token types reuse the
    atom-type marginal mapped into the token vocabulary; parent pointers are
    the uniform distribution over causally valid slots; coordinates are
    centered Gaussian draws.

    Deterministic for a fixed seed.  Each draw uses its own seed substream, so
    pinning ``n_atoms``/``n_motifs`` to the values that would have been drawn
    reproduces the identical state.
    """
    def rng_for(tag: int) -> np.random.Generator:
        return np.random.default_rng([seed, tag])

    if n_atoms is None:
        sizes = tables.supported_sizes
        n_atoms = int(rng_for(0).choice(sizes, p=[tables.size_probs[n] for n in sizes]))
    if n_atoms not in tables.atom_probs_by_n:
        raise ValueError(f"prior tables do not cover N={n_atoms}")
    if n_atoms > hier.n_max:
        raise ValueError(f"N={n_atoms} exceeds the leaf budget {hier.n_max}")
    atom_marginal = np.asarray(tables.atom_probs_by_n[n_atoms], float)
    bond_marginal = np.asarray(tables.bond_probs_by_n[n_atoms], float)
    count_marginal = np.asarray(tables.motif_count_by_n[n_atoms], float)
    if atom_marginal.size != table.n_elements or bond_marginal.size != omega.n_types:
        raise ValueError("prior marginals do not match the vocabularies")

    if n_motifs is None:
        n_motifs = int(rng_for(1).choice(count_marginal.size, p=count_marginal))
    n_motifs = min(n_motifs, hier.m_max)

    a_total = hier.a_max
    atom_probs = _one_hot_rows(rng_for(2), atom_marginal, n_atoms, table.n_elements)
    n_pairs = n_atoms * (n_atoms - 1) // 2
    bond_probs = _one_hot_rows(rng_for(3), bond_marginal, n_pairs, omega.n_types)

    token_mask = np.zeros(a_total, dtype=bool)
    token_mask[0] = True
    token_mask[1:1 + n_motifs] = True
    token_mask[1 + hier.m_max:1 + hier.m_max + n_atoms] = True

    type_probs = np.zeros((a_total, tables.n_token_types))
    type_probs[:, 0] = 1.0
    if n_motifs:
        type_probs[1:1 + n_motifs] = _one_hot_rows(
            rng_for(4), tables.motif_type_probs, n_motifs, tables.n_token_types)
    leaf_elements = rng_for(5).choice(table.n_elements, size=n_atoms, p=atom_marginal)
    leaf_slots = 1 + hier.m_max + np.arange(n_atoms)
    type_probs[leaf_slots] = 0.0
    type_probs[leaf_slots, 2 + leaf_elements] = 1.0

    parent_probs = np.zeros((a_total, a_total))
    for a in range(1, a_total):
        if not token_mask[a]:
            parent_probs[a, 0] = 1.0
            continue
        valid = np.nonzero(token_mask[:a])[0]
        parent_probs[a, valid] = 1.0 / valid.size

    coords = recenter(rng_for(6).normal(0.0, tables.sigma_r, size=(n_atoms, 3)))
    state = RelaxedState(
        atom_logits=probs_to_logits(atom_probs),
        bond_logits=probs_to_logits(bond_probs),
        type_logits=probs_to_logits(type_probs),
        parent_logits=probs_to_logits(parent_probs),
        coords=coords,
        t=0.0,
        atom_mask=np.ones(n_atoms, dtype=bool),
        token_mask=token_mask,
        leaf_anchor=leaf_slots,
    )
    return state.enforce_masks()


# ---------------------------------------------------------------------------
# drift and integration


@dataclass
class Drift:
    atom_logits: np.ndarray
    bond_logits: np.ndarray
    type_logits: np.ndarray
    parent_logits: np.ndarray
    coords: np.ndarray


@dataclass
class GuidanceCache:
    """Holds the connectivity gradient between refresh steps."""

    conn_grads: LogitGrads | None = None
    conn_value: float = 0.0


def _endpoint_term(target: np.ndarray, current: np.ndarray, t: float, eps: float) -> np.ndarray:
    rate = 1.0 / (1.0 - t + eps)
    return (target - current) * rate


def drift(state: RelaxedState, prediction: EndpointPrediction, t: float,
          config: SamplerConfig, ectx: EnergyContext,
          cache: GuidanceCache | None = None,
          geom_coupling: bool | None = None) -> Drift:
    """Time derivative of all logit blocks and coordinates.

    ``geom_coupling`` gates the geometry-to-topology logit term; callers pass
    the indicator evaluated at the step's left endpoint.  ``cache`` supplies
    the held connectivity gradient (None before its activation time).
    """
    prediction.check_matches(state)
    cfg = ectx.config
    if geom_coupling is None:
        geom_coupling = t >= config.t_geom

    d = Drift(
        atom_logits=_endpoint_term(prediction.atom_logits, state.atom_logits, t, config.eps),
        bond_logits=_endpoint_term(prediction.bond_logits, state.bond_logits, t, config.eps),
        type_logits=_endpoint_term(prediction.type_logits, state.type_logits, t, config.eps),
        parent_logits=_endpoint_term(prediction.parent_logits, state.parent_logits, t, config.eps),
        coords=_endpoint_term(prediction.coords, state.coords, t, config.eps),
    )
    for name in ("atom_logits", "bond_logits", "type_logits", "parent_logits", "coords"):
        if not np.all(np.isfinite(getattr(d, name))):
            raise SamplerError(f"non-finite endpoint drift in {name}")

    if config.enable_chem:
        eta = anneal(cfg.eta_chem0, cfg.gamma, t)
        if eta > 0.0:
            _, grads = chem_gradients(state, ectx)
            if cache is not None and cache.conn_grads is not None:
                grads += cache.conn_grads
            d.atom_logits -= eta * grads.atom_logits
            d.bond_logits -= eta * grads.bond_logits

    if config.enable_cons:
        eta = anneal(cfg.eta_cons0, cfg.gamma, t)
        sim_ctx = ectx
        if sim_ctx.hier_similarity is None and prediction.token_points is not None:
            sim = pair_similarity_from_tokens(state, prediction.token_points,
                                              prediction.curvature, cfg.d_thresh, cfg.tau)
            sim_ctx = replace(ectx, hier_similarity=sim)
        if eta > 0.0 and (sim_ctx.hier_similarity is not None or
                          (cfg.use_hier_conn and sim_ctx.motif_atoms) or
                          (cfg.use_ring_terms and sim_ctx.rings)):
            _, grads = consistency_gradients(state, sim_ctx)
            d.atom_logits -= eta * grads.atom_logits
            d.bond_logits -= eta * grads.bond_logits

    if config.enable_geom:
        eta_r = anneal(cfg.eta_geom0, cfg.gamma, t)
        eta_z = anneal(cfg.eta_geom_z0, cfg.gamma, t) if geom_coupling else 0.0
        if eta_r > 0.0 or eta_z > 0.0:
            _, grads = geom_gradients(state, ectx)
            d.coords -= eta_r * grads.coords
            if eta_z > 0.0:
                d.atom_logits -= eta_z * grads.atom_logits
                d.bond_logits -= eta_z * grads.bond_logits
    return d


def _apply(state: RelaxedState, d: Drift, dt: float, t_new: float) -> RelaxedState:
    return state.replace(
        atom_logits=state.atom_logits + dt * d.atom_logits,
        bond_logits=state.bond_logits + dt * d.bond_logits,
        type_logits=state.type_logits + dt * d.type_logits,
        parent_logits=state.parent_logits + dt * d.parent_logits,
        coords=state.coords + dt * d.coords,
        t=t_new,
    )


def heun_step(state: RelaxedState, predictor, t: float, dt: float,
              config: SamplerConfig, ectx: EnergyContext,
              cache: GuidanceCache | None = None) -> RelaxedState:
    """One Euler-predictor / trapezoid-corrector step from t to t + dt.

    The geometry-coupling indicator is evaluated once at the left endpoint and
    applied to both stages.  After the corrector: coordinates are recentered,
    padding masks re-applied, and the causal parent mask enforced.
    """
    if t + dt > 1.0 + 1e-12:
        raise ValueError("step leaves the unit time interval")
    gate = t >= config.t_geom
    d1 = drift(state, predictor.predict(state, t), t, config, ectx, cache, gate)
    mid = _apply(state, d1, dt, min(t + dt, 1.0))
    d2 = drift(mid, predictor.predict(mid, mid.t), mid.t, config, ectx, cache, gate)
    avg = Drift(
        atom_logits=0.5 * (d1.atom_logits + d2.atom_logits),
        bond_logits=0.5 * (d1.bond_logits + d2.bond_logits),
        type_logits=0.5 * (d1.type_logits + d2.type_logits),
        parent_logits=0.5 * (d1.parent_logits + d2.parent_logits),
        coords=0.5 * (d1.coords + d2.coords),
    )
    out = _apply(state, avg, dt, min(t + dt, 1.0))
    out = out.replace(coords=recenter(out.coords, out.atom_mask)).enforce_masks()
    for name in ("atom_logits", "bond_logits", "type_logits", "parent_logits", "coords"):
        if not np.all(np.isfinite(getattr(out, name))):
            raise SamplerError(f"non-finite state block {name} after step at t={t:.3f}")
    return out


@dataclass
class IntegrationResult:
    state: RelaxedState
    trajectory: list[RelaxedState] | None = None


def integrate(predictor, priors: PriorTables, config: SamplerConfig,
              ectx: EnergyContext, hier: HierarchyConfig, seed: int,
              n_atoms: int | None = None, n_motifs: int | None = None,
              on_step=None) -> IntegrationResult:
    """Run the full sampler from a prior draw to t = 1.

    Deterministic given (seed, config, predictor).  When the energy config has
    no edge-count table, the priors' mean edge counts are wired in so the
    sparsity term has a target.  Raises SamplerError on non-finite states.
    """
    cfg = ectx.config
    if cfg.m_target is None and priors.mean_edges is not None:
        ectx = replace(ectx, config=cfg.replace(m_target=dict(priors.mean_edges)))
    if n_atoms is None and hasattr(predictor, "n_atoms"):
        n_atoms = predictor.n_atoms
    if n_motifs is None and hasattr(predictor, "n_motifs"):
        n_motifs = predictor.n_motifs
    state = sample_prior(priors, seed, hier, ectx.table, ectx.omega, n_atoms, n_motifs)
    if config.validate_each_step:
        state.validate()
    trajectory = [state] if config.record_trajectory else None

    cache = GuidanceCache()
    dt = 1.0 / config.steps
    first_conn_step = None
    for k in range(config.steps):
        t = k * dt
        if config.enable_chem and ectx.config.w_conn > 0.0 and t >= config.t_conn:
            if first_conn_step is None:
                first_conn_step = k
            if (k - first_conn_step) % config.conn_every == 0:
                cache.conn_value, cache.conn_grads = connectivity_gradients(state, ectx)
        try:
            state = heun_step(state, predictor, t, dt, config, ectx, cache)
        except (FloatingPointError, SamplerError) as exc:
            raise SamplerError(f"step {k} (t={t:.3f}): {exc}") from exc
        if config.validate_each_step:
            state.validate()
        if trajectory is not None:
            trajectory.append(state)
        if on_step is not None:
            on_step(k, state)
    return IntegrationResult(state, trajectory)


# ---------------------------------------------------------------------------
# discretization and repair


def discretize(state: RelaxedState, omega: BondOrderVector | None = None
               ) -> tuple[Molecule, np.ndarray]:
    """Argmax decode of a final-time state plus per-pair confidences.

    Ties break toward the lower category index (numpy argmax).  Only unmasked
    atoms appear in the output molecule; confidences are the winning category
    probability for every remaining pair.
    """
    real = np.nonzero(state.atom_mask)[0]
    elements = np.argmax(state.atom_probs[real], axis=1)
    n = real.size
    bonds = np.zeros((n, n), dtype=int)
    n_all = state.n_atoms
    confidences = np.zeros(n * (n - 1) // 2)
    iu, ju = pair_indices(n)
    for pid_new, (a, b) in enumerate(zip(iu, ju)):
        i, j = int(real[a]), int(real[b])
        pid_old = i * (2 * n_all - i - 1) // 2 + (j - i - 1)
        probs = state.bond_probs[pid_old]
        k = int(np.argmax(probs))
        bonds[a, b] = bonds[b, a] = k
        confidences[pid_new] = probs[k]
    coords = state.coords[real]
    return Molecule(elements, bonds, coords), confidences


def valence_repair(mol: Molecule, confidences: np.ndarray, table: ElementTable,
                   omega: BondOrderVector) -> Molecule:
    """Delete lowest-confidence incident bonds until every atom fits its valence.

    Atoms are processed in increasing index order; each deletion removes the
    offending atom's lowest-confidence present bond (ties to the lower pair
    slot) and degrees are recomputed before the next check.  Terminates because
    every deletion strictly reduces the degree.
    """
    n = mol.n_atoms
    if confidences.shape != (n * (n - 1) // 2,):
        raise ValueError("need one confidence per atom pair")
    bonds = mol.bonds.copy()
    orders = omega.orders

    def degree(i):
        return float(np.sum(orders[bonds[i]]))

    for i in range(n):
        limit = float(table.max_valence[mol.elements[i]])
        while degree(i) > limit:
            incident = []
            for j in range(n):
                if j == i or bonds[i, j] == 0:
                    continue
                a, b = (i, j) if i < j else (j, i)
                pid = a * (2 * n - a - 1) // 2 + (b - a - 1)
                incident.append((float(confidences[pid]), pid, j))
            if not incident:
                break
            _, _, j = min(incident)
            bonds[i, j] = bonds[j, i] = 0
    return Molecule(mol.elements, bonds, mol.coords)


# ---------------------------------------------------------------------------
# batching


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """Independent per-sample seeds from a master seed by counter."""
    seq = np.random.SeedSequence(master_seed)
    return [int(child.generate_state(1)[0]) for child in seq.spawn(count)]
