"""Interpolant construction, endpoint losses, and reference endpoint predictors.

No neural training loop ships here: the loss functions validate the training
formulas, and the predictor interface lets learned models (or the bundled
oracle/corrupted/interpolating references) plug into the sampler.  Reference
predictors also supply fixed hyperbolic token coordinates so the hierarchy
distance and consistency paths execute without a learned encoder.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hypgeo
from .hierarchy import HierarchyPlan, KIND_LEAF, KIND_MOTIF
from .molstate import BondOrderVector, DimensionError, ElementTable, Molecule, \
    PROB_CLIP, RelaxedState, pair_indices, probs_to_logits, recenter


@dataclass(frozen=True)
class EndpointPrediction:
    """Predicted t=1 endpoints: logits for every categorical block plus
    coordinates, and optionally ball coordinates per hierarchy token (used to
    derive hierarchy distances and similarities)."""

    atom_logits: np.ndarray
    bond_logits: np.ndarray
    type_logits: np.ndarray
    parent_logits: np.ndarray
    coords: np.ndarray
    token_points: np.ndarray | None = None
    curvature: float = hypgeo.DEFAULT_CURVATURE

    def check_matches(self, state: RelaxedState) -> "EndpointPrediction":
        pairs = [("atom_logits", state.atom_logits), ("bond_logits", state.bond_logits),
                 ("type_logits", state.type_logits), ("parent_logits", state.parent_logits),
                 ("coords", state.coords)]
        for name, ref in pairs:
            arr = getattr(self, name)
            if arr.shape != ref.shape:
                raise DimensionError(f"prediction block {name} has shape {arr.shape}, "
                                     f"state expects {ref.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite prediction block {name}")
        return self


def state_from_molecule(mol: Molecule, plan: HierarchyPlan, table: ElementTable,
                        omega: BondOrderVector, t: float = 1.0,
                        eps0: float = PROB_CLIP) -> RelaxedState:
    """Clipped one-hot relaxed state encoding a discrete molecule and plan."""
    mol.check_vocab(table, omega)
    n = mol.n_atoms
    if plan.n_atoms != n:
        raise DimensionError("plan and molecule disagree on the atom count")
    atom_probs = np.zeros((n, table.n_elements))
    atom_probs[np.arange(n), mol.elements] = 1.0
    iu, ju = pair_indices(n)
    bond_probs = np.zeros((iu.size, omega.n_types))
    bond_probs[np.arange(iu.size), mol.bonds[iu, ju]] = 1.0
    state = RelaxedState(
        atom_logits=probs_to_logits(atom_probs, eps0),
        bond_logits=probs_to_logits(bond_probs, eps0),
        type_logits=probs_to_logits(plan.type_probs, eps0),
        parent_logits=probs_to_logits(plan.parent_probs, eps0),
        coords=recenter(mol.coords),
        t=t,
        atom_mask=np.ones(n, dtype=bool),
        token_mask=plan.token_mask.copy(),
        leaf_anchor=plan.leaf_anchor.copy(),
    )
    return state.enforce_masks()


def interpolate(endpoint: RelaxedState, prior: RelaxedState, t: float) -> RelaxedState:
    """Convex combination t * endpoint + (1 - t) * prior of all blocks.

    Mixing happens in probability/coordinate space (convexity keeps every
    block on its simplex); logits are recomputed from the mixed probabilities,
    and parent rows are re-projected onto the causal support afterwards.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("interpolation time must lie in [0, 1]")
    for name in ("atom_logits", "bond_logits", "type_logits", "parent_logits", "coords"):
        if getattr(endpoint, name).shape != getattr(prior, name).shape:
            raise DimensionError(f"endpoint and prior disagree on {name} shape")

    def mix(a, b):
        return t * a + (1.0 - t) * b

    state = RelaxedState(
        atom_logits=probs_to_logits(mix(endpoint.atom_probs, prior.atom_probs)),
        bond_logits=probs_to_logits(mix(endpoint.bond_probs, prior.bond_probs)),
        type_logits=probs_to_logits(mix(endpoint.type_probs, prior.type_probs)),
        parent_logits=probs_to_logits(mix(endpoint.parent_probs, prior.parent_probs)),
        coords=mix(endpoint.coords, prior.coords),
        t=t,
        atom_mask=endpoint.atom_mask.copy(),
        token_mask=endpoint.token_mask.copy(),
        leaf_anchor=endpoint.leaf_anchor.copy(),
    )
    return state.enforce_masks()


# ---------------------------------------------------------------------------
# reference predictors


def token_states_from_plan(plan: HierarchyPlan, mode: str = "type") -> np.ndarray:
    """One-hot token feature vectors used to place tokens in the ball.

    mode 'type': one-hot of the token's type id (tokens of equal type
    coincide).  mode 'anchor': one-hot of the token's hard parent slot for
    leaves and of the token's own slot otherwise, so leaves coincide with
    their parent motif and same-motif leaves coincide with each other.
    """
    a_total = plan.n_tokens
    if mode == "type":
        width = plan.n_types
        idx = np.argmax(plan.type_probs, axis=1)
    elif mode == "anchor":
        width = a_total
        idx = np.arange(a_total)
        parents = plan.hard_parents()
        leaves = (plan.kinds == KIND_LEAF) & plan.token_mask
        idx = np.where(leaves, np.maximum(parents, 0), idx)
    else:
        raise ValueError(f"unknown token-state mode {mode!r}")
    states = np.zeros((a_total, width))
    states[np.arange(a_total), idx] = 1.0
    return states


def embed_tokens(plan: HierarchyPlan, mode: str = "type", dim: int = hypgeo.DEFAULT_DIM,
                 curvature: float = hypgeo.DEFAULT_CURVATURE, seed: int = 0,
                 scale: float = 0.5) -> np.ndarray:
    """Project token states through a fixed random linear map into the ball."""
    states = token_states_from_plan(plan, mode)
    rng = np.random.default_rng(seed)
    projection = rng.normal(0.0, scale, size=(states.shape[1], dim))
    return hypgeo.exp_map_origin(states @ projection, curvature)


def pair_similarity_from_tokens(state: RelaxedState, token_points: np.ndarray,
                                curvature: float, d_thresh: float,
                                tau: float) -> np.ndarray:
    """(P,) same-subtree similarity per atom pair from leaf-anchor distances."""
    iu, ju = pair_indices(state.n_atoms)
    u = token_points[state.leaf_anchor[iu]]
    v = token_points[state.leaf_anchor[ju]]
    return hypgeo.hierarchy_similarity(
        hypgeo.poincare_distance(u, v, curvature), d_thresh, tau)


@dataclass(frozen=True)
class OraclePredictor:
    """State-independent predictor that always returns one fixed target.

    The returned logits are the clipped one-hot encoding of the target
    molecule and plan; coordinates are the recentered target coordinates.
    Token ball coordinates come from a fixed seeded projection of one-hot
    token states, letting the consistency energy and distance features run
    without a learned encoder.
    """

    mol: Molecule
    plan: HierarchyPlan
    table: ElementTable
    omega: BondOrderVector
    token_mode: str = "type"
    ball_dim: int = hypgeo.DEFAULT_DIM
    curvature: float = hypgeo.DEFAULT_CURVATURE
    seed: int = 0
    _cache: dict = field(default_factory=dict, compare=False)

    def _prediction(self) -> EndpointPrediction:
        cached = self._cache.get("prediction")
        if cached is None:
            endpoint = state_from_molecule(self.mol, self.plan, self.table, self.omega)
            cached = EndpointPrediction(
                atom_logits=endpoint.atom_logits,
                bond_logits=endpoint.bond_logits,
                type_logits=endpoint.type_logits,
                parent_logits=endpoint.parent_logits,
                coords=endpoint.coords,
                token_points=embed_tokens(self.plan, self.token_mode, self.ball_dim,
                                          self.curvature, self.seed),
                curvature=self.curvature,
            )
            self._cache["prediction"] = cached
        return cached

    @property
    def n_atoms(self) -> int:
        return self.mol.n_atoms

    @property
    def n_motifs(self) -> int:
        return int(np.sum((self.plan.kinds == KIND_MOTIF) & self.plan.token_mask))

    def predict(self, state: RelaxedState, t: float) -> EndpointPrediction:
        return self._prediction().check_matches(state)


@dataclass(frozen=True)
class CorruptionSpec:
    """Seed-deterministic defects layered onto a base predictor.

    temperature > 1 softens every categorical block (a weak predictor emits
    soft logits whose decisions sit near the argmax boundary, which is where
    sampling-time guidance can actually change outcomes).  Inflation bumps a
    random pair subset one bond order up; dropout pushes a random subset of
    true bonds toward no-bond; coordinate noise is fixed Gaussian jitter.
    """

    temperature: float = 1.0
    inflate_rate: float = 0.0
    inflate_boost: float = 0.0
    dropout_rate: float = 0.0
    dropout_boost: float = 0.0
    coord_noise: float = 0.0


def _order_successor(omega: BondOrderVector, k: int) -> int | None:
    order = omega.orders[k]
    higher = [(omega.orders[c], c) for c in range(omega.n_types) if omega.orders[c] > order]
    return min(higher)[1] if higher else None


@dataclass(frozen=True)
class CorruptedPredictor:
    """A base predictor with injected defects; the defect pattern is drawn once
    from the seed, so predictions stay state-independent and reproducible."""

    base: OraclePredictor
    spec: CorruptionSpec
    seed: int = 0
    _cache: dict = field(default_factory=dict, compare=False)

    @property
    def n_atoms(self) -> int:
        return self.base.n_atoms

    @property
    def n_motifs(self) -> int:
        return self.base.n_motifs

    def _prediction(self) -> EndpointPrediction:
        cached = self._cache.get("prediction")
        if cached is not None:
            return cached
        rng = np.random.default_rng(self.seed)
        base = self.base._prediction()
        omega = self.base.omega
        spec = self.spec
        temp = max(spec.temperature, 1.0)
        bond = base.bond_logits / temp
        targets = np.argmax(base.bond_logits, axis=1)
        n_pairs = bond.shape[0]
        if spec.inflate_rate > 0:
            chosen = rng.random(n_pairs) < spec.inflate_rate
            for pid in np.nonzero(chosen)[0]:
                succ = _order_successor(omega, int(targets[pid]))
                if succ is not None:
                    bond[pid, succ] += spec.inflate_boost
        if spec.dropout_rate > 0:
            bonded = np.nonzero(targets >= 1)[0]
            chosen = bonded[rng.random(bonded.size) < spec.dropout_rate]
            bond[chosen, 0] += spec.dropout_boost
        coords = base.coords
        if spec.coord_noise > 0:
            coords = recenter(coords + rng.normal(0.0, spec.coord_noise, coords.shape))
        cached = EndpointPrediction(
            atom_logits=base.atom_logits / temp,
            bond_logits=bond,
            type_logits=base.type_logits / temp,
            parent_logits=base.parent_logits / temp,
            coords=coords,
            token_points=base.token_points,
            curvature=base.curvature,
        )
        self._cache["prediction"] = cached
        return cached

    def predict(self, state: RelaxedState, t: float) -> EndpointPrediction:
        return self._prediction().check_matches(state)


@dataclass(frozen=True)
class InterpolatingPredictor:
    """Returns the analytic endpoint implied by inverting the linear
    interpolant from a known prior: x1 = (x_t - (1-t) x0) / t.

    Useful for solver plumbing tests; below ``t_floor`` the inversion is
    ill-conditioned and the current state is returned as its own endpoint.
    """

    prior: RelaxedState
    t_floor: float = 1e-3

    def predict(self, state: RelaxedState, t: float) -> EndpointPrediction:
        if t < self.t_floor:
            return EndpointPrediction(
                state.atom_logits, state.bond_logits, state.type_logits,
                state.parent_logits, state.coords).check_matches(state)

        def invert(p_t, p_0):
            p1 = (p_t - (1.0 - t) * p_0) / t
            p1 = np.clip(p1, 0.0, None)
            p1 = p1 / np.maximum(p1.sum(axis=-1, keepdims=True), 1e-12)
            return probs_to_logits(p1)

        coords = (state.coords - (1.0 - t) * self.prior.coords) / t
        return EndpointPrediction(
            atom_logits=invert(state.atom_probs, self.prior.atom_probs),
            bond_logits=invert(state.bond_probs, self.prior.bond_probs),
            type_logits=invert(state.type_probs, self.prior.type_probs),
            parent_logits=invert(state.parent_probs, self.prior.parent_probs),
            coords=coords,
        ).check_matches(state)


# ---------------------------------------------------------------------------
# endpoint losses


@dataclass(frozen=True)
class LossBreakdown:
    atom: float
    bond: float
    plan: float
    coord: float
    total: float


def _masked_log_softmax(logits: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    z = logits if valid is None else np.where(valid, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(np.isfinite(z), np.exp(z), 0.0)
    return z - np.log(e.sum(axis=-1, keepdims=True))


def endpoint_losses(pred: EndpointPrediction, mol: Molecule, plan: HierarchyPlan,
                    lam_bond: float = 1.0, lam_plan: float = 1.0,
                    lam_coord: float = 1.0) -> LossBreakdown:
    """Cross-entropy on every categorical block plus coordinate MSE.

    Categorical terms are sums over unmasked slots (atoms, pairs i<j, token
    types, parent pointers of non-root tokens); the coordinate term is the
    mean squared Euclidean error per atom.  Targets must be hard labels.
    """
    if not plan.is_hard():
        raise ValueError("endpoint losses need hard target labels")
    n = mol.n_atoms
    if np.any(mol.elements >= pred.atom_logits.shape[1]):
        raise ValueError("target element outside the predicted vocabulary")
    if np.any(mol.bonds >= pred.bond_logits.shape[1]):
        raise ValueError("target bond type outside the predicted vocabulary")

    log_atom = _masked_log_softmax(pred.atom_logits)
    l_atom = -float(log_atom[np.arange(n), mol.elements].sum())

    iu, ju = pair_indices(n)
    log_bond = _masked_log_softmax(pred.bond_logits)
    l_bond = -float(log_bond[np.arange(iu.size), mol.bonds[iu, ju]].sum())

    real = np.nonzero(plan.token_mask)[0]
    type_targets = np.argmax(plan.type_probs, axis=1)
    if np.any(type_targets[real] >= pred.type_logits.shape[1]):
        raise ValueError("target token type outside the predicted vocabulary")
    log_type = _masked_log_softmax(pred.type_logits)
    l_plan = -float(log_type[real, type_targets[real]].sum())
    parents = plan.hard_parents()
    a_tot = plan.n_tokens
    causal = np.tril(np.ones((a_tot, a_tot), dtype=bool), k=-1) & \
        plan.token_mask[None, :] & plan.token_mask[:, None]
    log_parent = _masked_log_softmax(pred.parent_logits, causal)
    for a in real:
        if a == 0:
            continue
        l_plan -= float(log_parent[a, parents[a]])

    diff = pred.coords - recenter(mol.coords)
    l_coord = float(np.sum(diff ** 2) / n)

    total = l_atom + lam_bond * l_bond + lam_plan * l_plan + lam_coord * l_coord
    return LossBreakdown(l_atom, l_bond, l_plan, l_coord, total)


def loss_gradients(pred: EndpointPrediction, mol: Molecule, plan: HierarchyPlan,
                   lam_bond: float = 1.0, lam_plan: float = 1.0,
                   lam_coord: float = 1.0) -> dict[str, np.ndarray]:
    """Closed-form gradients of the total loss w.r.t. predicted logits/coords.

    Cross-entropy blocks give softmax(pred) - onehot(target) per slot (within
    the causal support for parent rows); the coordinate block gives
    2 (pred - target) / N.
    """
    n = mol.n_atoms
    g_atom = np.exp(_masked_log_softmax(pred.atom_logits))
    g_atom[np.arange(n), mol.elements] -= 1.0

    iu, ju = pair_indices(n)
    g_bond = np.exp(_masked_log_softmax(pred.bond_logits))
    g_bond[np.arange(iu.size), mol.bonds[iu, ju]] -= 1.0
    g_bond *= lam_bond

    real = np.nonzero(plan.token_mask)[0]
    type_targets = np.argmax(plan.type_probs, axis=1)
    g_type = np.exp(_masked_log_softmax(pred.type_logits))
    g_type[real, type_targets[real]] -= 1.0
    g_type[~plan.token_mask] = 0.0
    g_type *= lam_plan

    a_tot = plan.n_tokens
    causal = np.tril(np.ones((a_tot, a_tot), dtype=bool), k=-1) & \
        plan.token_mask[None, :] & plan.token_mask[:, None]
    probs_parent = np.where(causal, np.exp(_masked_log_softmax(pred.parent_logits, causal)), 0.0)
    g_parent = probs_parent.copy()
    parents = plan.hard_parents()
    for a in real:
        if a == 0:
            continue
        g_parent[a, parents[a]] -= 1.0
    g_parent[0] = 0.0
    g_parent[~plan.token_mask] = 0.0
    g_parent *= lam_plan

    g_coords = lam_coord * 2.0 * (pred.coords - recenter(mol.coords)) / n
    return {"atom_logits": g_atom, "bond_logits": g_bond, "type_logits": g_type,
            "parent_logits": g_parent, "coords": g_coords}


def loss_gradcheck(pred: EndpointPrediction, mol: Molecule, plan: HierarchyPlan,
                   h: float = 1e-6, rel_tol: float = 1e-6) -> dict[str, float]:
    """Compare analytic loss gradients against central finite differences.

    Returns the relative error per block; raises AssertionError on failure.
    """
    analytic = loss_gradients(pred, mol, plan)
    blocks = {"atom_logits": pred.atom_logits, "bond_logits": pred.bond_logits,
              "type_logits": pred.type_logits, "parent_logits": pred.parent_logits,
              "coords": pred.coords}
    a_tot = plan.n_tokens
    causal = np.tril(np.ones((a_tot, a_tot), dtype=bool), k=-1) & \
        plan.token_mask[None, :] & plan.token_mask[:, None]
    errors = {}
    for name, arr in blocks.items():
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            if name == "type_logits" and not plan.token_mask[idx[0]]:
                continue
            if name == "parent_logits" and not causal[idx]:
                continue
            bumped = {k: v for k, v in blocks.items()}
            plus = arr.copy()
            plus[idx] += h
            minus = arr.copy()
            minus[idx] -= h
            bumped[name] = plus
            f_plus = endpoint_losses(EndpointPrediction(**bumped), mol, plan).total
            bumped[name] = minus
            f_minus = endpoint_losses(EndpointPrediction(**bumped), mol, plan).total
            fd[idx] = (f_plus - f_minus) / (2 * h)
        scale = max(np.abs(analytic[name]).max(), np.abs(fd).max(), 1e-8)
        err = float(np.abs(analytic[name] - fd).max() / scale)
        errors[name] = err
        if err >= rel_tol:
            raise AssertionError(f"loss gradient check failed on {name}: rel err {err:.2e}")
    return errors


# ---------------------------------------------------------------------------
# optional file-based predictor stub (cross-process plug-in boundary)


def state_to_json_dict(state: RelaxedState) -> dict:
    return {
        "t": state.t,
        "atom_probs": state.atom_probs.tolist(),
        "bond_probs": state.bond_probs.tolist(),
        "type_probs": state.type_probs.tolist(),
        "parent_probs": state.parent_probs.tolist(),
        "coords": state.coords.tolist(),
        "atom_mask": state.atom_mask.tolist(),
        "token_mask": state.token_mask.tolist(),
        "leaf_anchor": state.leaf_anchor.tolist(),
    }


def prediction_from_json_dict(d: dict) -> EndpointPrediction:
    points = d.get("token_points")
    return EndpointPrediction(
        atom_logits=np.asarray(d["atom_logits"], float),
        bond_logits=np.asarray(d["bond_logits"], float),
        type_logits=np.asarray(d["type_logits"], float),
        parent_logits=np.asarray(d["parent_logits"], float),
        coords=np.asarray(d["coords"], float),
        token_points=None if points is None else np.asarray(points, float),
        curvature=float(d.get("curvature", hypgeo.DEFAULT_CURVATURE)),
    )


@dataclass(frozen=True)
class FileStubPredictor:
    """Cross-process predictor: state JSON in, prediction JSON out.

    For every call the state is written to a temp file and ``command`` is run
    with two extra arguments (request path, response path).
    """

    command: tuple[str, ...]

    def predict(self, state: RelaxedState, t: float) -> EndpointPrediction:
        with tempfile.TemporaryDirectory(prefix="hierflow-predictor-") as tmp:
            request = Path(tmp) / "state.json"
            response = Path(tmp) / "prediction.json"
            request.write_text(json.dumps(state_to_json_dict(state)))
            subprocess.run([*self.command, str(request), str(response)], check=True)
            pred = prediction_from_json_dict(json.loads(response.read_text()))
        return pred.check_matches(state)
