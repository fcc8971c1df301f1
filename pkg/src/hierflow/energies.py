"""Differentiable validity energies with analytic gradients.

Every term is a function of probabilities (read from logits via softmax) and
coordinates.  Gradients are computed in probability space in closed form and
pulled back to logits through the softmax Jacobian diag(p) - p p^T, so each
logit-space gradient block sums to zero per categorical variable and every
energy is invariant to constant logit shifts.

Connectivity gradients use the closed forms through the regularized Laplacian
inverse (log-det term) and the Fiedler-vector outer product (algebraic
connectivity term) rather than generic autodiff: both are cheap and exactly
testable against central finite differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import expit

from .molstate import BondOrderVector, DimensionError, ElementTable, RelaxedState, \
    pair_indices, soft_degrees


@dataclass(frozen=True)
class EnergyConfig:
    """Weights, amplitudes, schedules, and constants for all guidance terms."""

    # composition weights inside the chemistry / geometry groups
    w_valence: float = 1.0
    w_count: float = 0.1
    w_conn: float = 0.05
    w_bondlen: float = 1.0
    w_steric: float = 0.2
    # annealed guidance base amplitudes, eta(t) = eta0 * (1 - t)^gamma
    eta_chem0: float = 1.0
    eta_cons0: float = 0.5
    eta_geom0: float = 0.2
    eta_geom_z0: float = 0.02
    gamma: float = 2.0
    # hierarchy similarity transform
    d_thresh: float = 4.0
    tau: float = 1.0
    # connectivity terms
    eps_laplacian: float = 1e-3
    lambda2_threshold: float = 1e-2
    use_lambda2: bool = False
    # geometry terms
    steric_sharpness: float = 10.0
    lambda_min: float = 0.05
    lambda_max: float = 0.2
    c_single: float = 1.00
    c_double: float = 0.93
    c_triple: float = 0.90
    c_aromatic: float = 0.965
    # ablation extras, off by default
    use_hier_conn: bool = False
    use_ring_terms: bool = False
    ring_beta: float = 0.5
    # mean edge count per atom count; fallback is N - 1 with a warning
    m_target: dict[int, float] | None = None

    def __post_init__(self):
        for name in ("w_valence", "w_count", "w_conn", "w_bondlen", "w_steric"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")

    def replace(self, **kw) -> "EnergyConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyConfig":
        d = dict(d)
        if "m_target" in d and d["m_target"] is not None:
            d["m_target"] = {int(k): float(v) for k, v in d["m_target"].items()}
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            if name == "m_target" and val is not None:
                val = {str(k): v for k, v in val.items()}
            out[name] = val
        return out


@dataclass(frozen=True)
class EnergyContext:
    """Static inputs shared by the terms: constant tables plus any
    hierarchy-derived quantities (pair similarities, motif atom sets, rings)."""

    table: ElementTable
    omega: BondOrderVector
    config: EnergyConfig = field(default_factory=EnergyConfig)
    hier_similarity: np.ndarray | None = None   # (P,) same-subtree similarity per pair
    motif_atoms: tuple[tuple[int, ...], ...] = ()
    rings: tuple[tuple[int, ...], ...] = ()


@dataclass
class EnergyGrads:
    """Probability-space gradients; None means the term does not touch a block."""

    atom_probs: np.ndarray | None = None
    bond_probs: np.ndarray | None = None
    coords: np.ndarray | None = None


@dataclass
class LogitGrads:
    """Logit-space gradients (zero blocks where a term has no dependence)."""

    atom_logits: np.ndarray
    bond_logits: np.ndarray
    coords: np.ndarray

    def __iadd__(self, other: "LogitGrads"):
        self.atom_logits += other.atom_logits
        self.bond_logits += other.bond_logits
        self.coords += other.coords
        return self

    def scaled(self, factor: float) -> "LogitGrads":
        return LogitGrads(self.atom_logits * factor, self.bond_logits * factor,
                          self.coords * factor)

    def check_finite(self, term: str) -> "LogitGrads":
        for name in ("atom_logits", "bond_logits", "coords"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"non-finite gradient in term {term!r} ({name})")
        return self


@dataclass
class EnergyReport:
    """Per-term values plus per-term logit/coordinate gradients."""

    terms: dict[str, float]
    grads: dict[str, LogitGrads]


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a probability-space gradient back through the softmax."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def to_logit_grads(state: RelaxedState, grads: EnergyGrads) -> LogitGrads:
    atom = np.zeros_like(state.atom_logits)
    bond = np.zeros_like(state.bond_logits)
    coords = np.zeros_like(state.coords)
    if grads.atom_probs is not None:
        atom = softmax_vjp(state.atom_probs, grads.atom_probs)
        atom[~state.atom_mask] = 0.0
    if grads.bond_probs is not None:
        bond = softmax_vjp(state.bond_probs, grads.bond_probs)
        bond[~state.pair_mask] = 0.0
    if grads.coords is not None:
        coords = grads.coords.copy()
        coords[~state.atom_mask] = 0.0
    return LogitGrads(atom, bond, coords)


def anneal(eta0: float, gamma: float, t: float) -> float:
    """Annealed guidance amplitude eta0 * (1 - t)^gamma; zero at t = 1."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("time must lie in [0, 1]")
    return eta0 * (1.0 - t) ** gamma


def soft_element_constant(alpha: np.ndarray, column: str, table: ElementTable) -> np.ndarray:
    """Expectation of a per-element constant under atom-type distributions."""
    alpha = np.asarray(alpha, dtype=float)
    col = table.column(column)
    if alpha.shape[-1] != table.n_elements:
        raise DimensionError("atom distribution width does not match the element table")
    return alpha @ col


def resolve_edge_target(config: EnergyConfig, n_atoms: int) -> float:
    """Target edge count for n_atoms, falling back to the tree bound N - 1."""
    if config.m_target is not None and n_atoms in config.m_target:
        return float(config.m_target[n_atoms])
    warnings.warn(f"no edge-count target for N={n_atoms}; falling back to N-1",
                  stacklevel=2)
    return float(n_atoms - 1)


# ---------------------------------------------------------------------------
# chemistry terms


def _valence_parts(state: RelaxedState, ctx: EnergyContext):
    deg = soft_degrees(state, ctx.omega)
    dbar = soft_element_constant(state.atom_probs, "d_max", ctx.table)
    excess = np.maximum(deg - dbar, 0.0) * state.atom_mask
    return deg, dbar, excess


def e_valence(state: RelaxedState, ctx: EnergyContext) -> float:
    """Squared rectified excess of each atom's soft degree over its soft max valence."""
    _, _, excess = _valence_parts(state, ctx)
    return float(np.sum(excess ** 2))


def e_valence_grads(state: RelaxedState, ctx: EnergyContext) -> tuple[float, EnergyGrads]:
    _, _, excess = _valence_parts(state, ctx)
    value = float(np.sum(excess ** 2))
    d_atom = -2.0 * excess[:, None] * ctx.table.max_valence[None, :]
    iu, ju = pair_indices(state.n_atoms)
    pair_excess = (excess[iu] + excess[ju]) * state.pair_mask
    d_bond = 2.0 * pair_excess[:, None] * ctx.omega.orders[None, :]
    return value, EnergyGrads(atom_probs=d_atom, bond_probs=d_bond)


def e_count(state: RelaxedState, m_target: float) -> float:
    """Squared deviation of the expected edge count from its target."""
    total = float(np.sum(state.edge_probs * state.pair_mask))
    return (total - m_target) ** 2


def e_count_grads(state: RelaxedState, m_target: float) -> tuple[float, EnergyGrads]:
    total = float(np.sum(state.edge_probs * state.pair_mask))
    gap = total - m_target
    d_bond = np.zeros_like(state.bond_probs)
    d_bond[:, 0] = -2.0 * gap * state.pair_mask  # p_ij = 1 - x0
    return gap ** 2, EnergyGrads(bond_probs=d_bond)


def _real_atoms(state: RelaxedState) -> np.ndarray:
    return np.nonzero(state.atom_mask)[0]


def soft_laplacian(state: RelaxedState, atoms: np.ndarray | None = None) -> np.ndarray:
    """L = D - P over the given atoms (default: all unmasked atoms)."""
    atoms = _real_atoms(state) if atoms is None else np.asarray(atoms, dtype=int)
    n = atoms.size
    p_full = np.zeros((state.n_atoms, state.n_atoms))
    iu, ju = pair_indices(state.n_atoms)
    p_full[iu, ju] = p_full[ju, iu] = state.edge_probs
    p = p_full[np.ix_(atoms, atoms)]
    return np.diag(p.sum(axis=1)) - p


def _logdet_value_and_pair_grads(lap: np.ndarray, eps: float):
    sign, logabs = np.linalg.slogdet(lap + eps * np.eye(lap.shape[0]))
    if sign <= 0 or not np.isfinite(logabs):
        raise FloatingPointError("regularized Laplacian has a non-positive determinant")
    inv = np.linalg.inv(lap + eps * np.eye(lap.shape[0]))
    # dE/dp_ab for the symmetric pair bump: -(inv_aa + inv_bb - 2 inv_ab)
    diag = np.diag(inv)
    pair_grad = -(diag[:, None] + diag[None, :] - 2.0 * inv)
    return -logabs, pair_grad


def _scatter_pair_grads_to_bonds(state: RelaxedState, atoms: np.ndarray,
                                 pair_grad: np.ndarray, d_bond: np.ndarray) -> None:
    """Accumulate dE/dp over an atom subset into the no-bond column (p = 1 - x0).

    ``atoms`` must be sorted ascending so i < j maps onto the pair storage
    order; the sign flip accounts for dp/dx0 = -1.
    """
    n = state.n_atoms
    for a in range(atoms.size):
        i = int(atoms[a])
        for b in range(a + 1, atoms.size):
            j = int(atoms[b])
            pid = i * (2 * n - i - 1) // 2 + (j - i - 1)
            d_bond[pid, 0] += -pair_grad[a, b]


def e_conn_logdet(state: RelaxedState, eps: float = 1e-3) -> float:
    """Negative log-determinant of the regularized soft Laplacian.

    Large for disconnected soft graphs, small for connected ones; unbounded
    below, so it is a directional signal rather than a non-negative penalty.
    """
    if not eps > 0:
        raise ValueError("Laplacian regularizer must be positive")
    value, _ = _logdet_value_and_pair_grads(soft_laplacian(state), eps)
    return value


def e_conn_logdet_grads(state: RelaxedState, eps: float = 1e-3) -> tuple[float, EnergyGrads]:
    atoms = _real_atoms(state)
    value, pair_grad = _logdet_value_and_pair_grads(soft_laplacian(state), eps)
    d_bond = np.zeros_like(state.bond_probs)
    _scatter_pair_grads_to_bonds(state, atoms, pair_grad, d_bond)
    return value, EnergyGrads(bond_probs=d_bond)


class EigensolverError(RuntimeError):
    """The deflated iterative eigensolver failed to converge."""


def lambda2_deflated(lap: np.ndarray, tol: float = 1e-11,
                     max_iter: int | None = None) -> tuple[float, np.ndarray, int]:
    """Second-smallest Laplacian eigenvalue via deflated Lanczos iterations.

    The all-ones direction (the trivial zero eigenvector) is deflated by
    keeping every Krylov vector orthogonal to it, with full reorthogonalization
    against the basis so the recurrence stays stable.  Returns the Ritz value,
    its Ritz vector, and the iteration count; raises EigensolverError with the
    iteration count when the residual never falls below tolerance.
    """
    n = lap.shape[0]
    if n < 2:
        raise ValueError("algebraic connectivity needs at least two atoms")
    ones = np.full(n, 1.0 / np.sqrt(n))
    max_iter = max_iter or (n - 1)
    max_iter = min(max_iter, n - 1)

    def orthogonalize(x):
        for _ in range(2):  # two Gram-Schmidt passes for float-level orthogonality
            x = x - (ones @ x) * ones
            for q in basis:
                x = x - (q @ x) * q
        return x

    def fresh_direction():
        # replacement for an exhausted Krylov space: first canonical vector
        # with significant component outside span(basis, ones)
        for idx in range(n):
            cand = orthogonalize(np.eye(n)[idx])
            if np.linalg.norm(cand) > 1e-8:
                return cand / np.linalg.norm(cand)
        return None

    basis: list[np.ndarray] = []
    start = np.cos(np.arange(n) + 1.0)
    start = start - (ones @ start) * ones
    basis.append(start / np.linalg.norm(start))
    alphas: list[float] = []
    betas: list[float] = []
    scale = max(1.0, float(np.abs(lap).max()))
    for k in range(max_iter):
        w = lap @ basis[k]
        alphas.append(float(basis[k] @ w))
        w = orthogonalize(w)  # full reorthogonalization keeps the recurrence stable
        if k == 0:
            vals, vecs = np.array([alphas[0]]), np.array([[1.0]])
        else:
            vals, vecs = eigh_tridiagonal(np.array(alphas), np.array(betas))
        order = np.argsort(vals)
        theta = float(vals[order[0]])
        s = vecs[:, order[0]]
        b = float(np.linalg.norm(w))
        converged = abs(b * s[-1]) <= tol * scale
        exhausted = len(basis) >= n - 1
        if converged or exhausted or k == max_iter - 1:
            ritz = np.column_stack(basis) @ s
            if converged or exhausted:
                return theta, ritz / np.linalg.norm(ritz), k + 1
            raise EigensolverError(f"no convergence after {k + 1} iterations "
                                   f"(residual {abs(b * s[-1]):.2e})")
        if b < 1e-13 * scale:
            # invariant subspace hit early; restart with a zero coupling so the
            # tridiagonal matrix stays block-consistent
            nxt = fresh_direction()
            if nxt is None:
                ritz = np.column_stack(basis) @ s
                return theta, ritz / np.linalg.norm(ritz), k + 1
            betas.append(0.0)
            basis.append(nxt)
        else:
            betas.append(b)
            basis.append(w / b)
    raise EigensolverError(f"no convergence after {max_iter} iterations")


def e_conn_lambda2(state: RelaxedState, threshold: float = 1e-2) -> float:
    """Squared rectified shortfall of algebraic connectivity below a threshold."""
    lam2, _, _ = lambda2_deflated(soft_laplacian(state))
    return float(np.maximum(threshold - lam2, 0.0) ** 2)


def e_conn_lambda2_grads(state: RelaxedState, threshold: float = 1e-2) -> tuple[float, EnergyGrads]:
    atoms = _real_atoms(state)
    lam2, vec, _ = lambda2_deflated(soft_laplacian(state))
    short = max(threshold - lam2, 0.0)
    value = short ** 2
    d_bond = np.zeros_like(state.bond_probs)
    if short > 0.0:
        # d(lam2)/dp_ab = (v_a - v_b)^2 through the Fiedler-vector outer product
        pair_grad = -2.0 * short * (vec[:, None] - vec[None, :]) ** 2
        _scatter_pair_grads_to_bonds(state, atoms, pair_grad, d_bond)
    return value, EnergyGrads(bond_probs=d_bond)


def e_consistency(state: RelaxedState, similarity: np.ndarray) -> float:
    """Squared gap between edge probabilities and hierarchy similarities."""
    similarity = np.asarray(similarity, dtype=float)
    if similarity.shape != (state.n_pairs,):
        raise DimensionError("need one similarity per atom pair")
    gap = (state.edge_probs - similarity) * state.pair_mask
    return float(np.sum(gap ** 2))


def e_consistency_grads(state: RelaxedState, similarity: np.ndarray) -> tuple[float, EnergyGrads]:
    similarity = np.asarray(similarity, dtype=float)
    if similarity.shape != (state.n_pairs,):
        raise DimensionError("need one similarity per atom pair")
    gap = (state.edge_probs - similarity) * state.pair_mask
    d_bond = np.zeros_like(state.bond_probs)
    d_bond[:, 0] = -2.0 * gap
    return float(np.sum(gap ** 2)), EnergyGrads(bond_probs=d_bond)


# ---------------------------------------------------------------------------
# geometry terms


def bond_length_factors(config: EnergyConfig, omega: BondOrderVector) -> np.ndarray:
    """Ideal-length shrink factor per bond category (entry 0 unused)."""
    by_order = {1.0: config.c_single, 2.0: config.c_double,
                3.0: config.c_triple, 1.5: config.c_aromatic}
    factors = np.zeros(omega.n_types)
    for k in range(1, omega.n_types):
        order = float(omega.orders[k])
        if order not in by_order:
            raise ValueError(f"no ideal-length factor for bond order {order}")
        factors[k] = by_order[order]
    return factors


def _pair_distances(state: RelaxedState):
    iu, ju = pair_indices(state.n_atoms)
    diff = state.coords[iu] - state.coords[ju]
    dist = np.linalg.norm(diff, axis=1)
    safe = np.maximum(dist, 1e-12)
    return iu, ju, diff, dist, safe


def _bondlen_parts(state: RelaxedState, ctx: EnergyContext):
    factors = bond_length_factors(ctx.config, ctx.omega)
    rcov = soft_element_constant(state.atom_probs, "r_cov", ctx.table)
    iu, ju, diff, dist, safe = _pair_distances(state)
    ideal = factors[None, 1:] * (rcov[iu] + rcov[ju])[:, None]   # (P, K-1)
    gap = dist[:, None] - ideal
    x_bonded = state.bond_probs[:, 1:] * state.pair_mask[:, None]
    return factors, rcov, iu, ju, diff, dist, safe, ideal, gap, x_bonded


def e_bondlen(state: RelaxedState, ctx: EnergyContext) -> float:
    """Bond-type-weighted squared deviation from ideal covalent lengths."""
    *_, gap, x_bonded = _bondlen_parts(state, ctx)
    return float(np.sum(x_bonded * gap ** 2))


def e_bondlen_grads(state: RelaxedState, ctx: EnergyContext) -> tuple[float, EnergyGrads]:
    factors, rcov, iu, ju, diff, dist, safe, ideal, gap, x_bonded = _bondlen_parts(state, ctx)
    value = float(np.sum(x_bonded * gap ** 2))
    d_bond = np.zeros_like(state.bond_probs)
    d_bond[:, 1:] = gap ** 2 * state.pair_mask[:, None]
    # through the soft covalent radii: dE/d rcov_i = sum_k x_k * 2 gap * (-c_k)
    d_rcov_pair = np.sum(x_bonded * 2.0 * gap * (-factors[None, 1:]), axis=1)
    d_rcov = np.zeros(state.n_atoms)
    np.add.at(d_rcov, iu, d_rcov_pair)
    np.add.at(d_rcov, ju, d_rcov_pair)
    d_atom = d_rcov[:, None] * ctx.table.r_cov[None, :]
    # through the distances
    de_dd = np.sum(x_bonded * 2.0 * gap, axis=1)
    unit = diff / safe[:, None]
    d_coords = np.zeros_like(state.coords)
    np.add.at(d_coords, iu, de_dd[:, None] * unit)
    np.add.at(d_coords, ju, -de_dd[:, None] * unit)
    return value, EnergyGrads(atom_probs=d_atom, bond_probs=d_bond, coords=d_coords)


def bonded_steric_scale(config: EnergyConfig, t: float) -> float:
    """Repulsion weight retained by bonded pairs, ramping with time."""
    return config.lambda_min + (config.lambda_max - config.lambda_min) * t


def _steric_parts(state: RelaxedState, ctx: EnergyContext, t: float):
    cfg = ctx.config
    s = cfg.steric_sharpness
    rvdw = soft_element_constant(state.atom_probs, "r_vdw", ctx.table)
    iu, ju, diff, dist, safe = _pair_distances(state)
    arg = s * (rvdw[iu] + rvdw[ju] - dist)
    sp = np.logaddexp(0.0, arg)          # softplus
    sig = expit(arg)
    lam = bonded_steric_scale(cfg, t)
    p = state.edge_probs
    w = (1.0 - (1.0 - lam) * p) * state.pair_mask
    return s, rvdw, iu, ju, diff, safe, sp, sig, lam, p, w


def e_steric(state: RelaxedState, ctx: EnergyContext, t: float | None = None) -> float:
    """Smooth squared-softplus repulsion, down-weighted on bonded pairs."""
    t = state.t if t is None else t
    *_, sp, sig, lam, p, w = _steric_parts(state, ctx, t)
    return float(np.sum(w * sp ** 2))


def e_steric_grads(state: RelaxedState, ctx: EnergyContext,
                   t: float | None = None) -> tuple[float, EnergyGrads]:
    t = state.t if t is None else t
    s, rvdw, iu, ju, diff, safe, sp, sig, lam, p, w = _steric_parts(state, ctx, t)
    u = sp ** 2
    value = float(np.sum(w * u))
    du_darg = 2.0 * sp * sig
    # bond block: w depends on p = 1 - x0 only
    d_bond = np.zeros_like(state.bond_probs)
    d_bond[:, 0] = (1.0 - lam) * u * state.pair_mask
    # atom block through soft vdW radii
    d_rvdw_pair = w * du_darg * s
    d_rvdw = np.zeros(state.n_atoms)
    np.add.at(d_rvdw, iu, d_rvdw_pair)
    np.add.at(d_rvdw, ju, d_rvdw_pair)
    d_atom = d_rvdw[:, None] * ctx.table.r_vdw[None, :]
    # coordinates: d arg / dd = -s
    de_dd = w * du_darg * (-s)
    unit = diff / safe[:, None]
    d_coords = np.zeros_like(state.coords)
    np.add.at(d_coords, iu, de_dd[:, None] * unit)
    np.add.at(d_coords, ju, -de_dd[:, None] * unit)
    return value, EnergyGrads(atom_probs=d_atom, bond_probs=d_bond, coords=d_coords)


# ---------------------------------------------------------------------------
# hierarchy-aware extras (ablation terms, off by default)


def e_hier_conn(state: RelaxedState, motif_atoms, eps: float = 1e-3) -> float:
    """Sum of negative log-determinants of motif-restricted Laplacians.

    Singleton motifs contribute the constant -log(eps) with zero gradient.
    """
    value = 0.0
    for atoms in motif_atoms:
        v, _ = _logdet_value_and_pair_grads(
            soft_laplacian(state, np.asarray(atoms, dtype=int)), eps)
        value += v
    return value


def e_hier_conn_grads(state: RelaxedState, motif_atoms,
                      eps: float = 1e-3) -> tuple[float, EnergyGrads]:
    value = 0.0
    d_bond = np.zeros_like(state.bond_probs)
    for atoms in motif_atoms:
        atoms = np.asarray(sorted(atoms), dtype=int)
        v, pair_grad = _logdet_value_and_pair_grads(soft_laplacian(state, atoms), eps)
        value += v
        _scatter_pair_grads_to_bonds(state, atoms, pair_grad, d_bond)
    return value, EnergyGrads(bond_probs=d_bond)


def _ring_edge_ids(state: RelaxedState, ring) -> list[int]:
    n = state.n_atoms
    ids = []
    for a, b in zip(ring, list(ring[1:]) + [ring[0]]):
        i, j = (a, b) if a < b else (b, a)
        ids.append(i * (2 * n - i - 1) // 2 + (j - i - 1))
    return ids


def e_ring_constraints(state: RelaxedState, rings,
                       beta: float = 0.5) -> tuple[float, float]:
    """Ring closure and ring-exclusivity penalties (values only)."""
    (closure, _), (excl, _) = (e_ring_closure_grads(state, rings),
                               e_ring_exclusivity_grads(state, rings, beta))
    return closure, excl


def e_ring_closure_grads(state: RelaxedState, rings) -> tuple[float, EnergyGrads]:
    """Each size-k ring should carry k expected edges around its cycle."""
    p = state.edge_probs
    value = 0.0
    d_bond = np.zeros_like(state.bond_probs)
    for ring in rings:
        ids = _ring_edge_ids(state, ring)
        gap = float(np.sum(p[ids])) - len(ring)
        value += gap ** 2
        for pid in ids:
            d_bond[pid, 0] += -2.0 * gap
    return value, EnergyGrads(bond_probs=d_bond)


def e_ring_exclusivity_grads(state: RelaxedState, rings,
                             beta: float = 0.5) -> tuple[float, EnergyGrads]:
    """Rectified excess of external over scaled in-ring bonding per ring atom."""
    n = state.n_atoms
    ring_neighbors: dict[int, set[int]] = {}
    for ring in rings:
        for a, b in zip(ring, list(ring[1:]) + [ring[0]]):
            ring_neighbors.setdefault(a, set()).add(b)
            ring_neighbors.setdefault(b, set()).add(a)
    p = state.edge_probs
    value = 0.0
    d_bond = np.zeros_like(state.bond_probs)
    for i, neighbors in sorted(ring_neighbors.items()):
        ext_sum, ring_sum = 0.0, 0.0
        ext_ids, ring_ids = [], []
        for j in range(n):
            if j == i or not state.atom_mask[j]:
                continue
            pid = (i, j) if i < j else (j, i)
            pid = pid[0] * (2 * n - pid[0] - 1) // 2 + (pid[1] - pid[0] - 1)
            if j in neighbors:
                ring_sum += p[pid]
                ring_ids.append(pid)
            else:
                ext_sum += p[pid]
                ext_ids.append(pid)
        pre = ext_sum - beta * ring_sum
        if pre > 0:
            value += pre
            for pid in ext_ids:
                d_bond[pid, 0] += -1.0
            for pid in ring_ids:
                d_bond[pid, 0] += beta
    return value, EnergyGrads(bond_probs=d_bond)


# ---------------------------------------------------------------------------
# registry, report, and grouped gradients for the sampler


def _term_fn(name: str, state: RelaxedState, ctx: EnergyContext, with_grads: bool):
    cfg = ctx.config
    if name == "valence":
        return e_valence_grads(state, ctx) if with_grads else e_valence(state, ctx)
    if name == "count":
        target = resolve_edge_target(cfg, int(state.atom_mask.sum()))
        return e_count_grads(state, target) if with_grads else e_count(state, target)
    if name == "conn_logdet":
        return (e_conn_logdet_grads(state, cfg.eps_laplacian) if with_grads
                else e_conn_logdet(state, cfg.eps_laplacian))
    if name == "conn_lambda2":
        return (e_conn_lambda2_grads(state, cfg.lambda2_threshold) if with_grads
                else e_conn_lambda2(state, cfg.lambda2_threshold))
    if name == "consistency":
        if ctx.hier_similarity is None:
            raise ValueError("consistency term needs hierarchy similarities")
        return (e_consistency_grads(state, ctx.hier_similarity) if with_grads
                else e_consistency(state, ctx.hier_similarity))
    if name == "bondlen":
        return e_bondlen_grads(state, ctx) if with_grads else e_bondlen(state, ctx)
    if name == "steric":
        return e_steric_grads(state, ctx) if with_grads else e_steric(state, ctx)
    if name == "hier_conn":
        return (e_hier_conn_grads(state, ctx.motif_atoms, cfg.eps_laplacian) if with_grads
                else e_hier_conn(state, ctx.motif_atoms, cfg.eps_laplacian))
    if name == "ring_closure":
        return (e_ring_closure_grads(state, ctx.rings) if with_grads
                else e_ring_closure_grads(state, ctx.rings)[0])
    if name == "ring_exclusivity":
        return (e_ring_exclusivity_grads(state, ctx.rings, cfg.ring_beta) if with_grads
                else e_ring_exclusivity_grads(state, ctx.rings, cfg.ring_beta)[0])
    raise KeyError(f"unknown energy term {name!r}")


TERM_NAMES = ("valence", "count", "conn_logdet", "conn_lambda2", "consistency",
              "bondlen", "steric", "hier_conn", "ring_closure", "ring_exclusivity")


def energy_term(name: str, state: RelaxedState, ctx: EnergyContext) -> float:
    """Value of a single term by name."""
    return _term_fn(name, state, ctx, with_grads=False)


def energy_term_grads(name: str, state: RelaxedState, ctx: EnergyContext) -> tuple[float, LogitGrads]:
    """Value plus logit/coordinate gradients of a single term by name."""
    value, grads = _term_fn(name, state, ctx, with_grads=True)
    return value, to_logit_grads(state, grads).check_finite(name)


def energy_report(state: RelaxedState, ctx: EnergyContext,
                  names: tuple[str, ...] | None = None) -> EnergyReport:
    names = names or TERM_NAMES
    terms: dict[str, float] = {}
    grads: dict[str, LogitGrads] = {}
    for name in names:
        value, g = energy_term_grads(name, state, ctx)
        terms[name] = value
        grads[name] = g
    return EnergyReport(terms, grads)


def _zero_grads(state: RelaxedState) -> LogitGrads:
    return LogitGrads(np.zeros_like(state.atom_logits),
                      np.zeros_like(state.bond_logits),
                      np.zeros_like(state.coords))


def connectivity_gradients(state: RelaxedState, ctx: EnergyContext) -> tuple[float, LogitGrads]:
    """Weighted connectivity part of the chemistry group (log-det or lambda2)."""
    name = "conn_lambda2" if ctx.config.use_lambda2 else "conn_logdet"
    value, grads = energy_term_grads(name, state, ctx)
    w = ctx.config.w_conn
    return w * value, grads.scaled(w)


def chem_gradients(state: RelaxedState, ctx: EnergyContext) -> tuple[float, LogitGrads]:
    """Valence + sparsity part of the chemistry group (connectivity is cached
    separately by the sampler because of its evaluation cadence)."""
    cfg = ctx.config
    total = 0.0
    out = _zero_grads(state)
    for name, w in (("valence", cfg.w_valence), ("count", cfg.w_count)):
        if w == 0.0:
            continue
        value, grads = energy_term_grads(name, state, ctx)
        total += w * value
        out += grads.scaled(w)
    return total, out


def consistency_gradients(state: RelaxedState, ctx: EnergyContext) -> tuple[float, LogitGrads]:
    """Hierarchy-consistency group: similarity matching plus any enabled
    hierarchy-aware extras (motif connectivity, ring constraints)."""
    cfg = ctx.config
    total = 0.0
    out = _zero_grads(state)
    if ctx.hier_similarity is not None:
        value, grads = energy_term_grads("consistency", state, ctx)
        total += value
        out += grads
    if cfg.use_hier_conn and ctx.motif_atoms:
        value, grads = energy_term_grads("hier_conn", state, ctx)
        total += value
        out += grads
    if cfg.use_ring_terms and ctx.rings:
        for name in ("ring_closure", "ring_exclusivity"):
            value, grads = energy_term_grads(name, state, ctx)
            total += value
            out += grads
    return total, out


def geom_gradients(state: RelaxedState, ctx: EnergyContext) -> tuple[float, LogitGrads]:
    """Geometry group: bond lengths plus steric repulsion."""
    cfg = ctx.config
    total = 0.0
    out = _zero_grads(state)
    for name, w in (("bondlen", cfg.w_bondlen), ("steric", cfg.w_steric)):
        if w == 0.0:
            continue
        value, grads = energy_term_grads(name, state, ctx)
        total += w * value
        out += grads.scaled(w)
    return total, out
