"""hierflow: hierarchy-conditioned logit-space flow sampling for molecules.

A numpy/scipy library implementing relaxed categorical molecular states, a
deterministic multi-scale hierarchy over motifs and atoms, hyperbolic hierarchy
distance signals, differentiable validity energies with analytic gradients,
and a coupled logit/coordinate ODE sampler with annealed energy guidance.
Endpoint predictors are pluggable, so every mechanism runs and is testable
without trained networks.
"""

__version__ = "0.1.0"

from .molstate import (
    BondOrderVector,
    ElementTable,
    Molecule,
    RelaxedState,
    expected_bond_order,
    logits_to_probs,
    probs_to_logits,
    recenter,
    soft_degree,
    soft_degrees,
)
from .hierarchy import (
    HierarchyConfig,
    HierarchyPlan,
    MotifDecomposition,
    TokenVocabulary,
    build_hierarchy,
    build_motif_decomposition,
    build_motif_tree,
    causal_renormalize,
    fragment_acyclic,
    fuse_rings,
    pad_plan,
    perceive_rings,
    soft_ancestor_mask,
    unpad_plan,
)
from .hypgeo import (
    BallPoint,
    exp_map_origin,
    hierarchy_similarity,
    origin_distance,
    poincare_distance,
    poincare_distance_grads,
)
from .conditioning import AttentionInputs, edge_descriptor, masked_attention, rbf_encode
from .energies import (
    EnergyConfig,
    EnergyContext,
    EnergyReport,
    anneal,
    energy_report,
    energy_term,
    energy_term_grads,
    soft_element_constant,
)
from .sampler import (
    PriorTables,
    SamplerConfig,
    discretize,
    drift,
    heun_step,
    integrate,
    sample_prior,
    valence_repair,
)
from .training import (
    CorruptedPredictor,
    CorruptionSpec,
    EndpointPrediction,
    FileStubPredictor,
    InterpolatingPredictor,
    OraclePredictor,
    endpoint_losses,
    interpolate,
    state_from_molecule,
)
from .metrics import (
    BatchStats,
    ValidityConfig,
    ValidityReport,
    batch_stats,
    canonical_hash,
    check_validity,
    pp_conversion_rate,
)
