"""Command-line front end: sample / check / gradcheck / hierarchy / metrics.

One JSON config file with sections {elements, bonds, hierarchy, energies,
sampler, priors, predictor}; command-line flags override config fields.  Every
command is deterministic given (args, seed, inputs), and run manifests capture
everything needed to reproduce a sampling run.

Exit codes: 0 ok, 1 test failure, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .energies import EnergyConfig, EnergyContext
from .gradcheck import run_gradcheck_suite
from .hierarchy import HierarchyConfig, TokenVocabulary, build_hierarchy, \
    pad_plan, soft_ancestor_mask
from .metrics import BatchStats, batch_stats, canonical_hash, check_validity, \
    pp_conversion_rate
from .molstate import BondOrderVector, ElementTable, Molecule
from .sampler import PriorTables, SamplerConfig, SamplerError, derive_seeds, \
    discretize, integrate, sample_prior, valence_repair
from .training import CorruptedPredictor, CorruptionSpec, EndpointPrediction, \
    FileStubPredictor, InterpolatingPredictor, OraclePredictor, loss_gradcheck

WORKERS_ENV = "HIERFLOW_WORKERS"

EXIT_OK = 0
EXIT_TEST_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Fully resolved configuration for one run."""

    table: ElementTable
    omega: BondOrderVector
    hierarchy: HierarchyConfig
    energies: EnergyConfig
    sampler: SamplerConfig
    priors_spec: dict
    predictor_spec: dict
    raw: dict

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_DEFAULT_CONFIG = {
    "elements": None,
    "bonds": {"include_aromatic": True},
    "hierarchy": {},
    "energies": {},
    "sampler": {},
    "priors": {"kind": "uniform", "sizes": [5, 6, 7, 8, 9, 10], "max_motifs": 3},
    "predictor": {"kind": "interpolating"},
}


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = json.loads(json.dumps(_DEFAULT_CONFIG))
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        for key, value in user.items():
            if key not in raw:
                raise ConfigError(f"unknown config section {key!r}")
            if isinstance(raw[key], dict) and isinstance(value, dict) and \
                    key not in ("priors", "predictor"):
                raw[key].update(value)
            else:
                raw[key] = value
    for key, value in (overrides or {}).items():
        section, _, field_name = key.partition(".")
        raw.setdefault(section, {})
        if field_name:
            raw[section][field_name] = value
        else:
            raw[section] = value
    try:
        table = ElementTable.default() if raw["elements"] is None else \
            ElementTable.from_dict(raw["elements"])
        omega = BondOrderVector.default(raw["bonds"].get("include_aromatic", True))
        hier = HierarchyConfig(**raw["hierarchy"])
        energies = EnergyConfig.from_dict(raw["energies"])
        sampler = SamplerConfig.from_dict(raw["sampler"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(table, omega, hier, energies, sampler,
                     raw["priors"], raw["predictor"], raw)


def _load_molecule(path: str, table: ElementTable) -> Molecule:
    with open(path) as fh:
        return Molecule.from_json_dict(json.load(fh), table)


def build_predictor_and_priors(cfg: RunConfig):
    """Instantiate the predictor spec and priors with a consistent vocabulary."""
    spec = dict(cfg.predictor_spec)
    kind = spec.pop("kind", "interpolating")
    vocab = TokenVocabulary(cfg.table.n_elements)
    predictor = None
    if kind == "oracle" or kind == "corrupted":
        mol_path = spec.pop("molecule", None)
        if mol_path is None:
            raise ConfigError(f"{kind} predictor needs a 'molecule' path")
        mol = _load_molecule(mol_path, cfg.table)
        plan = pad_plan(build_hierarchy(mol, cfg.hierarchy, vocab, cfg.table),
                        cfg.hierarchy.m_max, cfg.hierarchy.n_max)
        oracle = OraclePredictor(mol, plan, cfg.table, cfg.omega,
                                 token_mode=spec.pop("token_mode", "type"),
                                 seed=int(spec.pop("embed_seed", 0)))
        if kind == "oracle":
            predictor = oracle
        else:
            corruption = CorruptionSpec(**spec.pop("spec", {}))
            predictor = CorruptedPredictor(oracle, corruption,
                                           seed=int(spec.pop("seed", 0)))
    elif kind == "file":
        command = spec.pop("command", None)
        if not command:
            raise ConfigError("file predictor needs a 'command' list")
        predictor = FileStubPredictor(tuple(command))
    elif kind != "interpolating":
        raise ConfigError(f"unknown predictor kind {kind!r}")

    pspec = dict(cfg.priors_spec)
    pkind = pspec.pop("kind", "uniform")
    if pkind == "file":
        priors = PriorTables.from_json(pspec["path"])
    elif pkind == "inline":
        priors = PriorTables.from_json_dict(pspec["tables"])
    elif pkind == "uniform":
        priors = PriorTables.uniform(pspec.get("sizes", [6, 8, 10]), cfg.table, cfg.omega,
                                     n_token_types=vocab.size,
                                     max_motifs=pspec.get("max_motifs", 3),
                                     sigma_r=cfg.sampler.sigma_r)
    else:
        raise ConfigError(f"unknown priors kind {pkind!r}")
    return predictor, priors, vocab


# ---------------------------------------------------------------------------
# sample


def _worker_count(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def _run_one_sample(raw_config: dict, seed: int) -> dict:
    """Worker body: rebuilds everything from the resolved config (picklable)."""
    cfg = _config_from_raw(raw_config)
    predictor, priors, _ = build_predictor_and_priors(cfg)
    ectx = EnergyContext(cfg.table, cfg.omega, cfg.energies)
    if predictor is None:
        # the interpolating reference inverts the interpolant from its own
        # prior draw; the same seed reproduces that draw inside integrate()
        state0 = sample_prior(priors, seed, cfg.hierarchy, cfg.table, cfg.omega)
        predictor = InterpolatingPredictor(state0)
    result = integrate(predictor, priors, cfg.sampler, ectx, cfg.hierarchy, seed)
    mol, confidences = discretize(result.state, cfg.omega)
    repaired = False
    if cfg.sampler.valence_repair:
        fixed = valence_repair(mol, confidences, cfg.table, cfg.omega)
        repaired = bool(np.any(fixed.bonds != mol.bonds))
        mol = fixed
    return {"molecule": mol.to_json_dict(cfg.table),
            "xyz": mol.to_xyz(cfg.table, comment=f"seed={seed}"),
            "repaired": repaired}


def _config_from_raw(raw: dict) -> RunConfig:
    table = ElementTable.default() if raw["elements"] is None else \
        ElementTable.from_dict(raw["elements"])
    omega = BondOrderVector.default(raw["bonds"].get("include_aromatic", True))
    return RunConfig(table, omega, HierarchyConfig(**raw["hierarchy"]),
                     EnergyConfig.from_dict(raw["energies"]),
                     SamplerConfig.from_dict(raw["sampler"]),
                     raw["priors"], raw["predictor"], raw)


def cmd_sample(args) -> int:
    try:
        cfg = load_config(args.config, _sample_overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO

    seeds = derive_seeds(args.seed, args.count + args.warmup)
    warmup_seeds, run_seeds = seeds[:args.warmup], seeds[args.warmup:]
    workers = _worker_count(args)

    if args.timing:
        for seed in warmup_seeds:  # warm-up excluded from timing
            try:
                _run_one_sample(cfg.raw, seed)
            except Exception:
                pass
    start = time.perf_counter()
    outputs: list[dict | Exception] = [None] * len(run_seeds)
    if workers == 1:
        for idx, seed in enumerate(run_seeds):
            try:
                outputs[idx] = _run_one_sample(cfg.raw, seed)
            except (SamplerError, FloatingPointError, ValueError) as exc:
                outputs[idx] = exc
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_one_sample, cfg.raw, seed): idx
                       for idx, seed in enumerate(run_seeds)}
            for fut, idx in futures.items():
                try:
                    outputs[idx] = fut.result()
                except (SamplerError, FloatingPointError, ValueError) as exc:
                    outputs[idx] = exc
    elapsed_ms = (time.perf_counter() - start) * 1000.0

    samples = []
    n_failed = 0
    for idx, (seed, out) in enumerate(zip(run_seeds, outputs)):
        entry = {"index": idx, "seed": seed}
        if isinstance(out, Exception):
            n_failed += 1
            entry["status"] = f"fail: {out}"
        else:
            mol_name = f"sample_{idx:04d}.json"
            xyz_name = f"sample_{idx:04d}.xyz"
            try:
                (out_dir / mol_name).write_text(
                    json.dumps(out["molecule"], sort_keys=True, indent=1) + "\n")
                (out_dir / xyz_name).write_text(out["xyz"])
            except OSError as exc:
                print(f"cannot write sample files: {exc}", file=sys.stderr)
                return EXIT_IO
            entry.update({"status": "ok", "molecule": mol_name, "xyz": xyz_name,
                          "repaired": out["repaired"]})
        samples.append(entry)

    manifest = {
        "tool": "hierflow",
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "master_seed": args.seed,
        "count": args.count,
        "fail_nan": n_failed,
        "samples": samples,
    }
    if args.timing:
        manifest["timing"] = {"ms_per_molecule": elapsed_ms / max(args.count, 1),
                              "warmup_excluded": args.warmup}
    try:
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        print(f"cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.count - n_failed} samples ({n_failed} failed) to {out_dir}")
    return EXIT_OK


def _sample_overrides(args) -> dict:
    overrides = {}
    if args.steps is not None:
        overrides["sampler.steps"] = args.steps
    if args.repair:
        overrides["sampler.valence_repair"] = True
    if args.no_guidance:
        overrides["sampler.enable_chem"] = False
        overrides["sampler.enable_cons"] = False
        overrides["sampler.enable_geom"] = False
    return overrides


# ---------------------------------------------------------------------------
# check / metrics


def _molecule_files(directory: Path) -> list[Path]:
    skip = {"manifest.json", "report.json"}
    return sorted(p for p in directory.glob("*.json") if p.name not in skip)


def cmd_check(args) -> int:
    table = ElementTable.default()
    if args.table:
        try:
            table = ElementTable.from_json(args.table)
        except (OSError, KeyError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    omega = BondOrderVector.default(not args.no_aromatic)
    directory = Path(args.input)
    files = _molecule_files(directory) if directory.is_dir() else []
    if not files:
        print(f"no molecule files in {directory}", file=sys.stderr)
        return EXIT_IO
    registry = None
    if args.registry:
        try:
            registry = {line.strip() for line in Path(args.registry).read_text().splitlines()
                        if line.strip()}
        except OSError as exc:
            print(f"cannot read registry: {exc}", file=sys.stderr)
            return EXIT_IO
    n_failed = 0
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        n_failed = int(json.loads(manifest_path.read_text()).get("fail_nan", 0))

    reports, hashes, rows = [], [], []
    for path in files:
        try:
            mol = _load_molecule(str(path), table)
        except (OSError, KeyError, ValueError) as exc:
            print(f"cannot read molecule {path.name}: {exc}", file=sys.stderr)
            return EXIT_IO
        report = check_validity(mol, table, omega)
        digest = canonical_hash(mol, table)
        reports.append(report)
        hashes.append(digest)
        rows.append({"file": path.name, "valid": report.valid, "cause": report.cause,
                     "hash": digest, "valence_ok": report.valence_ok,
                     "connected": report.connected,
                     "rings_plausible": report.rings_plausible,
                     "geometry_ok": report.geometry_ok})
    stats = batch_stats(reports, hashes, n_failed=n_failed, registry=registry)
    payload = {"stats": _stats_dict(stats), "molecules": rows}
    if args.report:
        try:
            Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        except OSError as exc:
            print(f"cannot write report: {exc}", file=sys.stderr)
            return EXIT_IO
    _print_stats(stats)
    return EXIT_OK


def _stats_dict(stats: BatchStats) -> dict:
    out = {"n_samples": stats.n_samples, "n_failed": stats.n_failed,
           "valid": stats.valid, "valid_unique": stats.valid_unique,
           "cause_histogram": stats.cause_histogram}
    if stats.novel is not None:
        out["novel"] = stats.novel
    return out


def _print_stats(stats: BatchStats) -> None:
    print(f"samples: {stats.n_samples}  (fail/NaN: {stats.n_failed})")
    print(f"valid: {100 * stats.valid:.1f}%   valid&unique: {100 * stats.valid_unique:.1f}%")
    if stats.novel is not None:
        print(f"novel: {100 * stats.novel:.1f}%")
    print("invalidity causes (% of invalid):")
    for cause, pct in stats.cause_histogram.items():
        print(f"  {cause:18s} {pct:6.1f}%")


def cmd_metrics(args) -> int:
    try:
        payload = json.loads(Path(args.report).read_text())
    except OSError as exc:
        print(f"cannot read report: {exc}", file=sys.stderr)
        return EXIT_IO
    stats = payload["stats"]
    print(f"report: {args.report}")
    print(f"valid: {100 * stats['valid']:.2f}%  valid&unique: {100 * stats['valid_unique']:.2f}%")
    if args.pp_report:
        try:
            pp = json.loads(Path(args.pp_report).read_text())["stats"]
        except OSError as exc:
            print(f"cannot read pp report: {exc}", file=sys.stderr)
            return EXIT_IO
        rate = pp_conversion_rate(100 * stats["valid"], 100 * pp["valid"])
        print(f"post-processing valid: {100 * pp['valid']:.2f}%")
        print(f"conversion of invalid samples: {100 * rate:.1f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / hierarchy


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(n_states=args.states, seed=args.seed)
    print(f"{'term':<18} {'states':>6} {'max rel err':>12}  verdict")
    failed = False
    for check in results:
        verdict = "PASS" if check.passed else "FAIL"
        failed = failed or not check.passed
        print(f"{check.term:<18} {check.n_states:>6} {check.max_rel_err:>12.3e}  {verdict}")
    # endpoint-loss gradients ride along: same oracle, different formulas
    from .synth import random_molecule
    rng = np.random.default_rng(args.seed)
    table = ElementTable.default()
    omega = BondOrderVector.default()
    mol = random_molecule(rng, n_atoms=6, table=table, omega=omega)
    vocab = TokenVocabulary(table.n_elements)
    plan = build_hierarchy(mol, HierarchyConfig(m_max=4, n_max=8), vocab, table)
    pred = EndpointPrediction(
        atom_logits=rng.normal(0, 1, (mol.n_atoms, table.n_elements)),
        bond_logits=rng.normal(0, 1, (mol.n_atoms * (mol.n_atoms - 1) // 2, omega.n_types)),
        type_logits=rng.normal(0, 1, (plan.n_tokens, vocab.size)),
        parent_logits=rng.normal(0, 1, (plan.n_tokens, plan.n_tokens)),
        coords=rng.normal(0, 1, (mol.n_atoms, 3)))
    try:
        loss_gradcheck(pred, mol, plan)
        print(f"{'endpoint_losses':<18} {1:>6} {'':>12}  PASS")
    except AssertionError as exc:
        print(f"{'endpoint_losses':<18} {1:>6} {'':>12}  FAIL ({exc})")
        failed = True
    return EXIT_TEST_FAILURE if failed else EXIT_OK


def cmd_hierarchy(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        mol = _load_molecule(args.input, cfg.table)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot read molecule: {exc}", file=sys.stderr)
        return EXIT_IO
    vocab = TokenVocabulary(cfg.table.n_elements)
    plan = build_hierarchy(mol, cfg.hierarchy, vocab, cfg.table)
    parents = plan.hard_parents()
    depths = plan.depths()
    kind_label = {0: "ROOT", 1: "motif", 2: "leaf"}
    print(f"{plan.n_tokens} tokens ({mol.n_atoms} atoms)")
    for a in range(plan.n_tokens):
        indent = "  " * depths[a]
        label = kind_label[int(plan.kinds[a])]
        type_id = int(np.argmax(plan.type_probs[a]))
        suffix = "" if a == 0 else f" <- token {parents[a]}"
        print(f"{indent}[{a}] {label} type={type_id}{suffix}")
    pi = soft_ancestor_mask(plan)
    print("ancestor probabilities (atoms x tokens):")
    for i in range(mol.n_atoms):
        row = " ".join(f"{v:.2f}" for v in pi[i])
        print(f"  atom {i:>3}: {row}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hierflow",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_sample = sub.add_parser("sample", help="integrate the sampler and write molecules")
    p_sample.add_argument("--config", default=None)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--count", type=int, default=10)
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--steps", type=int, default=None)
    p_sample.add_argument("--workers", type=int, default=None)
    p_sample.add_argument("--timing", action="store_true")
    p_sample.add_argument("--warmup", type=int, default=2,
                          help="warm-up samples excluded from --timing")
    p_sample.add_argument("--repair", action="store_true",
                          help="apply valence repair after discretization")
    p_sample.add_argument("--no-guidance", action="store_true")
    p_sample.set_defaults(fn=cmd_sample)

    p_check = sub.add_parser("check", help="audit a directory of molecule JSON files")
    p_check.add_argument("--in", dest="input", required=True)
    p_check.add_argument("--table", default=None)
    p_check.add_argument("--report", default=None)
    p_check.add_argument("--registry", default=None)
    p_check.add_argument("--no-aromatic", action="store_true")
    p_check.set_defaults(fn=cmd_check)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--states", type=int, default=10)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_hier = sub.add_parser("hierarchy", help="print a molecule's token tree")
    p_hier.add_argument("--in", dest="input", required=True)
    p_hier.add_argument("--config", default=None)
    p_hier.set_defaults(fn=cmd_hierarchy)

    p_metrics = sub.add_parser("metrics", help="summarize check reports")
    p_metrics.add_argument("--report", required=True)
    p_metrics.add_argument("--pp-report", default=None)
    p_metrics.set_defaults(fn=cmd_metrics)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
