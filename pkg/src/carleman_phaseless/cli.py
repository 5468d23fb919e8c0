"""Batch front end: configuration, stage orchestration and reports.

Stages and the bundles they exchange (all inside ``--out``)::

    simulate        -> data.zip       noisy modulus f, exact slab field u*, c_true
    retrieve-phase  -> phase.zip      retrieved slab field, per-k convergence log
    reduce          -> reduced.zip    boundary coefficients g_m, h_m
    invert          -> inversion.zip  minimiser phi, descent log (+ descent.jsonl, checkpoints/)
    evaluate        -> result.zip     c_comp (+ metrics.json, c_comp.vtk, c_comp_slice.csv)

``run`` executes all of them in order.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as cio
from .basis import build_basis, compute_tensors, tensor_report
from .carleman import CarlemanParams, bregman_probe, build_problem, eval_functional, solve
from .forward import SCENARIOS, add_noise, distance_to_support, inclusion_from_dict, make_medium, measure
from .grid import build_grid, slab_index
from .phase import PhaseRetrievalConfig, extract_cauchy, retrieve_all
from .recon import assemble_v, metrics, recover_c
from .reduction import cauchy_coefficients, make_stack

log = logging.getLogger("carleman_phaseless")

STAGES = ("simulate", "retrieve-phase", "reduce", "invert", "evaluate")
BUNDLES = {"simulate": "data.zip", "retrieve-phase": "phase.zip", "reduce": "reduced.zip",
           "invert": "inversion.zip", "evaluate": "result.zip"}


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass
class ScenarioConfig:
    # geometry
    R: float = 1.0
    d: float = 4.0  # source at (0, 0, -d)
    L: float = 0.28
    N_x: int = 21
    # spectrum and truncation
    k_lo: float = float(np.pi)
    k_hi: float = float(2 * np.pi)
    N_k: int = 121
    N: int = 7
    quadrature: str = "gregory"
    # convexification
    lam: float = 1.1
    r: float | None = None
    eps: float = 10 ** -5.75
    eta: float = 1.0
    maxiter: int = 2000
    gtol: float = 1e-8
    metric: str = "gauss-newton"
    continuation: list = field(default_factory=lambda: [0.5])  # lam values solved before lam
    M: float | None = None
    checkpoint_every: int = 100
    probe_pairs: int = 5
    # phase retrieval
    phase_maxiter: int = 500
    phase_gtol: float = 1e-8
    # data
    delta: float = 0.10
    seed: int = 7
    scenario: str = "test1"
    inclusions: list = field(default_factory=list)
    refine: int = 2
    subsamples: int = 4
    forward_tol: float = 1e-8
    slice_z: float = -0.65

    def __post_init__(self):
        if not self.d > self.R:
            raise ValueError(f"source distance d={self.d} must exceed R={self.R}")
        if not self.k_hi > self.k_lo > 0:
            raise ValueError("need 0 < k_lo < k_hi")
        for name in ("N_x", "N_k", "N", "maxiter", "phase_maxiter", "refine", "subsamples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delta < 0:
            raise ValueError("noise level must be nonnegative")
        if not self.inclusions and self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)}")

    @property
    def x0(self) -> tuple[float, float, float]:
        return (0.0, 0.0, -self.d)

    @property
    def ks(self) -> np.ndarray:
        return np.linspace(self.k_lo, self.k_hi, self.N_k)

    def medium_inclusions(self) -> tuple:
        if self.inclusions:
            return tuple(inclusion_from_dict(d) for d in self.inclusions)
        return SCENARIOS[self.scenario]

    def carleman(self) -> CarlemanParams:
        return CarlemanParams(lam=self.lam, r=self.r, eps=self.eps, eta=self.eta, maxiter=self.maxiter,
                              gtol=self.gtol, metric=self.metric, M=self.M,
                              continuation=tuple(self.continuation))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return cio.config_hash(self.to_dict())


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}


def _coerce(name: str, value):
    kind = FIELD_TYPES[name]
    if value is None or name == "inclusions":
        return value
    if name == "continuation":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return [float(v) for v in value]
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return None if value in ("none", "None") else float(value)
    return str(value)


def load_config(path=None, overrides: dict | None = None) -> ScenarioConfig:
    """Config from a flat TOML file, then ``overrides`` (later wins)."""
    vals = {}
    if path is not None:
        import tomli

        with open(path, "rb") as fh:
            vals.update(tomli.load(fh))
    vals.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(vals) - set(FIELD_TYPES)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ScenarioConfig(**{k: _coerce(k, v) for k, v in vals.items()})


# ---------------------------------------------------------------------------
# stages


def _manifest(cfg: ScenarioConfig, stage: str, **extra) -> dict:
    m = {"stage": stage, "config_hash": cfg.hash(), "config": cfg.to_dict()}
    m.update(extra)
    return m


def _upstream(cfg: ScenarioConfig, out: Path, stage: str, force: bool, consumer: str):
    """Reads the bundle written by ``stage``; errors are tagged with the ``consumer`` stage."""
    path = out / BUNDLES[stage]
    try:
        manifest, fields, docs = cio.read_bundle(path)
    except FileNotFoundError as e:
        raise StageError(consumer, str(e)) from None
    if manifest.get("config_hash") != cfg.hash() and not force:
        raise StageError(consumer, f"{path.name} was produced with config {manifest.get('config_hash')}, "
                                f"current config is {cfg.hash()}; rerun it or pass --force")
    return manifest, fields, docs


def stage_simulate(cfg: ScenarioConfig, out: Path, jobs: int = 1) -> Path:
    g = build_grid(cfg.R, cfg.N_x)
    s = slab_index(g, cfg.L)
    fine = make_medium(g.refine(cfg.refine), cfg.medium_inclusions(), cfg.subsamples)
    coarse = make_medium(g, cfg.medium_inclusions(), cfg.subsamples)
    f, u_slab = measure(fine, cfg.x0, cfg.ks, s, tol=cfg.forward_tol, jobs=jobs)
    noisy = add_noise(f, cfg.delta, cfg.seed)
    path = out / BUNDLES["simulate"]
    cio.write_bundle(path, _manifest(cfg, "simulate", layers=s.layers, ks=cfg.ks.tolist(),
                                     inclusions=[i.to_dict() for i in fine.inclusions]),
                     {"f": (noisy.values, g.R, g.n), "u_star": (u_slab, g.R, g.n), "c_true": (coarse.c, g.R, g.n)})
    return path


def stage_retrieve_phase(cfg: ScenarioConfig, out: Path, jobs: int = 1, skip_phase: bool = False,
                         force: bool = False) -> Path:
    _, fields, _ = _upstream(cfg, out, "simulate", force, "retrieve-phase")
    g = build_grid(cfg.R, cfg.N_x)
    if skip_phase:
        u = fields["u_star"]
        logs = [{"k": float(k), "skipped": True} for k in cfg.ks]
    else:
        pc = PhaseRetrievalConfig(maxiter=cfg.phase_maxiter, gtol=cfg.phase_gtol)
        u, entries = retrieve_all(fields["f"], cfg.ks, g, cfg.x0, pc, jobs)
        logs = [e.to_dict() for e in entries]
    path = out / BUNDLES["retrieve-phase"]
    cio.write_bundle(path, _manifest(cfg, "retrieve-phase", skip_phase=skip_phase),
                     {"u_phase": (u, g.R, g.n)}, {"convergence": logs})
    (out / "phase_log.json").write_text(cio.canonical_json(logs))
    return path


def stage_reduce(cfg: ScenarioConfig, out: Path, force: bool = False) -> Path:
    _, fields, _ = _upstream(cfg, out, "retrieve-phase", force, "reduce")
    g = build_grid(cfg.R, cfg.N_x)
    b = build_basis(cfg.k_lo, cfg.k_hi, cfg.N)
    t = compute_tensors(b)
    cd = extract_cauchy(fields["u_phase"], g.h)
    g_m, h_m = cauchy_coefficients(cd, b, cfg.ks, g, cfg.x0, cfg.quadrature)
    path = out / BUNDLES["reduce"]
    report = tensor_report(t)
    cio.write_bundle(path, _manifest(cfg, "reduce", N=cfg.N, ks=cfg.ks.tolist(), anchoring="principal value at k_lo",
                                     quadrature=cfg.quadrature),
                     {"g_m": (g_m, g.R, g.n, 2), "h_m": (h_m, g.R, g.n, 2)}, {"tensors": report})
    (out / "tensors.json").write_text(cio.canonical_json(report))
    return path


def stage_invert(cfg: ScenarioConfig, out: Path, force: bool = False) -> Path:
    _, fields, _ = _upstream(cfg, out, "reduce", force, "invert")
    g = build_grid(cfg.R, cfg.N_x)
    b = build_basis(cfg.k_lo, cfg.k_hi, cfg.N)
    t = compute_tensors(b)
    stack = make_stack(fields["g_m"], fields["h_m"])
    prob = build_problem(g, t, stack, cfg.carleman(), cfg.x0)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    jl = open(out / "descent.jsonl", "w")

    def callback(entry, phi):
        jl.write(json.dumps(entry, sort_keys=True) + "\n")
        jl.flush()
        it = entry["iteration"]
        if cfg.checkpoint_every > 0 and it > 0 and it % cfg.checkpoint_every == 0:
            cio.write_field(ckdir / f"phi_{it:06d}.cpf", phi, g.R, g.n)

    try:
        phi, dlog, phi0 = solve(prob, callback=callback)
    finally:
        jl.close()
    rng = np.random.default_rng(cfg.seed)
    scale = max(float(np.abs(phi).max()), 1e-3)
    margins = bregman_probe(prob, cfg.probe_pairs, scale, rng) if cfg.probe_pairs > 0 else np.zeros(0)
    fails = int(np.count_nonzero(margins < 0))
    if fails:
        log.warning("Bregman probe: %d of %d pairs violate the convexity margin", fails, len(margins))
    summary = {
        "iterations": len(dlog.entries) - 1,
        "converged": dlog.converged,
        "message": dlog.message,
        "J_init": float(eval_functional(phi0, prob)),
        "J_final": float(dlog.entries[-1]["J"]),
        "bregman_pairs": int(len(margins)),
        "bregman_failures": fails,
        "bregman_min_margin": float(margins.min()) if len(margins) else None,
    }
    path = out / BUNDLES["invert"]
    cio.write_bundle(path, _manifest(cfg, "invert"), {"phi": (phi, g.R, g.n), "phi_init": (phi0, g.R, g.n)},
                     {"descent": dlog.entries, "summary": summary})
    return path


def stage_evaluate(cfg: ScenarioConfig, out: Path, force: bool = False) -> dict:
    _, inv, docs = _upstream(cfg, out, "invert", force, "evaluate")
    _, data, _ = _upstream(cfg, out, "simulate", force, "evaluate")
    g = build_grid(cfg.R, cfg.N_x)
    b = build_basis(cfg.k_lo, cfg.k_hi, cfg.N)
    phi = inv["phi"]
    if phi.ndim == 3:
        phi = phi[None]
    c = recover_c(assemble_v(phi, b, cfg.ks), g, cfg.x0, cfg.ks, cfg.quadrature)
    incs = cfg.medium_inclusions()
    peak = max([1.0] + [i.value for i in incs])
    dist = distance_to_support(incs, *g.mesh())
    res = metrics(c, g, peak, dist)
    c_true = data["c_true"]
    report = {
        "scenario": cfg.scenario if not cfg.inclusions else "custom",
        "config_hash": cfg.hash(),
        "true_peak": peak,
        **res.to_dict(),
        "l2_relative_error": float(np.linalg.norm(c - c_true) / np.linalg.norm(c_true)),
        "descent": docs["summary"],
    }
    cio.write_bundle(out / BUNDLES["evaluate"], _manifest(cfg, "evaluate"), {"c_comp": (c, g.R, g.n)},
                     {"metrics": report})
    (out / "metrics.json").write_text(cio.canonical_json(report))
    cio.write_vtk(out / "c_comp.vtk", c, g, "c_comp")
    cio.write_csv_slice(out / "c_comp_slice.csv", c, g, cfg.slice_z)
    return report


def run_pipeline(cfg: ScenarioConfig, out: Path, jobs: int = 1, skip_phase: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cio.canonical_json(cfg.to_dict()))
    timings = {}
    steps = [
        ("simulate", lambda: stage_simulate(cfg, out, jobs)),
        ("retrieve-phase", lambda: stage_retrieve_phase(cfg, out, jobs, skip_phase)),
        ("reduce", lambda: stage_reduce(cfg, out)),
        ("invert", lambda: stage_invert(cfg, out)),
        ("evaluate", lambda: stage_evaluate(cfg, out)),
    ]
    result = None
    for name, fn in steps:
        t0 = time.perf_counter()
        try:
            result = fn()
        except StageError:
            raise
        except Exception as e:  # tag and keep the partial artifacts
            raise StageError(name, f"{type(e).__name__}: {e}") from e
        timings[name] = time.perf_counter() - t0
        log.info("stage %s done in %.1f s", name, timings[name])
    (out / "timings.json").write_text(cio.canonical_json(timings))
    return result


# ---------------------------------------------------------------------------
# command line


def _parse_set(items) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise ValueError(f"--set expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carleman-phaseless",
                                description="Coefficient reconstruction from phaseless backscatter data.")
    sub = p.add_subparsers(dest="stage", required=True)
    for name in ("run",) + STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML file with ScenarioConfig keys")
        s.add_argument("--scenario", help="test1, test2, test3 or vacuum")
        s.add_argument("--noise", type=float, help="relative noise level delta")
        s.add_argument("--seed", type=int)
        s.add_argument("--jobs", type=int, default=1, help="worker processes over wavenumbers")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        s.add_argument("--force", action="store_true", help="accept upstream bundles with another config hash")
        if name in ("run", "retrieve-phase"):
            s.add_argument("--skip-phase", action="store_true", help="use the exact slab field instead of retrieval")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CP_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        over = _parse_set(args.set)
        over.update({"scenario": args.scenario, "delta": args.noise, "seed": args.seed})
        cfg = load_config(args.config, over)
    except (ValueError, OSError) as e:
        print(f"carleman-phaseless: configuration error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.stage == "run":
            report = run_pipeline(cfg, out, args.jobs, args.skip_phase)
            print(json.dumps({k: report[k] for k in ("max_value", "max_location", "peak_error")}))
        elif args.stage == "simulate":
            stage_simulate(cfg, out, args.jobs)
        elif args.stage == "retrieve-phase":
            stage_retrieve_phase(cfg, out, args.jobs, args.skip_phase, args.force)
        elif args.stage == "reduce":
            stage_reduce(cfg, out, args.force)
        elif args.stage == "invert":
            stage_invert(cfg, out, args.force)
        elif args.stage == "evaluate":
            report = stage_evaluate(cfg, out, args.force)
            print(json.dumps({k: report[k] for k in ("max_value", "max_location", "peak_error")}))
    except StageError as e:
        print(f"carleman-phaseless: stage failed {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
