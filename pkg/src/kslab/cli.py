"""Scenario runner: config-driven simulations with reproducible artifacts.

Subcommands share one config format: a JSON object with a ``kind``
discriminator and per-kind sections.  Initial data is declared as named
analytic families so a scenario is fully reproducible from its config file.
Every run writes a manifest enumerating the produced files with checksums;
diagnostics streams are byte-identical across runs of the same config.

Exit codes: 0 success, 2 unusable config, 3 numerical failure (with a
failure report left in the output directory).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ._threads import thread_count
from .core import (
    FRAME_PHYSICAL,
    FRAME_RENORMALIZED,
    ConcentrationThresholds,
    DensityField,
    Grid2D,
    HybridState,
    PointConfiguration,
    read_snapshot,
    write_points,
    write_snapshot,
)
from .diagnostics import compute_record, ndjson_line, standard_observer
from .errors import NumericalFailureError, SearchFailureError
from .hybrid import evolve_hybrid
from .pde import SolverParams, evolve
from .pointdyn import (
    FlowParams,
    find_critical_point,
    flow_energy,
    integrate_flow,
    renormalized_energy,
    write_trajectory_csv,
)
from .profiles import bubble_profile, gaussian_profile, ring_profile, sum_profiles
from .rescale import blow_down, parabolic_rescale, to_self_similar

_KINDS = ("simulate", "pointdyn", "critical", "hybrid", "rescale", "diagnose")


class ConfigError(ValueError):
    """Config file is syntactically or semantically unusable."""


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"missing required field '{key}' in {where}")
    return cfg[key]


def _parse_grid(cfg: dict) -> Grid2D:
    g = _require(cfg, "grid", "config")
    try:
        return Grid2D(float(_require(g, "L", "grid")), int(_require(g, "n", "grid")))
    except ValueError as exc:
        raise ConfigError(f"bad grid: {exc}") from exc


def _parse_initial(spec: dict, grid: Grid2D) -> DensityField:
    family = _require(spec, "family", "initial data")
    center = tuple(spec.get("center", (0.0, 0.0)))
    if family == "gaussian":
        return gaussian_profile(grid, float(_require(spec, "mass", "gaussian")),
                                float(spec.get("width", 1.0)), center)
    if family == "bubble":
        return bubble_profile(grid, float(spec.get("lambda", 1.0)), center)
    if family == "ring":
        return ring_profile(grid, float(_require(spec, "mass", "ring")),
                            float(_require(spec, "radius", "ring")),
                            float(spec.get("width", 0.2)), center)
    if family == "sum":
        terms = _require(spec, "terms", "sum family")
        return sum_profiles(*[_parse_initial(t, grid) for t in terms])
    raise ConfigError(f"unknown initial-data family {family!r}")


def _parse_solver(cfg: dict) -> SolverParams:
    s = cfg.get("solver", {})
    try:
        return SolverParams(
            dt_max=float(s.get("dt_max", 1e-2)),
            cfl=float(s.get("cfl", 0.4)),
            diffusion_theta=s.get("diffusion_theta", "explicit"),
            end_time=float(s.get("end_time", 1.0)),
            snapshot_every=int(s.get("snapshot_every", 50)),
            boundary_mass_tol=float(s.get("boundary_mass_tol", 1e-6)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad solver section: {exc}") from exc


def _parse_thresholds(cfg: dict, grid: Grid2D | None) -> ConcentrationThresholds:
    t = cfg.get("thresholds", {})
    try:
        if "detect_radius" in t:
            radius = float(t["detect_radius"])
        elif grid is not None:
            radius = float(t.get("detect_radius_cells", 8)) * grid.h
        else:
            radius = 0.1
        return ConcentrationThresholds(
            eps_star=float(t.get("eps_star", 2.0 * math.pi)),
            theta_star=float(t.get("theta_star", 0.25)),
            detect_radius=radius,
        )
    except ValueError as exc:
        raise ConfigError(f"bad thresholds section: {exc}") from exc


def _parse_flow(cfg: dict) -> FlowParams:
    f = cfg.get("flow", {})
    try:
        return FlowParams(
            dt_init=float(f.get("dt_init", 1e-3)),
            rel_tol=float(f.get("rel_tol", 1e-10)),
            abs_tol=float(f.get("abs_tol", 1e-12)),
            min_separation_guard=float(f.get("min_separation_guard", 1e-6)),
            max_steps=int(f.get("max_steps", 200_000)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad flow section: {exc}") from exc


def _parse_points(cfg: dict, key: str, frame: str) -> PointConfiguration:
    pts = _require(cfg, key, "config")
    try:
        return PointConfiguration(np.asarray(pts, dtype=np.float64), frame)
    except ValueError as exc:
        raise ConfigError(f"bad {key}: {exc}") from exc


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, produced: list[Path], config_path: str) -> None:
    entries = [{"path": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size}
               for p in sorted(produced)]
    manifest = {
        "config": Path(config_path).name,
        "config_sha256": _sha256(Path(config_path)),
        "files": entries,
        "_non_canonical": {
            "generated_at": datetime.now(timezone.utc).isoformat(),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Scenario runners
# ---------------------------------------------------------------------------

def _run_simulate(cfg: dict, out: Path, seed: int) -> list[Path]:
    grid = _parse_grid(cfg)
    u0 = _parse_initial(_require(cfg, "initial", "simulate config"), grid)
    params = _parse_solver(cfg)
    thresholds = _parse_thresholds(cfg, grid)
    result = evolve(u0, None, params, observers=[standard_observer(thresholds)])

    produced = []
    nd = out / "diagnostics.ndjson"
    with open(nd, "w") as fh:
        for rec in result.records:
            fh.write(ndjson_line(rec) + "\n")
    produced.append(nd)
    for idx, (t, field) in enumerate(zip(result.times, result.fields)):
        p = out / f"snap_{idx:06d}.ksf"
        write_snapshot(p, field, t)
        produced.append(p)
    report = {
        "kind": "simulate",
        "halt_reason": result.halt_reason,
        "n_steps": result.n_steps,
        "final_time": result.final_time,
        "final_mass": float(result.records[-1].mass) if result.records else None,
        "concentration_detected": result.halt_reason == "concentration",
    }
    produced.append(_write_json(out / "report.json", report))
    return produced


def _run_pointdyn(cfg: dict, out: Path, seed: int) -> list[Path]:
    frame = cfg.get("frame", FRAME_PHYSICAL)
    config = _parse_points(cfg, "points", frame)
    flow = _parse_flow(cfg)
    traj = integrate_flow(config, flow, duration=float(cfg.get("duration", 1.0)))

    produced = []
    csv_path = out / "trajectory.csv"
    write_trajectory_csv(csv_path, traj)
    produced.append(csv_path)

    n = config.n_points
    com0 = traj.points[0].mean(axis=0)
    com_drift = float(np.abs(traj.points.mean(axis=1) - com0).max())
    tot = (traj.points**2).sum(axis=(1, 2))
    slope = None
    if len(traj.times) > 2 and traj.times[-1] > traj.times[0]:
        i0, i1 = 1, max(2, len(traj.times) // 2)
        dt_span = traj.times[i1] - traj.times[i0]
        if dt_span > 0:
            slope = float((tot[i1] - tot[i0]) / dt_span)
    derived = -4.0 * n * (n - 1)
    alternate = 2.0 * n * (n - 1)
    report = {
        "kind": "pointdyn",
        "frame": frame,
        "n_points": n,
        "final_time": float(traj.times[-1]),
        "collapse_time": traj.collapse_time,
        "collision_pair": list(traj.collision_pair) if traj.collision_pair else None,
        "center_of_mass_drift": com_drift,
        "total_second_moment_slope": slope,
        "second_moment_rate_derived": derived,
        "second_moment_rate_alternate_convention": alternate,
        "second_moment_rate_alternate_flagged": (
            slope is not None and abs(slope - alternate) > abs(slope - derived)),
        "flow_energy_monotone": traj.flow_monotone,
    }
    produced.append(_write_json(out / "report.json", report))
    return produced


def _run_critical(cfg: dict, out: Path, seed: int) -> list[Path]:
    if "points" in cfg:
        config = _parse_points(cfg, "points", FRAME_RENORMALIZED)
    else:
        n = int(_require(cfg, "n_points", "critical config"))
        rng = np.random.default_rng(seed)
        config = PointConfiguration(rng.normal(scale=1.5, size=(n, 2)),
                                    FRAME_RENORMALIZED)
    flow = _parse_flow(cfg)
    crit = find_critical_point(config, flow, seed=seed)
    radii = np.hypot(crit.points[:, 0], crit.points[:, 1])
    produced = []
    pts_path = out / "points.csv"
    write_points(pts_path, crit)
    produced.append(pts_path)
    report = {
        "kind": "critical",
        "n_points": crit.n_points,
        "p": [[float(a), float(b)] for a, b in crit.points],
        "radii": [float(r) for r in radii],
        "renormalized_energy": renormalized_energy(crit) if crit.n_points > 1 else 0.0,
        "flow_energy": flow_energy(crit) if crit.n_points > 1 else 0.0,
    }
    produced.append(_write_json(out / "report.json", report))
    return produced


def _run_hybrid(cfg: dict, out: Path, seed: int) -> list[Path]:
    grid = _parse_grid(cfg)
    rho0 = _parse_initial(_require(cfg, "initial", "hybrid config"), grid)
    atoms_raw = cfg.get("atoms")
    atoms = (PointConfiguration(np.asarray(atoms_raw, dtype=np.float64))
             if atoms_raw else None)
    params = _parse_solver(cfg)
    thresholds = _parse_thresholds(cfg, grid)
    flow = _parse_flow(cfg)
    state0 = HybridState(atoms, rho0, 0.0)
    result = evolve_hybrid(state0, None, params, flow, thresholds,
                           observers=[standard_observer(thresholds)])

    produced = []
    nd = out / "diagnostics.ndjson"
    with open(nd, "w") as fh:
        for rec in result.records:
            fh.write(ndjson_line(rec) + "\n")
    produced.append(nd)
    for idx, state in enumerate(result.states):
        rho_path = out / f"rho_{idx:06d}.ksf"
        write_snapshot(rho_path, state.rho, state.t)
        produced.append(rho_path)
        if state.atoms is not None:
            atom_path = out / f"atoms_{idx:06d}.csv"
            write_points(atom_path, state.atoms)
            produced.append(atom_path)
    report = {
        "kind": "hybrid",
        "halt_reason": result.halt_reason,
        "n_steps": result.n_steps,
        "final_time": result.final.t,
        "final_measure_mass": result.final.measure_mass(),
        "final_atoms": ([[float(a), float(b)] for a, b in result.final.atoms.points]
                        if result.final.atoms is not None else []),
    }
    produced.append(_write_json(out / "report.json", report))
    return produced


def _run_rescale(cfg: dict, out: Path, seed: int) -> list[Path]:
    inputs = _require(cfg, "input", "rescale config")
    if isinstance(inputs, str):
        inputs = [inputs]
    fields, times = [], []
    for p in inputs:
        field, t = read_snapshot(p)
        fields.append(field)
        times.append(t)

    produced = []
    center = tuple(cfg.get("center", (0.0, 0.0)))
    if cfg.get("lambda") is not None:
        lam = float(cfg["lambda"])
        for idx, (t, field) in enumerate(zip(times, fields)):
            zoomed = parabolic_rescale(field, lam, center)
            p = out / f"rescaled_{idx:06d}.ksf"
            write_snapshot(p, zoomed, lam * lam * t)
            produced.append(p)
    if cfg.get("self_similar"):
        for idx, (t, field) in enumerate(zip(times, fields)):
            if t >= 0:
                raise ConfigError(f"self-similar transform needs t < 0, slice {idx} has t={t}")
            state = to_self_similar(field, t)
            p = out / f"selfsim_{idx:06d}.ksf"
            write_snapshot(p, state.z, state.s)
            produced.append(p)
    lams = cfg.get("blow_down")
    if lams:
        thresholds = _parse_thresholds(cfg, fields[0].grid if fields else None)
        n_atoms = int(cfg.get("n_atoms", 1))
        fit = blow_down(times, fields, [float(x) for x in lams], n_atoms, thresholds)
        produced.append(_write_json(out / "fit_report.json", fit.to_json_dict()))
    if not produced:
        raise ConfigError("rescale config requests nothing "
                          "(need lambda, self_similar or blow_down)")
    return produced


def _run_diagnose(cfg: dict, out: Path | None, seed: int) -> list[Path]:
    field, t = read_snapshot(_require(cfg, "input", "diagnose config"))
    thresholds = _parse_thresholds(cfg, field.grid)
    line = ndjson_line(compute_record(field, t, thresholds))
    print(line)
    if out is not None:
        p = out / "record.ndjson"
        p.write_text(line + "\n")
        return [p]
    return []


_RUNNERS = {
    "simulate": _run_simulate,
    "pointdyn": _run_pointdyn,
    "critical": _run_critical,
    "hybrid": _run_hybrid,
    "rescale": _run_rescale,
    "diagnose": _run_diagnose,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kslab",
        description="Chemotaxis aggregation laboratory: scenario runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in _KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} scenario")
        p.add_argument("--config", required=True, help="scenario config (JSON)")
        p.add_argument("--out", default=None,
                       help="output directory (required except for diagnose)")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for sweep entries")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        if kind == "rescale":
            p.add_argument("--lambda", dest="lam", type=float, default=None)
            p.add_argument("--center", default=None, help="cx,cy")
            p.add_argument("--self-similar", action="store_true", default=False)
            p.add_argument("--blow-down", default=None, help="lam1,lam2,...")
    return parser


def _run_entry(kind: str, cfg: dict, out_dir: str | None, config_path: str,
               seed: int) -> int:
    out = None
    if kind != "diagnose" or out_dir is not None:
        if out_dir is None:
            raise ConfigError(f"--out is required for {kind}")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    try:
        produced = _RUNNERS[kind](cfg, out, seed)
    except NumericalFailureError as exc:
        if out is not None:
            _write_json(out / "failure_report.json", {
                "error": str(exc), "t": exc.t, "step": exc.step, "kind": kind})
        print(f"kslab: numerical failure: {exc}", file=sys.stderr)
        return 3
    except SearchFailureError as exc:
        if out is not None:
            _write_json(out / "failure_report.json", {
                "error": str(exc), "residual": exc.residual, "kind": kind})
        print(f"kslab: search failure: {exc}", file=sys.stderr)
        return 3
    if out is not None:
        _write_manifest(out, [p for p in produced if p.parent == out], config_path)
    return 0


def _sweep_worker(args) -> int:
    kind, entry, out_dir, config_path, seed = args
    return _run_entry(kind, entry, out_dir, config_path, seed)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        kind = args.command
        if cfg.get("kind", kind) != kind and "entries" not in cfg:
            raise ConfigError(
                f"config kind {cfg.get('kind')!r} does not match subcommand {kind!r}")

        if kind == "rescale":
            if args.lam is not None:
                cfg["lambda"] = args.lam
            if args.center is not None:
                try:
                    cx, cy = (float(v) for v in args.center.split(","))
                except ValueError as exc:
                    raise ConfigError(f"bad --center {args.center!r}") from exc
                cfg["center"] = [cx, cy]
            if args.self_similar:
                cfg["self_similar"] = True
            if args.blow_down is not None:
                try:
                    cfg["blow_down"] = [float(v) for v in args.blow_down.split(",")]
                except ValueError as exc:
                    raise ConfigError(f"bad --blow-down {args.blow_down!r}") from exc

        entries = cfg.get("entries")
        if entries is not None:
            if args.out is None:
                raise ConfigError("--out is required for sweep configs")
            jobs = []
            for i, entry in enumerate(entries):
                if not isinstance(entry, dict):
                    raise ConfigError(f"sweep entry {i} must be an object")
                name = entry.get("name", f"entry_{i:03d}")
                sub_out = str(Path(args.out) / name)
                jobs.append((entry.get("kind", kind), entry, sub_out,
                             args.config, args.seed))
            if args.jobs > 1:
                with ProcessPoolExecutor(max_workers=min(args.jobs, thread_count())) as ex:
                    codes = list(ex.map(_sweep_worker, jobs))
            else:
                codes = [_sweep_worker(j) for j in jobs]
            return max(codes) if codes else 0

        return _run_entry(kind, cfg, args.out, args.config, args.seed)
    except ConfigError as exc:
        print(f"kslab: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
