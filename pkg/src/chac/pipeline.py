"""Config-driven experiment pipeline: simulate, linearize, measure, invert,
report.

A TOML config describes the grid, solver, truth potential manifest, initial
data per experiment and the stage list. Each stage writes its artifacts under
its own subdirectory of the output root, together with a manifest listing
every artifact, the config echo, the package version and the RNG seed.
Wall-clock timings go to a separate timings.json that is not part of the
reproducibility contract: reruns with identical config and seed are
bit-identical in everything else.
"""

from __future__ import annotations

import json
import math
import os
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .forward import SolverConfig, StateVec, diagnostics, solve_forward
from .grid import PeriodicGrid, ScalarField, read_field_csv, write_field_csv
from .invert import (
    MeasurementBundle,
    generate_measurements,
    reconstruct_ip1,
    reconstruct_ip2,
)
from .linearize import solve_cascade
from .potentials import (
    SystemParams,
    load_potential_manifest,
    parse_expression,
    validate_admissible,
)

STAGES = ("simulate", "linearize", "measure", "invert", "report")


class ConfigError(ValueError):
    """The config file is missing, malformed, or inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts are retained."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in ("grid", "solver", "potential", "initial", "pipeline"):
        if section not in cfg:
            raise ConfigError(f"{path}: missing [{section}] section")
    stages = cfg["pipeline"].get("stages", list(STAGES))
    order = [STAGES.index(s) for s in stages if s in STAGES]
    if len(order) != len(stages):
        unknown = [s for s in stages if s not in STAGES]
        raise ConfigError(f"unknown stages: {unknown}")
    if order != sorted(order):
        raise ConfigError(f"stages must respect the order {' < '.join(STAGES)}")
    cfg["_config_path"] = str(path)
    return cfg


class Pipeline:
    """Executes stages of one experiment configuration."""

    def __init__(self, config: dict, out: str | None = None, jobs: int | None = None):
        self.config = config
        self.out = out or config["pipeline"].get("out", "results")
        self.jobs = jobs or int(os.environ.get("CHAC_JOBS", "0")) or None
        self.timings: dict[str, float] = {}

        gsec = config["grid"]
        self.grid = PeriodicGrid(int(gsec["dim"]), int(gsec["n"]))

        manifest_path = config["potential"]["manifest"]
        base = os.path.dirname(config.get("_config_path", "."))
        if not os.path.isabs(manifest_path):
            manifest_path = os.path.join(base, manifest_path)
        if not os.path.exists(manifest_path):
            raise ConfigError(f"potential manifest not found: {manifest_path}")
        self.pot, self.coup, manifest_params = load_potential_manifest(manifest_path)
        if "params" in config:
            p = config["params"]
            self.params = SystemParams(float(p["c1"]), float(p["c2"]))
        elif manifest_params is not None:
            self.params = manifest_params
        else:
            raise ConfigError("system constants missing from both config and manifest")

        ssec = config["solver"]
        self.solver_cfg = SolverConfig(
            dt=float(ssec["dt"]),
            t_final=float(ssec["t_final"]),
            scheme=ssec.get("scheme", "imex2"),
            dealias=bool(ssec.get("dealias", False)),
            record_times=tuple(float(t) for t in ssec.get("record_times", [ssec["t_final"]])),
        )

        psec = config["pipeline"]
        self.order = int(psec.get("order", 1))
        self.seed = int(psec.get("seed", 0))
        self.noise_sigma = float(psec.get("noise_sigma", 0.0))
        self.data_dt_factor = int(psec.get("data_dt_factor", 10))
        self.mode = psec.get("mode", "ip1")
        if self.mode not in ("ip1", "ip2"):
            raise ConfigError(f"pipeline mode must be ip1 or ip2, got {self.mode!r}")
        self.spatial = bool(psec.get("spatial", False))
        self.derivative_bound = float(psec.get("derivative_bound", 0.0))
        self.mask_tau = float(psec.get("mask_tau", 1e-3))

        self.initial_states = self._parse_initial(config["initial"])

    def _parse_initial(self, sec) -> list[StateVec]:
        exprs = {}
        n_exp = None
        for comp in ("u0", "u1", "u2", "u3"):
            entries = sec.get(comp, [])
            if isinstance(entries, str):
                entries = [entries]
            exprs[comp] = [parse_expression(e) for e in entries]
            if entries:
                if n_exp is None:
                    n_exp = len(entries)
                elif len(entries) != n_exp:
                    raise ConfigError("all initial components must list one expression per experiment")
        if not n_exp:
            raise ConfigError("[initial] must define at least one experiment via u0")
        states = []
        coords = self.grid.coords()
        for e in range(n_exp):
            fields = []
            for comp in ("u0", "u1", "u2", "u3"):
                fns = exprs[comp]
                if e < len(fns):
                    vals = np.broadcast_to(np.asarray(fns[e](coords, 0.0), dtype=float), self.grid.shape)
                    fields.append(ScalarField(self.grid, vals.copy()))
                else:
                    fields.append(ScalarField.zeros(self.grid))
            states.append(StateVec(*fields))
        return states

    # -- stage plumbing ----------------------------------------------------

    def _stage_dir(self, stage: str) -> str:
        d = os.path.join(self.out, stage)
        os.makedirs(d, exist_ok=True)
        return d

    def _write_manifest(self, stage: str, artifacts: list[str], extra: dict | None = None) -> None:
        from . import __version__

        manifest = {
            "stage": stage,
            "version": __version__,
            "seed": self.seed,
            "config": _echo(self.config),
            "artifacts": sorted(artifacts),
        }
        if extra:
            manifest.update(extra)
        path = os.path.join(self._stage_dir(stage), "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    def run(self, stages=None) -> None:
        stages = list(stages or self.config["pipeline"].get("stages", STAGES))
        for stage in stages:
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r}")
            fn = getattr(self, f"stage_{stage}")
            start = time.perf_counter()
            try:
                fn()
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(stage, exc) from exc
            self.timings[stage] = time.perf_counter() - start
        with open(os.path.join(self.out, "timings.json"), "w") as fh:
            json.dump(self.timings, fh, indent=2, sort_keys=True)

    # -- stages ------------------------------------------------------------

    def stage_simulate(self) -> None:
        d = self._stage_dir("simulate")
        artifacts = []
        for e, phi in enumerate(self.initial_states):
            traj = solve_forward(phi, self.params, self.pot, self.coup, self.solver_cfg)
            for j, (state, dudt) in enumerate(zip(traj.states, traj.dudt0)):
                for name, fld in zip(("u0", "u1", "u2", "u3", "dudt0"), (*state.fields, dudt)):
                    fname = f"exp{e}_t{j}_{name}.csv"
                    write_field_csv(os.path.join(d, fname), fld)
                    artifacts.append(fname)
            rep = diagnostics(traj)
            fname = f"exp{e}_diagnostics.json"
            with open(os.path.join(d, fname), "w") as fh:
                json.dump({"times": traj.times, **rep.as_dict()}, fh, indent=2, sort_keys=True)
            artifacts.append(fname)
        self._write_manifest("simulate", artifacts, {"times": list(self.solver_cfg.record_times)})

    def stage_linearize(self) -> None:
        d = self._stage_dir("linearize")
        artifacts = []
        for e, phi in enumerate(self.initial_states):
            casc = solve_cascade(phi, self.params, self.pot, self.coup, self.solver_cfg, self.order)
            for (ell, j), fields in casc.u.items():
                if ell == 0:
                    continue
                for i, fld in enumerate(fields):
                    fname = f"exp{e}_ell{ell}_t{j}_c{i}.csv"
                    write_field_csv(os.path.join(d, fname), fld)
                    artifacts.append(fname)
        self._write_manifest(
            "linearize", artifacts,
            {"order": self.order, "times": list(self.solver_cfg.record_times)},
        )

    def _data_cfg(self) -> SolverConfig:
        # inverse-crime guard: measurement data are generated at a finer step
        return SolverConfig(
            dt=self.solver_cfg.dt / self.data_dt_factor,
            t_final=self.solver_cfg.t_final,
            scheme=self.solver_cfg.scheme,
            dealias=self.solver_cfg.dealias,
            record_times=self.solver_cfg.record_times,
        )

    def stage_measure(self) -> None:
        d = self._stage_dir("measure")
        artifacts = []
        cfg = self._data_cfg()
        for e, phi in enumerate(self.initial_states):
            rng = np.random.default_rng(self.seed + e)
            bundle = generate_measurements(
                phi, self.params, self.pot, self.coup, cfg, self.order,
                noise_sigma=self.noise_sigma, rng=rng,
            )
            artifacts += _write_bundle(d, f"exp{e}", bundle)
        self._write_manifest(
            "measure", artifacts,
            {
                "order": self.order,
                "times": list(cfg.record_times),
                "noise_sigma": self.noise_sigma,
                "data_dt": cfg.dt,
                "experiments": len(self.initial_states),
            },
        )

    def stage_invert(self) -> None:
        mdir = self._stage_dir("measure")
        mpath = os.path.join(mdir, "manifest.json")
        if not os.path.exists(mpath):
            raise ConfigError("invert stage requires measure artifacts; run the measure stage first")
        with open(mpath) as fh:
            meta = json.load(fh)
        bundles = [
            _read_bundle(mdir, f"exp{e}", meta) for e in range(int(meta["experiments"]))
        ]
        ba = bundles[0]
        bb = bundles[1] if len(bundles) > 1 else None

        d = self._stage_dir("invert")
        artifacts = []
        if self.mode == "ip1":
            res = reconstruct_ip1(
                ba, bb, self.params, self.coup, self.order,
                mask_tau=self.mask_tau, spatial=self.spatial,
            )
            summary = {
                "mode": "ip1",
                "coefficients": {str(k): v for k, v in res.coefficients.items()},
                "per_time": {str(k): v for k, v in res.per_time.items()},
                "spreads": {str(k): v for k, v in res.spreads.items()},
                "times": res.times,
                "mask_coverage": {str(k): float(m.mean()) for k, m in res.masks.items()},
            }
            for ell, prof in res.profiles.items():
                fname = f"ghat_ell{ell}.csv"
                filled = np.where(res.masks[ell], prof, np.nan)
                _write_profile_csv(os.path.join(d, fname), self.grid, filled)
                artifacts.append(fname)
        else:
            res = reconstruct_ip2(
                ba, bb, self.params, self.coup, self.order,
                derivative_bound=self.derivative_bound,
                mask_tau=self.mask_tau, spatial=self.spatial,
            )
            summary = {
                "mode": "ip2",
                "nodes": res.nodes.tolist(),
                "values": {str(k): v.tolist() for k, v in res.per_order_values.items()},
                "remainder_bound": res.remainder_bound,
                "derivative_bound": self.derivative_bound,
                "mask_coverage": {str(k): float(m.mean()) for k, m in res.masks.items()},
            }
            for ell, stack in res.per_order_profiles.items():
                for j in range(stack.shape[0]):
                    fname = f"ghat_ell{ell}_t{j}.csv"
                    _write_profile_csv(os.path.join(d, fname), self.grid, stack[j])
                    artifacts.append(fname)
        with open(os.path.join(d, "reconstruction.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        artifacts.append("reconstruction.json")
        self._write_manifest("invert", artifacts)

    def stage_report(self) -> None:
        idir = self._stage_dir("invert")
        rpath = os.path.join(idir, "reconstruction.json")
        if not os.path.exists(rpath):
            raise ConfigError("report stage requires invert artifacts; run the invert stage first")
        with open(rpath) as fh:
            rec = json.load(fh)
        d = self._stage_dir("report")
        artifacts = []
        lines = [f"reconstruction report ({rec['mode']})", ""]
        if rec["mode"] == "ip1":
            lines.append("order  estimate            profile-spread      mask")
            rows = []
            for k in sorted(rec["coefficients"], key=int):
                est = rec["coefficients"][k]
                spread = rec["spreads"][k]
                cov = rec["mask_coverage"][k]
                lines.append(f"{k:>5}  {est:<18.12g}  {spread:<18.6g}  {cov:.1%}")
                rows.append((int(k), est, spread, cov))
            table = os.path.join(d, "coefficients.dat")
            with open(table, "w") as fh:
                fh.write("# order estimate spread mask_coverage\n")
                for r in rows:
                    fh.write(f"{r[0]} {r[1]:.17g} {r[2]:.17g} {r[3]:.6g}\n")
            artifacts.append("coefficients.dat")
        else:
            lines.append(f"nodes: {rec['nodes']}")
            lines.append(f"remainder bound: {rec['remainder_bound']:.6g} "
                         f"(user derivative bound {rec['derivative_bound']:.6g})")
            table = os.path.join(d, "per_time.dat")
            with open(table, "w") as fh:
                fh.write("# t " + " ".join(f"g{k}" for k in sorted(rec["values"], key=int)) + "\n")
                for j, t in enumerate(rec["nodes"]):
                    vals = " ".join(f"{rec['values'][k][j]:.17g}" for k in sorted(rec["values"], key=int))
                    fh.write(f"{t:.17g} {vals}\n")
            artifacts.append("per_time.dat")
        summary = os.path.join(d, "summary.txt")
        with open(summary, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        artifacts.append("summary.txt")
        self._write_manifest("report", artifacts)


# ---------------------------------------------------------------------------
# bundle and profile serialization
# ---------------------------------------------------------------------------


def _write_bundle(directory: str, prefix: str, bundle: MeasurementBundle) -> list[str]:
    names = []
    for (ell, j), fields in bundle.u.items():
        for i, fld in enumerate(fields):
            fname = f"{prefix}_u_ell{ell}_t{j}_c{i}.csv"
            write_field_csv(os.path.join(directory, fname), fld)
            names.append(fname)
    for (ell, j), fld in bundle.dudt0.items():
        fname = f"{prefix}_dudt0_ell{ell}_t{j}.csv"
        write_field_csv(os.path.join(directory, fname), fld)
        names.append(fname)
    return names


def _read_bundle(directory: str, prefix: str, meta: dict) -> MeasurementBundle:
    order = int(meta["order"])
    times = [float(t) for t in meta["times"]]
    u = {}
    dudt0 = {}
    grid = None
    for ell in range(1, order + 1):
        for j in range(len(times)):
            fields = []
            for i in range(4):
                path = os.path.join(directory, f"{prefix}_u_ell{ell}_t{j}_c{i}.csv")
                if not os.path.exists(path):
                    raise ConfigError(f"measurement bundle incomplete: missing {path}")
                fields.append(read_field_csv(path))
            u[(ell, j)] = tuple(fields)
            dudt0[(ell, j)] = read_field_csv(
                os.path.join(directory, f"{prefix}_dudt0_ell{ell}_t{j}.csv")
            )
            grid = fields[0].grid
    return MeasurementBundle(
        grid=grid, order=order, times=times, u=u, dudt0=dudt0,
        noise_sigma=float(meta.get("noise_sigma", 0.0)),
    )


def _write_profile_csv(path: str, grid: PeriodicGrid, values: np.ndarray) -> None:
    """Profile CSV that tolerates NaN at masked-out points."""
    with open(path, "w") as fh:
        fh.write(f"# field d={grid.dim} n={grid.n} domain=-1,1\n")
        for v in values.ravel(order="C"):
            fh.write("nan\n" if math.isnan(v) else f"{v:.17g}\n")


def _echo(config: dict) -> dict:
    return {k: v for k, v in config.items() if not k.startswith("_")}


# ---------------------------------------------------------------------------
# potential validation (CLI validate-potential)
# ---------------------------------------------------------------------------


def validate_potential_file(path, probe_box=(-1.0, 1.0)) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"potential manifest not found: {path}")
    pot, coup, _ = load_potential_manifest(path)
    report = validate_admissible(pot, coup, probe_box)
    out = report.as_dict()
    out["structural_ok"] = report.structural_ok
    return out
