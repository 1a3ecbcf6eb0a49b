"""Experiment harness: strict JSON configs, deterministic grid runs,
resumable progress, and CSV/JSON outputs under a per-config hash.

Four experiment kinds map onto the library layers.  `potential`
tabulates the mediated pair potential over a k_F ladder and probes the
two-sided uniform bounds.  `scaling` runs the factorization-deficit
ladder for the truncated microscopic dynamics against the effective
product evolution.  `bounds` evaluates the nine lattice error sums
against their growth envelopes.  `proposition2` measures the short-time
splitting rate between the two effective propagator variants and checks
it against the mediated pair expectation.

Every run is identified by a hash of its fully resolved config; grid
points already present in the progress file of a previous run with the
same hash are not recomputed.  Result files (CSV tables and the JSON
report) contain no timestamps, so re-running an identical config
reproduces them byte for byte; wall-clock timings live only in the
manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np

from . import effective
from . import fock
from .bounds import SUM_IDS, big_gamma, bound_report
from .lattice import build_lattice, fermi_ball
from .mediated import (DEFAULT_REL_TOL, lemma1_scan, potential_table,
                       spec_label)
from .potentials import (bounded_impurity, certify_assumptions, spec_by_id,
                         zero_impurity)

CONFIG_VERSION = 1
EXPERIMENTS = ("potential", "scaling", "bounds", "proposition2")

SCHEMA_VERSION_KEY = "version"

#: exit codes used by the command-line layer
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCE = 4


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


class NumericalFailure(RuntimeError):
    """A computation ran but its numerical guarantees were not met."""


class ResourceCapError(RuntimeError):
    """A requested grid exceeds the configured resource caps."""


# --- configuration -----------------------------------------------------------

_TOLERANCE_DEFAULTS = {
    "quad_rel": DEFAULT_REL_TOL,
    "krylov_tol": fock.DEFAULT_KRYLOV_TOL,
    "tail_rel": 0.01,
    "ratio_band": 5.0,
    "control_tol": 1e-7,
}

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description.

    `raw` is the canonical defaults-filled dictionary; its hash (minus
    the output directory) identifies the run for resume purposes.
    """

    experiment: str
    d: int
    L_ladder: tuple
    k_F_ladder: tuple
    lambda_rule: dict
    n: int
    spec_id: str
    spec_R: float
    w: dict
    xi0: dict
    t_list: tuple
    tolerances: dict
    m_max: int
    cutoff_rule: dict
    M_imp: int
    r_max: float
    r_points: int
    include_quadruple: bool
    out_dir: str
    seed: int
    raw: dict = field(repr=False, compare=False)


def _require_keys(section: dict, allowed, label: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {label} key(s): {', '.join(unknown)}")


def _as_float_tuple(value, label: str) -> tuple:
    try:
        out = tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label} must be a list of numbers") from exc
    if not out:
        raise ConfigError(f"{label} must not be empty")
    if any(not math.isfinite(v) for v in out):
        raise ConfigError(f"{label} entries must be finite")
    return out


def _as_int(value, label: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{label} must be an integer")
    return value


def _parse_lambda_rule(rule) -> dict:
    if not isinstance(rule, dict):
        raise ConfigError("lambda_rule must be an object")
    _require_keys(rule, {"kind", "value"}, "lambda_rule")
    kind = rule.get("kind")
    if kind == "scaled":
        if "value" in rule:
            raise ConfigError("scaled lambda_rule takes no value")
        return {"kind": "scaled"}
    if kind == "fixed":
        try:
            value = float(rule["value"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("fixed lambda_rule needs a numeric value") from exc
        if not math.isfinite(value):
            raise ConfigError("lambda_rule value must be finite")
        return {"kind": "fixed", "value": value}
    raise ConfigError("lambda_rule kind must be 'scaled' or 'fixed'")


def _parse_cutoff_rule(rule) -> dict:
    if not isinstance(rule, dict):
        raise ConfigError("cutoff_rule must be an object")
    _require_keys(rule, {"kind", "value", "multiplier", "offset"},
                  "cutoff_rule")
    kind = rule.get("kind")
    if kind == "max":
        try:
            mult = float(rule["multiplier"])
            off = float(rule["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(
                "max cutoff_rule needs numeric multiplier and offset") from exc
        if not (mult > 0.0 and off > 0.0 and math.isfinite(mult)
                and math.isfinite(off)):
            raise ConfigError("cutoff_rule values must be positive")
        return {"kind": "max", "multiplier": mult, "offset": off}
    if kind not in ("multiplier", "offset"):
        raise ConfigError(
            "cutoff_rule kind must be 'multiplier', 'offset', or 'max'")
    try:
        value = float(rule["value"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("cutoff_rule needs a numeric value") from exc
    if not (value > 0.0 and math.isfinite(value)):
        raise ConfigError("cutoff_rule value must be positive")
    return {"kind": kind, "value": value}


def _parse_w(section) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("w must be an object")
    _require_keys(section, {"kind", "amplitude", "wavenumber"}, "w")
    kind = section.get("kind")
    if kind == "zero":
        if len(section) > 1:
            raise ConfigError("zero w takes no parameters")
        return {"kind": "zero"}
    if kind == "cosine":
        try:
            amplitude = float(section["amplitude"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("cosine w needs a numeric amplitude") from exc
        wavenumber = _as_int(section.get("wavenumber", 1), "w wavenumber")
        if wavenumber < 0:
            raise ConfigError("w wavenumber must be nonnegative")
        if not math.isfinite(amplitude):
            raise ConfigError("w amplitude must be finite")
        return {"kind": "cosine", "amplitude": amplitude,
                "wavenumber": wavenumber}
    raise ConfigError("w kind must be 'zero' or 'cosine'")


def _parse_xi0(section, n: int, d: int) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("xi0 must be an object")
    family = section.get("family")
    if family == "packet":
        _require_keys(section, {"family", "width", "centers"}, "xi0")
        width = float(section.get("width", 1.0))
        if not (width > 0.0 and math.isfinite(width)):
            raise ConfigError("xi0 packet width must be positive")
        out = {"family": "packet", "width": width}
        if "centers" in section:
            centers = np.asarray(section["centers"], dtype=float)
            if centers.shape != (n, d):
                raise ConfigError("xi0 centers must have shape (n, d)")
            out["centers"] = centers.tolist()
        return out
    if family == "plane":
        _require_keys(section, {"family", "modes"}, "xi0")
        modes = np.asarray(section.get("modes", np.zeros((n, d))), dtype=int)
        if modes.shape != (n, d):
            raise ConfigError("xi0 modes must have shape (n, d)")
        return {"family": "plane", "modes": modes.tolist()}
    if family == "gaussian":
        _require_keys(section, {"family", "centers", "width", "momenta"},
                      "xi0")
        out = {"family": "gaussian"}
        if "centers" in section:
            centers = np.asarray(section["centers"], dtype=float)
            if centers.shape != (n, d):
                raise ConfigError("xi0 centers must have shape (n, d)")
            out["centers"] = centers.tolist()
        if "width" in section:
            width = float(section["width"])
            if not (width > 0.0 and math.isfinite(width)):
                raise ConfigError("xi0 gaussian width must be positive")
            out["width"] = width
        if "momenta" in section:
            momenta = np.asarray(section["momenta"], dtype=float)
            if momenta.shape != (n, d):
                raise ConfigError("xi0 momenta must have shape (n, d)")
            out["momenta"] = momenta.tolist()
        return out
    raise ConfigError("xi0 family must be 'packet', 'plane', or 'gaussian'")


_TOP_KEYS = (SCHEMA_VERSION_KEY, "experiment", "d", "L_ladder", "k_F_ladder",
             "lambda_rule", "n", "spec_id", "spec_R", "w", "xi0", "t_list",
             "tolerances", "m_max", "cutoff_rule", "M_imp", "r_max",
             "r_points", "include_quadruple", "out_dir", "seed")


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a config dictionary against the versioned schema.

    Unknown keys are rejected at every level; every omitted key is
    filled with its default so the resolved config is self-contained.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys(data, _TOP_KEYS, "config")
    if data.get(SCHEMA_VERSION_KEY) != CONFIG_VERSION:
        raise ConfigError(
            f"config version must be {CONFIG_VERSION}, "
            f"got {data.get(SCHEMA_VERSION_KEY)!r}")
    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"experiment must be one of {', '.join(EXPERIMENTS)}")

    d = _as_int(data.get("d", 1), "d")
    if d not in (1, 2, 3):
        raise ConfigError("d must be 1, 2, or 3")
    n = _as_int(data.get("n", 2 if experiment == "proposition2" else 1), "n")
    if n < 1:
        raise ConfigError("n must be at least 1")

    L_ladder = _as_float_tuple(data.get("L_ladder", [_TWO_PI]), "L_ladder")
    k_F_ladder = _as_float_tuple(data.get("k_F_ladder", [2.0, 4.0, 8.0]),
                                 "k_F_ladder")
    for label, ladder in (("L_ladder", L_ladder), ("k_F_ladder", k_F_ladder)):
        if any(v <= 0.0 for v in ladder):
            raise ConfigError(f"{label} entries must be positive")
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError(f"{label} must be strictly increasing")

    lambda_rule = _parse_lambda_rule(data.get("lambda_rule",
                                              {"kind": "scaled"}))
    cutoff_default = ({"kind": "offset", "value": 4.0}
                      if experiment == "scaling"
                      else {"kind": "multiplier", "value": 4.0})
    cutoff_rule = _parse_cutoff_rule(data.get("cutoff_rule", cutoff_default))

    spec_default = "step" if experiment == "bounds" else "yukawa"
    spec_id = data.get("spec_id", spec_default)
    if spec_id not in ("yukawa", "step", "zero"):
        raise ConfigError("spec_id must be 'yukawa', 'step', or 'zero'")
    spec_R = float(data.get("spec_R", 1.0))
    if not (spec_R > 0.0 and math.isfinite(spec_R)):
        raise ConfigError("spec_R must be positive")

    w = _parse_w(data.get("w", {"kind": "zero"}))
    xi0_default = ({"family": "gaussian"} if experiment == "proposition2"
                   else {"family": "packet", "width": 1.0})
    xi0 = _parse_xi0(data.get("xi0", xi0_default), n, d)

    t_default = ([0.01, 0.02, 0.03, 0.04, 0.05]
                 if experiment == "proposition2"
                 else [0.0, 0.25, 0.5, 1.0])
    t_list = _as_float_tuple(data.get("t_list", t_default), "t_list")
    if any(t < 0.0 for t in t_list):
        raise ConfigError("t_list entries must be nonnegative")
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ConfigError("t_list must be strictly increasing")

    tolerances = data.get("tolerances", {})
    if not isinstance(tolerances, dict):
        raise ConfigError("tolerances must be an object")
    _require_keys(tolerances, _TOLERANCE_DEFAULTS, "tolerances")
    tolerances = {**_TOLERANCE_DEFAULTS,
                  **{k: float(v) for k, v in tolerances.items()}}
    if any(v <= 0.0 for v in tolerances.values()):
        raise ConfigError("tolerances must be positive")

    m_max = _as_int(data.get("m_max", 3), "m_max")
    if m_max not in (0, 1, 2, 3):
        raise ConfigError("m_max must be between 0 and 3")
    M_imp = _as_int(data.get("M_imp", 16), "M_imp")
    if M_imp < 2 or (M_imp & (M_imp - 1)) != 0:
        raise ConfigError("M_imp must be a power of two, at least 2")

    r_max = float(data.get("r_max", 10.0))
    r_points = _as_int(data.get("r_points", 200), "r_points")
    if not (r_max > 0.0 and math.isfinite(r_max)):
        raise ConfigError("r_max must be positive")
    if r_points < 2:
        raise ConfigError("r_points must be at least 2")

    include_quadruple = data.get("include_quadruple", True)
    if not isinstance(include_quadruple, bool):
        raise ConfigError("include_quadruple must be a boolean")

    out_dir = data.get("out_dir", "runs")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a nonempty string")
    seed = _as_int(data.get("seed", 7), "seed")

    if experiment == "bounds" and any(k < 2.0 for k in k_F_ladder):
        raise ConfigError("bounds needs k_F at least 2 (log envelopes)")
    if experiment == "proposition2":
        if n < 2:
            raise ConfigError("proposition2 needs at least two impurities")
        if lambda_rule["kind"] != "scaled":
            raise ConfigError("proposition2 requires the scaled lambda rule")
        if len(t_list) < 3 or t_list[0] <= 0.0:
            raise ConfigError(
                "proposition2 needs at least three positive times to fit")

    raw = {
        SCHEMA_VERSION_KEY: CONFIG_VERSION, "experiment": experiment,
        "d": d, "L_ladder": list(L_ladder), "k_F_ladder": list(k_F_ladder),
        "lambda_rule": lambda_rule, "n": n, "spec_id": spec_id,
        "spec_R": spec_R, "w": w, "xi0": xi0, "t_list": list(t_list),
        "tolerances": tolerances, "m_max": m_max, "cutoff_rule": cutoff_rule,
        "M_imp": M_imp, "r_max": r_max, "r_points": r_points,
        "include_quadruple": include_quadruple, "out_dir": out_dir,
        "seed": seed,
    }
    return ExperimentConfig(
        experiment=experiment, d=d, L_ladder=L_ladder, k_F_ladder=k_F_ladder,
        lambda_rule=lambda_rule, n=n, spec_id=spec_id, spec_R=spec_R, w=w,
        xi0=xi0, t_list=t_list, tolerances=tolerances, m_max=m_max,
        cutoff_rule=cutoff_rule, M_imp=M_imp, r_max=r_max, r_points=r_points,
        include_quadruple=include_quadruple, out_dir=out_dir, seed=seed,
        raw=raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """Run identity: hash of the resolved config minus the output path."""
    payload = {k: v for k, v in cfg.raw.items() if k != "out_dir"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- config resolution helpers -----------------------------------------------


def _resolve_spec(cfg: ExperimentConfig):
    return spec_by_id(cfg.spec_id, cfg.spec_R)


def _resolve_w(cfg: ExperimentConfig, L: float):
    if cfg.w["kind"] == "zero":
        return zero_impurity()
    amplitude = cfg.w["amplitude"]
    wavenumber = cfg.w["wavenumber"]
    k = _TWO_PI * wavenumber / L

    def profile(r):
        return amplitude * np.cos(k * np.asarray(r, dtype=float))

    return bounded_impurity(profile, sample_max=abs(amplitude))


def lam_for(cfg: ExperimentConfig, k_F: float) -> float:
    """Coupling at one ladder rung: fixed, or k_F^((2-d)/2) so that the
    coupling-squared times the mediated scale stays k_F-independent."""
    if cfg.lambda_rule["kind"] == "fixed":
        return cfg.lambda_rule["value"]
    return float(k_F) ** (0.5 * (2.0 - cfg.d))


def cutoff_for(cfg: ExperimentConfig, k_F: float) -> float:
    rule = cfg.cutoff_rule
    if rule["kind"] == "multiplier":
        return rule["value"] * k_F
    if rule["kind"] == "offset":
        return k_F + rule["value"]
    return max(rule["multiplier"] * k_F, k_F + rule["offset"])


def _sep_grid(cfg: ExperimentConfig, L: float) -> np.ndarray:
    """Separation grid for dynamics tables: covers the maximal wrapped
    pair distance 0.5 L sqrt(d) with 0.05 spacing."""
    step = 0.05
    m = int(math.ceil((0.5 * L * math.sqrt(cfg.d) + 1.0) / step))
    return np.linspace(0.0, m * step, m + 1)


def build_xi0(cfg: ExperimentConfig, L: float,
              centers=None) -> effective.ImpurityState:
    """Initial impurity state from the config family; explicit `centers`
    (used by the proposition2 auto-placement) override the config."""
    n, d, M = cfg.n, cfg.d, cfg.M_imp
    family = cfg.xi0["family"]
    if family == "packet":
        return effective.momentum_packet_state(
            n, d, L, M, width=cfg.xi0["width"],
            centers=cfg.xi0.get("centers"))
    if family == "plane":
        modes = np.asarray(cfg.xi0["modes"], dtype=int)
        amp = np.zeros((M,) * (n * d), dtype=complex)
        amp[tuple(int(z) % M for z in modes.ravel())] = 1.0
        return effective.ImpurityState(n=n, d=d, L=L, M_imp=M, amplitudes=amp)
    if centers is None:
        centers = cfg.xi0.get("centers")
    if centers is None:
        raise ConfigError("gaussian xi0 needs centers")
    return effective.gaussian_product_state(
        n, d, L, M, centers=centers, width=cfg.xi0.get("width", 0.5),
        momenta=cfg.xi0.get("momenta"))


# --- run bookkeeping ---------------------------------------------------------


def _versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__,
            "polaronlab": __version__}


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])
    os.replace(tmp, path)


class _Progress:
    """Per-run store of completed grid points, saved after every point so
    an interrupted run resumes where it stopped."""

    def __init__(self, run_dir: Path, run_hash: str):
        self.path = run_dir / "progress.json"
        self.run_hash = run_hash
        self.points = {}
        self.resumed = 0
        if self.path.exists():
            try:
                with open(self.path) as fh:
                    stored = json.load(fh)
            except (OSError, json.JSONDecodeError):
                stored = {}
            if stored.get("hash") == run_hash:
                self.points = dict(stored.get("points", {}))

    def get(self, key: str):
        row = self.points.get(key)
        if row is not None:
            self.resumed += 1
        return row

    def put(self, key: str, row: dict) -> None:
        self.points[key] = row
        _write_json(self.path, {"hash": self.run_hash, "points": self.points})


@dataclass(frozen=True)
class RunResult:
    experiment: str
    run_hash: str
    run_dir: Path
    report: dict
    outputs: tuple
    resumed_points: int
    seconds: float


def _guard(fn, *args, **kwargs):
    """Convert library errors into the harness failure taxonomy."""
    try:
        return fn(*args, **kwargs)
    except ValueError as exc:
        if str(exc).startswith("basis too large"):
            raise ResourceCapError(str(exc)) from exc
        raise NumericalFailure(str(exc)) from exc
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise NumericalFailure(str(exc)) from exc


def _finish(cfg: ExperimentConfig, run_dir: Path, run_hash: str, report: dict,
            outputs: list, progress: _Progress, threads: int,
            t0: float) -> RunResult:
    seconds = perf_counter() - t0
    _write_json(run_dir / "report.json", report)
    manifest = {
        "experiment": cfg.experiment, "hash": run_hash, "config": cfg.raw,
        "versions": _versions(), "threads": threads,
        "completed_points": len(progress.points),
        "resumed_points": progress.resumed,
        "outputs": sorted(outputs + ["report.json"]),
        "timings": {"total_seconds": seconds},
    }
    _write_json(run_dir / "manifest.json", manifest)
    return RunResult(experiment=cfg.experiment, run_hash=run_hash,
                     run_dir=run_dir, report=report,
                     outputs=tuple(sorted(outputs + ["report.json"])),
                     resumed_points=progress.resumed, seconds=seconds)


# --- experiment: potential ---------------------------------------------------


def _shape_summary(r_grid: np.ndarray, profile: np.ndarray) -> dict:
    """Sign structure of one scaled profile: first zero crossing, the
    sup beyond it, and the number of sign changes (oscillation count)."""
    peak = float(np.abs(profile).max(initial=0.0))
    if peak == 0.0:
        return {"r0_value": 0.0, "first_zero": None, "tail_sup": 0.0,
                "sign_changes": 0}
    tiny = 1e-12 * peak
    signs = np.where(np.abs(profile) <= tiny, 0, np.sign(profile))
    nz = signs[signs != 0]
    changes = int((nz[1:] != nz[:-1]).sum())
    nonpos = np.flatnonzero(profile <= tiny)
    if nonpos.size and nonpos[0] > 0:
        first_zero = float(r_grid[nonpos[0]])
        tail_sup = float(np.abs(profile[nonpos[0]:]).max())
    else:
        first_zero, tail_sup = None, 0.0
    return {"r0_value": float(profile[0]), "first_zero": first_zero,
            "tail_sup": tail_sup, "sign_changes": changes}


def run_potential(cfg: ExperimentConfig, run_dir: Path, run_hash: str,
                  threads: int = 1) -> RunResult:
    t0 = perf_counter()
    spec = _resolve_spec(cfg)
    progress = _Progress(run_dir, run_hash)
    r_grid = np.linspace(0.0, cfg.r_max, cfg.r_points)
    outputs = []
    for k_F in cfg.k_F_ladder:
        name = f"table_kF{k_F:g}.csv"
        key = f"kF={k_F!r}"
        if progress.get(key) is None or not (run_dir / name).exists():
            table = _guard(potential_table, k_F, cfg.d, spec, r_grid=r_grid,
                           rel_tol=cfg.tolerances["quad_rel"])
            table.to_csv(run_dir / name)
            progress.put(key, {"file": name})
        outputs.append(name)

    scan = _guard(lemma1_scan, cfg.k_F_ladder, cfg.d, spec,
                  r_max=cfg.r_max, grid_points=cfg.r_points,
                  rel_tol=cfg.tolerances["quad_rel"])
    sup = scan.sup_abs
    report = {
        "spec": spec_label(spec), "d": cfg.d,
        "k_F_ladder": list(cfg.k_F_ladder),
        "c_probe": scan.c_probe, "core_ok": bool(scan.core_ok),
        "sup_abs": [float(v) for v in sup],
        "core_inf": [float(v) for v in scan.core_inf],
        "doubling_diffs": [float(v) for v in scan.doubling_diffs],
        "sup_ratio": (float(sup.max() / sup.min()) if sup.min() > 0.0
                      else None),
        "shape": {f"{k_F:g}": _shape_summary(scan.r_grid, scan.profiles[i])
                  for i, k_F in enumerate(cfg.k_F_ladder)},
    }
    return _finish(cfg, run_dir, run_hash, report, outputs, progress,
                   threads, t0)


# --- experiment: scaling -----------------------------------------------------


def run_scaling(cfg: ExperimentConfig, run_dir: Path, run_hash: str,
                threads: int = 1) -> RunResult:
    t0 = perf_counter()
    spec = _resolve_spec(cfg)
    progress = _Progress(run_dir, run_hash)
    rows = []
    for L in cfg.L_ladder:
        w_spec = _resolve_w(cfg, L)
        xi0 = build_xi0(cfg, L)
        r_grid = _sep_grid(cfg, L)
        for k_F in cfg.k_F_ladder:
            lam = lam_for(cfg, k_F)
            lattice = build_lattice(cfg.d, L, cutoff_for(cfg, k_F))
            ball = fermi_ball(lattice, k_F)
            table = _guard(potential_table, k_F, cfg.d, spec, r_grid=r_grid,
                           rel_tol=cfg.tolerances["quad_rel"])
            for t in cfg.t_list:
                key = f"L={L!r}|kF={k_F!r}|t={t!r}|run"
                row = progress.get(key)
                if row is None:
                    res = _guard(fock.theorem1_deficit, lattice, ball, xi0,
                                 lam, t, spec, table, m_max=cfg.m_max,
                                 w_spec=w_spec,
                                 krylov_tol=cfg.tolerances["krylov_tol"])
                    pred = (big_gamma(cfg.d, k_F, lam, t)["value"]
                            if k_F >= 2.0 else math.nan)
                    row = {"kind": "run", "L": L, "k_F": k_F, "lam": lam,
                           "t": t, "deficit": res.value,
                           "dropped_weight": res.dropped_weight,
                           "big_gamma": pred, "dimension": res.dimension}
                    progress.put(key, row)
                rows.append(row)
            t_ctrl = max(cfg.t_list)
            key = f"L={L!r}|kF={k_F!r}|t={t_ctrl!r}|control"
            row = progress.get(key)
            if row is None:
                res = _guard(fock.theorem1_deficit, lattice, ball, xi0, 0.0,
                             t_ctrl, spec, None, m_max=cfg.m_max,
                             w_spec=w_spec,
                             krylov_tol=cfg.tolerances["krylov_tol"])
                row = {"kind": "control", "L": L, "k_F": k_F, "lam": 0.0,
                       "t": t_ctrl, "deficit": res.value,
                       "dropped_weight": res.dropped_weight,
                       "big_gamma": math.nan, "dimension": res.dimension}
                progress.put(key, row)
            rows.append(row)

    header = ("kind", "L", "k_F", "lambda", "t", "deficit", "dropped_weight",
              "big_gamma", "dimension")
    _write_csv(run_dir / "deficits.csv", header,
               [(r["kind"], float(r["L"]), float(r["k_F"]), float(r["lam"]),
                 float(r["t"]), float(r["deficit"]),
                 float(r["dropped_weight"]), float(r["big_gamma"]),
                 int(r["dimension"])) for r in rows])

    control_max = max((r["deficit"] for r in rows if r["kind"] == "control"),
                      default=0.0)
    if control_max > cfg.tolerances["control_tol"]:
        raise NumericalFailure(
            f"zero-coupling control deficit {control_max:.3e} exceeds "
            f"{cfg.tolerances['control_tol']:.1e}")

    report = {"spec": spec_label(_resolve_spec(cfg)), "d": cfg.d,
              "control_max": float(control_max),
              "slope_reference": -0.5, "curves": []}
    for L in cfg.L_ladder:
        for t in cfg.t_list:
            if t <= 0.0:
                continue
            pts = [(r["k_F"], r["deficit"]) for r in rows
                   if r["kind"] == "run" and r["L"] == L and r["t"] == t]
            ks = np.array([p[0] for p in pts])
            vals = np.array([p[1] for p in pts])
            curve = {"L": L, "t": t,
                     "deficits": [float(v) for v in vals],
                     "monotone_decreasing": bool(np.all(np.diff(vals) < 0.0))}
            if len(pts) >= 2 and (vals > 0.0).all():
                slope = float(np.polyfit(np.log(ks), np.log(vals), 1)[0])
                curve["loglog_slope"] = slope
            report["curves"].append(curve)
    return _finish(cfg, run_dir, run_hash, report, ["deficits.csv"],
                   progress, threads, t0)


# --- experiment: bounds ------------------------------------------------------


def run_bounds(cfg: ExperimentConfig, run_dir: Path, run_hash: str,
               threads: int = 1) -> RunResult:
    t0 = perf_counter()
    spec = _resolve_spec(cfg)
    progress = _Progress(run_dir, run_hash)
    rows = []
    for L in cfg.L_ladder:
        for k_F in cfg.k_F_ladder:
            key = f"L={L!r}|kF={k_F!r}"
            stored = progress.get(key)
            if stored is None:
                rep = _guard(bound_report, cfg.d, k_F, L, spec,
                             cutoff=cutoff_for(cfg, k_F),
                             tail_rel=cfg.tolerances["tail_rel"],
                             include_quadruple=cfg.include_quadruple)
                stored = {"records": rep.records()}
                progress.put(key, stored)
            rows.extend(stored["records"])

    header = ("sum_id", "d", "k_F", "L", "cutoff", "spec", "value",
              "predicted", "ratio")
    _write_csv(run_dir / "sums.csv", header,
               [tuple(rec[h] for h in header) for rec in rows])

    L_max = max(cfg.L_ladder)
    band = cfg.tolerances["ratio_band"]
    stability = {}
    for sid in SUM_IDS:
        ratios = [rec["ratio"] for rec in rows
                  if rec["sum_id"] == sid and rec["L"] == L_max
                  and math.isfinite(rec["ratio"]) and rec["ratio"] > 0.0]
        if ratios:
            spread = max(ratios) / min(ratios)
            stability[sid] = {"ratio_spread": float(spread),
                              "stable": bool(spread <= band)}
        else:
            stability[sid] = {"ratio_spread": None, "stable": None}
    doubling = {}
    if len(cfg.L_ladder) >= 2:
        L_prev = cfg.L_ladder[-2]
        for sid in SUM_IDS:
            pairs = []
            for k_F in cfg.k_F_ladder:
                a = [rec["value"] for rec in rows if rec["sum_id"] == sid
                     and rec["L"] == L_prev and rec["k_F"] == k_F]
                b = [rec["value"] for rec in rows if rec["sum_id"] == sid
                     and rec["L"] == L_max and rec["k_F"] == k_F]
                if a and b and math.isfinite(a[0]) and math.isfinite(b[0]) \
                        and b[0] != 0.0:
                    pairs.append(abs(b[0] - a[0]) / abs(b[0]))
            doubling[sid] = float(max(pairs)) if pairs else None
    report = {"spec": spec_label(spec), "d": cfg.d,
              "ratio_band": band, "stability": stability,
              "L_doubling_rel": doubling}
    return _finish(cfg, run_dir, run_hash, report, ["sums.csv"],
                   progress, threads, t0)


# --- experiment: proposition2 ------------------------------------------------


def _core_centers(cfg: ExperimentConfig, L: float, c_probe: float):
    """Place the impurities on a line through the box center so that all
    pairwise separations stay inside the probed attraction core."""
    if c_probe <= 0.0:
        raise NumericalFailure(
            "probed attraction core is empty; cannot place the pair state")
    n, d = cfg.n, cfg.d
    spread = min(0.5 * c_probe, 0.25 * L)
    offsets = (np.arange(n) / (n - 1) - 0.5) * spread
    centers = np.full((n, d), 0.5 * L)
    centers[:, 0] += offsets
    return centers


def run_proposition2(cfg: ExperimentConfig, run_dir: Path, run_hash: str,
                     threads: int = 1) -> RunResult:
    t0 = perf_counter()
    spec = _resolve_spec(cfg)
    progress = _Progress(run_dir, run_hash)
    rows = []
    curves = []
    for L in cfg.L_ladder:
        w_spec = _resolve_w(cfg, L)
        r_grid = _sep_grid(cfg, L)
        for k_F in cfg.k_F_ladder:
            lam = lam_for(cfg, k_F)
            table = _guard(potential_table, k_F, cfg.d, spec, r_grid=r_grid,
                           rel_tol=cfg.tolerances["quad_rel"])
            centers = cfg.xi0.get("centers")
            if cfg.xi0["family"] == "gaussian" and centers is None:
                scan = _guard(lemma1_scan, [k_F], cfg.d, spec,
                              r_max=float(r_grid[-1]),
                              grid_points=len(r_grid),
                              rel_tol=cfg.tolerances["quad_rel"])
                centers = _core_centers(cfg, L, scan.c_probe)
            xi0 = build_xi0(cfg, L, centers=centers)
            c0 = effective.mediated_pair_expectation(xi0, table)
            if c0 <= 0.0:
                raise NumericalFailure(
                    "initial state violates the attraction-window premise: "
                    "its mediated pair expectation is not positive, so the "
                    "linear splitting law does not apply")
            H = effective.build_effective_hamiltonian(
                cfg.n, cfg.d, L, cfg.M_imp, lam, table, w_spec,
                variant="h_n")
            H_tilde = effective.build_effective_hamiltonian(
                cfg.n, cfg.d, L, cfg.M_imp, lam, table, w_spec,
                variant="h_tilde")
            deltas = []
            for t in cfg.t_list:
                key = f"L={L!r}|kF={k_F!r}|t={t!r}"
                row = progress.get(key)
                if row is None:
                    a = effective.evolve_effective(xi0, H, t)
                    b = effective.evolve_effective(xi0, H_tilde, t)
                    delta = float(np.linalg.norm(
                        a.amplitudes - b.amplitudes))
                    row = {"L": L, "k_F": k_F, "t": t, "delta": delta}
                    progress.put(key, row)
                rows.append(row)
                deltas.append(row["delta"])
            ts = np.array(cfg.t_list)
            design = np.stack([ts, ts**2], axis=1)
            coef, *_ = np.linalg.lstsq(design, np.array(deltas), rcond=None)
            curves.append({
                "L": L, "k_F": k_F, "c0": float(c0),
                "linear_coef": float(coef[0]),
                "quadratic_coef": float(coef[1]),
                "linear_over_c0": float(coef[0] / c0),
                "centers": np.asarray(centers, dtype=float).tolist(),
            })

    _write_csv(run_dir / "splitting.csv", ("L", "k_F", "t", "delta"),
               [(float(r["L"]), float(r["k_F"]), float(r["t"]),
                 float(r["delta"])) for r in rows])
    report = {"spec": spec_label(spec), "d": cfg.d, "curves": curves}
    return _finish(cfg, run_dir, run_hash, report, ["splitting.csv"],
                   progress, threads, t0)


# --- certification and planning ----------------------------------------------


def run_certify(cfg: ExperimentConfig, run_dir: Path, run_hash: str,
                threads: int = 1) -> RunResult:
    """Assumption certificate for the configured fermion potential."""
    t0 = perf_counter()
    spec = _resolve_spec(cfg)
    progress = _Progress(run_dir, run_hash)
    try:
        cert = certify_assumptions(spec)
    except ValueError as exc:
        raise NumericalFailure(str(exc)) from exc
    report = {"spec": spec_label(spec), "certificate": cert,
              "w": cfg.w}
    return _finish(cfg, run_dir, run_hash, report, [], progress, threads, t0)


def _basis_dimension(cfg: ExperimentConfig, k_F: float, L: float) -> dict:
    """Closed-form size of one momentum block without enumerating it."""
    lattice = build_lattice(cfg.d, L, cutoff_for(cfg, k_F))
    ball = fermi_ball(lattice, k_F)
    Nb = ball.N
    No = lattice.mode_count - Nb
    configs = sum(math.comb(Nb, m) * math.comb(No, m)
                  for m in range(cfg.m_max + 1))
    fiber = cfg.M_imp ** (cfg.d * (cfg.n - 1))
    blocks = cfg.M_imp ** cfg.d
    return {"k_F": k_F, "L": L, "modes": lattice.mode_count,
            "ball": Nb, "outside": No, "configs": configs,
            "block_dimension": configs * fiber,
            "total_dimension": configs * fiber * blocks,
            "apply_flops_estimate": configs * fiber * blocks
            * (Nb + No) * cfg.n}


def plan(cfg: ExperimentConfig) -> dict:
    """Dry-run summary: grid shape and cost estimates, no computation."""
    out = {"experiment": cfg.experiment, "hash": config_hash(cfg),
           "grid_points": 0}
    if cfg.experiment == "potential":
        out["grid_points"] = len(cfg.k_F_ladder)
        out["quadrature_points"] = len(cfg.k_F_ladder) * cfg.r_points
    elif cfg.experiment == "scaling":
        out["grid_points"] = (len(cfg.L_ladder) * len(cfg.k_F_ladder)
                              * (len(cfg.t_list) + 1))
        out["blocks"] = [_basis_dimension(cfg, k_F, L)
                         for L in cfg.L_ladder for k_F in cfg.k_F_ladder]
    elif cfg.experiment == "bounds":
        out["grid_points"] = len(cfg.L_ladder) * len(cfg.k_F_ladder)
        out["boxes"] = []
        for L in cfg.L_ladder:
            for k_F in cfg.k_F_ladder:
                lattice = build_lattice(cfg.d, L, cutoff_for(cfg, k_F))
                ball = fermi_ball(lattice, k_F)
                Nb = ball.N
                No = lattice.mode_count - Nb
                out["boxes"].append({"k_F": k_F, "L": L, "ball": Nb,
                                     "outside": No, "pairs": Nb * No})
    else:
        out["grid_points"] = (len(cfg.L_ladder) * len(cfg.k_F_ladder)
                              * len(cfg.t_list))
        out["state_size"] = cfg.M_imp ** (cfg.n * cfg.d)
    return out


_RUNNERS = {"potential": run_potential, "scaling": run_scaling,
            "bounds": run_bounds, "proposition2": run_proposition2}


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   threads: int = 1) -> RunResult:
    """Dispatch one experiment into its own hash-named directory."""
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    run_hash = config_hash(cfg)
    base = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    run_dir = base / f"{cfg.experiment}-{run_hash}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[cfg.experiment](cfg, run_dir, run_hash, threads=threads)


def run_certification(cfg: ExperimentConfig, out_dir=None,
                      threads: int = 1) -> RunResult:
    """Assumption certificate in its own directory, any experiment kind."""
    run_hash = config_hash(cfg)
    base = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    run_dir = base / f"certify-{run_hash}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_certify(cfg, run_dir, run_hash, threads=threads)
