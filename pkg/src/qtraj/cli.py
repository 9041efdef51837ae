"""Batch harness: config files, protocol dispatch, persistence, plot data.

Runs are described by flat key = value config files with one [run] section
naming the protocol and one section per protocol holding its parameters.
``qtraj run`` executes a config into an output directory; ``qtraj emit``
derives plot-ready CSV files from a finished run.  Exit codes: 0 on
success, 2 for an invalid config or command line, 3 for a numerical
failure during the run.

Every artifact is deterministic given (config, master_seed): trajectory
noise is keyed on (master_seed, trajectory_index) through the
counter-based stream, worker counts only change scheduling, and file
writes happen in index order on the main thread.  The manifest's
wall_clock_s line is the single entry that may differ between reruns.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .analysis import bloch_vector, phase_error_stats, survival_fit, wigner
from .errors import ConfigError, QtrajError
from .hilbert import (
    DensityMatrix,
    Operator,
    PureState,
    SpaceShape,
    basis_state,
    coherent_state,
    pauli,
)
from .feedback import (
    ZenoDragConfig,
    adaptive_phase_ensemble,
    cat_subspace_weight,
    half_parity_protocol,
    kerr_cat_stabilization,
    kerr_dark_alpha,
    oscillation_amplitude,
    rabi_ensemble,
    survival_fractions,
    zeno_blockade,
    zeno_escape_times,
)
from .models import KerrCatParams, adiabatic_elimination
from .sme import (
    LindbladModel,
    MeasurementChannel,
    WienerStream,
    ensemble_average,
    lindblad_propagate,
    simulate_ensemble,
    simulate_trajectory,
)

PROTOCOLS = ("trajectory", "ensemble", "rabi", "halfparity", "phase",
             "zeno-drag", "zeno-blockade", "kerrcat", "wigner")
QUANTITIES = ("bloch", "record", "fidelity", "wigner-slice", "survival",
              "phase-hist")

_REQUIRED = object()


# ---------------------------------------------------------------------------
# value formatting and CSV plumbing

def _fmt(value) -> str:
    """Canonical text for one config/CSV value; floats round-trip exactly."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header, rows) -> None:
    """Write a CSV table with a header row and LF line endings."""
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path: str):
    """Read back a CSV written by this module: (header, list of str rows)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigError("empty CSV file", path=path)
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def read_columns(path: str) -> dict[str, np.ndarray]:
    """Read a numeric CSV into {column name: float array}."""
    header, rows = read_csv(path)
    cols = np.array([[float(v) for v in row] for row in rows]).reshape(
        len(rows), len(header))
    return {name: cols[:, i] for i, name in enumerate(header)}


# ---------------------------------------------------------------------------
# config schema and parsing

@dataclass(frozen=True)
class _Key:
    parse: object
    default: object = _REQUIRED
    check: object = None  # value -> error string or None


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    # reject the silent truncation of float-looking values
    if any(ch in s for ch in ".eE") and not s.lstrip("+-").isdigit():
        raise ValueError(s)
    return int(s)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(s)


def _choice(*options):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(s)
        return s
    parse.options = options
    return parse


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be nonnegative"


def _efficiency(v):
    return None if 0.0 < v <= 1.0 else "must lie in (0, 1]"


def _at_least(n):
    return lambda v: None if v >= n else f"must be at least {n}"


_START = _choice("e", "g", "plus", "minus")

SCHEMAS: dict[str, dict[str, _Key]] = {
    "trajectory": {
        "omega_r": _Key(_float, 0.0),
        "gamma_d": _Key(_float, check=_nonneg),
        "eta": _Key(_float, 1.0, _efficiency),
        "phi": _Key(_float, 0.0),
        "duration": _Key(_float, check=_positive),
        "dt": _Key(_float, check=_positive),
        "thin": _Key(_int, 10, _at_least(1)),
        "start": _Key(_START, "plus"),
        "integrator": _Key(_choice("kraus", "ito"), "kraus"),
        "trajectory_index": _Key(_int, 0, _nonneg),
    },
    "ensemble": {
        "omega_r": _Key(_float, 2.0),
        "gamma_d": _Key(_float, check=_positive),
        "eta": _Key(_float, check=_efficiency),
        "phi": _Key(_float, 0.0),
        "duration": _Key(_float, check=_positive),
        "dt": _Key(_float, check=_positive),
        "n_trajectories": _Key(_int, check=_at_least(1)),
        "thin": _Key(_int, 10, _at_least(1)),
        "start": _Key(_START, "plus"),
        "integrator": _Key(_choice("kraus", "ito"), "kraus"),
        "save_records": _Key(_bool, True),
    },
    "rabi": {
        "omega_r": _Key(_float, check=_positive),
        "gamma_d": _Key(_float, check=_positive),
        "eta": _Key(_float, check=_efficiency),
        "gain": _Key(_float, check=lambda v: None if 0.0 <= v <= 2.0
                     else "must lie in [0, 2]"),
        "duration": _Key(_float, check=_positive),
        "dt": _Key(_float, check=_positive),
        "n_trajectories": _Key(_int, check=_at_least(1)),
        "feedback": _Key(_bool, True),
        "window": _Key(_float, None, _positive),
        "amp_t_start": _Key(_float, None, _nonneg),
        "amp_t_end": _Key(_float, None, _positive),
    },
    "halfparity": {
        "gamma": _Key(_float, check=_positive),
        "duration": _Key(_float, check=_positive),
        "dt": _Key(_float, check=_positive),
        "thin": _Key(_int, 10, _at_least(1)),
        "trajectory_index": _Key(_int, 0, _nonneg),
    },
    "phase": {
        "theta_true": _Key(_float),
        "duration": _Key(_float, check=_positive),
        "dt": _Key(_float, check=_positive),
        "eta": _Key(_float, check=_efficiency),
        "n_runs": _Key(_int, check=_at_least(1)),
        "delay_steps": _Key(_int, 0, _nonneg),
        "heterodyne": _Key(_bool, False),
        "cap_factor": _Key(_float, 200.0, _positive),
    },
    "zeno-drag": {
        "nu": _Key(_float, check=_nonneg),
        "gamma_d": _Key(_float, check=_positive),
        "duration": _Key(_float, check=_positive),
        "dt": _Key(_float, None, _positive),
        "n_trajectories": _Key(_int, check=_at_least(1)),
        "fit_t_start": _Key(_float, None, _positive),
        "fit_points": _Key(_int, 18, _at_least(5)),
    },
    "zeno-blockade": {
        "n_blocked": _Key(_int, check=_at_least(1)),
        "omega_r": _Key(_float, check=_nonneg),
        "gamma": _Key(_float, check=_nonneg),
        "drive": _Key(_float, check=_nonneg),
        "n_max": _Key(_int, check=_at_least(1)),
        "duration": _Key(_float, check=_positive),
        "n_times": _Key(_int, 41, _at_least(2)),
        "wigner_extent": _Key(_float, 0.0, _nonneg),
        "wigner_points": _Key(_int, 33, _at_least(3)),
    },
    "kerrcat": {
        "kerr": _Key(_float, check=_positive),
        "eps2": _Key(_float),
        "kappa1": _Key(_float, check=_nonneg),
        "kappa2": _Key(_float, None, _positive),
        "g2": _Key(_float, 0.0),
        "kappa_r": _Key(_float, 0.0, _nonneg),
        "n_max": _Key(_int, None, _at_least(4)),
        "duration": _Key(_float, check=_positive),
        "n_times": _Key(_int, 41, _at_least(2)),
        "start": _Key(_choice("vacuum", "cat"), "vacuum"),
    },
    "wigner": {
        "state": _Key(_choice("vacuum", "fock", "coherent", "cat")),
        "alpha_re": _Key(_float, 0.0),
        "alpha_im": _Key(_float, 0.0),
        "fock_n": _Key(_int, 0, _nonneg),
        "n_max": _Key(_int, check=_at_least(1)),
        "extent": _Key(_float, check=_positive),
        "points": _Key(_int, check=_at_least(3)),
    },
}

RUN_SCHEMA: dict[str, _Key] = {
    "protocol": _Key(_choice(*PROTOCOLS)),
    "master_seed": _Key(_int, 0, _nonneg),
    "out": _Key(str, None),
}


@dataclass
class RunConfig:
    """Validated description of one run."""

    protocol: str
    master_seed: int
    out: str | None
    params: dict = field(default_factory=dict)
    path: str = "<config>"

    def canonical_lines(self) -> list[str]:
        """Effective config as section.key = value lines, defaults applied.

        The output directory is a reproduction parameter, not physics, so
        it is omitted; feeding these lines back through parse_config
        reproduces the run bit for bit.
        """
        lines = [f"run.protocol = {self.protocol}",
                 f"run.master_seed = {self.master_seed}"]
        for name in sorted(self.params):
            value = self.params[name]
            if value is None:
                continue
            lines.append(f"{self.protocol}.{name} = {_fmt(value)}")
        return lines


def _parse_lines(text: str, path: str):
    """Split config text into {section: {key: (raw value, line number)}}."""
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    section_lines: dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ConfigError("empty section name", path=path, line=lineno)
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]",
                                  path=path, line=lineno)
            sections[current] = {}
            section_lines[current] = lineno
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", path=path, line=lineno)
        if current is None:
            raise ConfigError("key outside any [section]", path=path,
                              line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key before '='", path=path, line=lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key '{key}'", path=path, line=lineno)
        sections[current][key] = (value, lineno)
    return sections, section_lines


def _apply_schema(schema, entries, section, path):
    out = {}
    for key, (raw, lineno) in entries.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in [{section}]",
                              path=path, line=lineno)
        spec = schema[key]
        try:
            value = spec.parse(raw)
        except ValueError:
            options = getattr(spec.parse, "options", None)
            hint = f" (one of {', '.join(options)})" if options else ""
            raise ConfigError(f"bad value for '{key}': {raw!r}{hint}",
                              path=path, line=lineno) from None
        if spec.check is not None and value is not None:
            msg = spec.check(value)
            if msg:
                raise ConfigError(f"'{key}' {msg}", path=path, line=lineno)
        out[key] = value
    for key, spec in schema.items():
        if key not in out:
            if spec.default is _REQUIRED:
                raise ConfigError(
                    f"missing required key '{key}' in [{section}]", path=path)
            out[key] = spec.default
    return out


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    """Parse and validate a config; raises line-anchored ConfigError."""
    sections, section_lines = _parse_lines(text, path)
    if "run" not in sections:
        raise ConfigError("missing [run] section", path=path)
    run = _apply_schema(RUN_SCHEMA, sections["run"], "run", path)
    protocol = run["protocol"]
    for name in sections:
        if name not in ("run", protocol):
            raise ConfigError(f"unexpected section [{name}] for protocol "
                              f"'{protocol}'", path=path,
                              line=section_lines[name])
    params = _apply_schema(SCHEMAS[protocol], sections.get(protocol, {}),
                           protocol, path)
    return RunConfig(protocol=protocol, master_seed=run["master_seed"],
                     out=run["out"], params=params, path=path)


def read_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=path) from None
    return parse_config(text, path)


# ---------------------------------------------------------------------------
# manifest

def write_manifest(run_dir: str, config: RunConfig, seeds: list[str],
                   summary: list[tuple[str, object]],
                   wall_clock_s: float) -> str:
    """Write manifest.txt atomically; returns its path.

    wall_clock_s is the only line allowed to differ when the same run is
    repeated; everything else is a pure function of (config, master_seed).
    """
    lines = ["# qtraj run manifest",
             "format = 1",
             f"code_version = {__version__}",
             f"protocol = {config.protocol}",
             f"wall_clock_s = {wall_clock_s:.3f}",
             "",
             "[config]"]
    lines.extend(config.canonical_lines())
    lines.append("")
    lines.append("[seeds]")
    for i, seed in enumerate(seeds):
        lines.append(f"trajectory.{i:05d} = {seed}")
    lines.append("")
    lines.append("[summary]")
    for key, value in summary:
        lines.append(f"{key} = {_fmt(value)}")
    path = os.path.join(run_dir, "manifest.txt")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path: str) -> dict[str, dict[str, str]]:
    """Parse manifest.txt into {section: {key: value}}; header under ''."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    out: dict[str, dict[str, str]] = {"": {}}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            out.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", path=path, line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        out[current][key] = value
    return out


def manifest_to_config(path: str) -> RunConfig:
    """Rebuild the RunConfig echoed inside a manifest."""
    sections = read_manifest(path)
    if "config" not in sections:
        raise ConfigError("manifest has no [config] section", path=path)
    grouped: dict[str, list[str]] = {}
    for dotted, value in sections["config"].items():
        if "." not in dotted:
            raise ConfigError(f"bad config echo key '{dotted}'", path=path)
        section, key = dotted.split(".", 1)
        grouped.setdefault(section, []).append(f"{key} = {value}")
    text = "\n".join(f"[{name}]\n" + "\n".join(lines)
                     for name, lines in grouped.items())
    return parse_config(text, path=path)


# ---------------------------------------------------------------------------
# shared state and model builders

_QUBIT = SpaceShape((2,))
_START_STATES = {
    "e": np.array([1.0, 0.0], dtype=complex),
    "g": np.array([0.0, 1.0], dtype=complex),
    "plus": np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0),
    "minus": np.array([1.0, -1.0], dtype=complex) / math.sqrt(2.0),
}
_PSI_PLUS = np.array([0.0, 1.0, 1.0, 0.0], dtype=complex) / math.sqrt(2.0)


def _qubit_model(omega_r: float, gamma_d: float, eta: float,
                 phi: float) -> LindbladModel:
    h = Operator(_QUBIT, 0.5 * omega_r * pauli("y").data)
    channels = []
    if gamma_d > 0.0:
        c = Operator(_QUBIT, math.sqrt(gamma_d / 2.0) * pauli("z").data)
        channels.append(MeasurementChannel(c=c, eta=eta, phi=phi))
    return LindbladModel(H=h, channels=channels)


def _start_state(name: str) -> DensityMatrix:
    amp = _START_STATES[name]
    return DensityMatrix(_QUBIT, np.outer(amp, amp.conj()))


def _write_states(run_dir: str, times, states) -> None:
    """states.csv in long format: one row per (time, matrix entry)."""
    rows = []
    for t, state in zip(times, states):
        mat = (np.outer(state.amplitudes, state.amplitudes.conj())
               if isinstance(state, PureState) else state.data)
        d = mat.shape[0]
        for r in range(d):
            for c in range(d):
                rows.append((t, r, c, mat[r, c].real, mat[r, c].imag))
    write_csv(os.path.join(run_dir, "states.csv"),
              ("t_us", "row", "col", "re", "im"), rows)


def read_states(run_dir: str):
    """Read states.csv back into (times, [DensityMatrix])."""
    cols = read_columns(os.path.join(run_dir, "states.csv"))
    d = int(cols["row"].max()) + 1
    per = d * d
    n = len(cols["t_us"]) // per
    times = cols["t_us"][::per]
    mats = (cols["re"] + 1j * cols["im"]).reshape(n, d, d)
    shape = SpaceShape((d,))
    return times, [DensityMatrix(shape, m) for m in mats]


def _write_record_files(run_dir: str, records: list, dt: float) -> None:
    rec_dir = os.path.join(run_dir, "records")
    os.makedirs(rec_dir, exist_ok=True)
    for rec in records:
        if rec.records is None:
            continue
        n_steps, n_ch = rec.records.shape
        header = ("t_us",) + tuple(f"v{i}" for i in range(n_ch))
        t_end = (np.arange(n_steps) + 1) * dt
        rows = [(t_end[k],) + tuple(rec.records[k]) for k in range(n_steps)]
        write_csv(os.path.join(
            rec_dir, f"traj_{rec.trajectory_index:05d}.csv"), header, rows)


def _seed_labels(master_seed: int, n: int) -> list[str]:
    # trajectory j draws from the counter stream keyed (master_seed, j)
    return [f"{master_seed}:{j}" for j in range(n)]


# ---------------------------------------------------------------------------
# protocol runners; each returns (seed labels, summary rows)

def _run_trajectory(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    model = _qubit_model(p["omega_r"], p["gamma_d"], p["eta"], p["phi"])
    rho0 = _start_state(p["start"])
    if not model.channels:
        # closed evolution: propagate exactly instead of stepping
        n_steps = int(round(p["duration"] / p["dt"]))
        idx = np.arange(0, n_steps + 1, p["thin"])
        if idx[-1] != n_steps:
            idx = np.append(idx, n_steps)
        times = idx * p["dt"]
        states = lindblad_propagate(model, rho0, times)
        _write_states(run_dir, times, states)
        final = states[-1]
        seeds = []
    else:
        stream = WienerStream(config.master_seed, p["trajectory_index"])
        rec = simulate_trajectory(model, p["duration"], p["dt"], stream=stream,
                                  integrator=p["integrator"], thin=p["thin"],
                                  rho0=rho0)
        _write_states(run_dir, rec.state_times, rec.states)
        _write_record_files(run_dir, [rec], p["dt"])
        final = rec.states[-1]
        seeds = [f"{config.master_seed}:{p['trajectory_index']}"]
    bloch = bloch_vector(final)
    summary = [("final_x", bloch.x), ("final_y", bloch.y),
               ("final_z", bloch.z)]
    return seeds, summary


def _run_ensemble(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    model = _qubit_model(p["omega_r"], p["gamma_d"], p["eta"], p["phi"])
    rho0 = _start_state(p["start"])
    records = simulate_ensemble(model, p["duration"], p["dt"],
                                config.master_seed, p["n_trajectories"], rho0,
                                jobs=jobs, integrator=p["integrator"],
                                thin=p["thin"],
                                store_records=p["save_records"])
    times, means = ensemble_average(records)
    reference = lindblad_propagate(model, rho0, times)
    mean_bloch = [bloch_vector(s) for s in means]
    ref_bloch = [bloch_vector(s) for s in reference]
    write_csv(os.path.join(run_dir, "mean_bloch.csv"), ("t_us", "x", "y", "z"),
              [(t, b.x, b.y, b.z) for t, b in zip(times, mean_bloch)])
    write_csv(os.path.join(run_dir, "lindblad_bloch.csv"),
              ("t_us", "x", "y", "z"),
              [(t, b.x, b.y, b.z) for t, b in zip(times, ref_bloch)])
    if p["save_records"]:
        _write_record_files(run_dir, records, p["dt"])
    gap_z = max(abs(a.z - b.z) for a, b in zip(mean_bloch, ref_bloch))
    gap_x = max(abs(a.x - b.x) for a, b in zip(mean_bloch, ref_bloch))
    summary = [("n_trajectories", p["n_trajectories"]),
               ("max_gap_z", gap_z), ("max_gap_x", gap_x)]
    return _seed_labels(config.master_seed, p["n_trajectories"]), summary


def _run_rabi(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    times, mean_z = rabi_ensemble(p["omega_r"], p["gamma_d"], p["eta"],
                                  p["gain"], p["duration"], p["dt"],
                                  config.master_seed, p["n_trajectories"],
                                  feedback=p["feedback"], window=p["window"])
    write_csv(os.path.join(run_dir, "mean_z.csv"), ("t_us", "mean_sz"),
              list(zip(times, mean_z)))
    t0 = p["amp_t_start"] if p["amp_t_start"] is not None else 0.95 * p["duration"]
    t1 = p["amp_t_end"] if p["amp_t_end"] is not None else p["duration"]
    amp = oscillation_amplitude(times, mean_z, p["omega_r"], t0, t1)
    summary = [("n_trajectories", p["n_trajectories"]),
               ("feedback", p["feedback"]),
               ("steady_amplitude", amp),
               ("amp_window_start", t0), ("amp_window_end", t1)]
    return _seed_labels(config.master_seed, p["n_trajectories"]), summary


def _run_halfparity(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    rec = half_parity_protocol(p["gamma"], p["duration"], p["dt"],
                               master_seed=config.master_seed,
                               trajectory_index=p["trajectory_index"],
                               thin=p["thin"])
    _write_states(run_dir, rec.state_times, rec.states)
    _write_record_files(run_dir, [rec], p["dt"])
    fids = np.abs(rec.states_data @ _PSI_PLUS.conj()) ** 2
    write_csv(os.path.join(run_dir, "fidelity.csv"),
              ("t_us", "gamma_t", "fidelity"),
              [(t, p["gamma"] * t, f)
               for t, f in zip(rec.state_times, fids)])
    summary = [("fidelity_final", float(fids[-1])),
               ("gamma_t_final", p["gamma"] * p["duration"])]
    return [f"{config.master_seed}:{p['trajectory_index']}"], summary


def _run_phase(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    res = adaptive_phase_ensemble(p["theta_true"], p["duration"], p["dt"],
                                  p["eta"], config.master_seed, p["n_runs"],
                                  delay_steps=p["delay_steps"],
                                  heterodyne=p["heterodyne"],
                                  cap_factor=p["cap_factor"])
    write_csv(os.path.join(run_dir, "estimates.csv"), ("run", "estimate"),
              list(enumerate(res.estimates)))
    summary = [("n_runs", p["n_runs"]),
               ("mode", "heterodyne" if p["heterodyne"] else "adaptive")]
    if p["n_runs"] >= 100:  # the circular-variance scorer needs real statistics
        summary.append(("circular_variance",
                        phase_error_stats(res.estimates, p["theta_true"])))
    return _seed_labels(config.master_seed, p["n_runs"]), summary


def _run_zeno_drag(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    cfg = ZenoDragConfig(nu=p["nu"], gamma_d=p["gamma_d"], eta=1.0,
                         duration=p["duration"])
    esc = zeno_escape_times(cfg, config.master_seed, p["n_trajectories"],
                            dt=p["dt"])
    write_csv(os.path.join(run_dir, "escape_times.csv"),
              ("trajectory", "t_escape_us"), list(enumerate(esc)))
    t0 = (p["fit_t_start"] if p["fit_t_start"] is not None
          else 0.15 * p["duration"])
    grid = np.linspace(t0, p["duration"], p["fit_points"])
    frac = survival_fractions(esc, grid)
    write_csv(os.path.join(run_dir, "survival.csv"), ("t_us", "fraction"),
              list(zip(grid, frac)))
    n_escaped = int(np.sum(~np.isnan(esc)))
    summary = [("n_trajectories", p["n_trajectories"]),
               ("n_escaped", n_escaped)]
    if p["nu"] > 0.0:
        fit = survival_fit(grid, frac, p["n_trajectories"])
        summary += [("fitted_rate", fit.rate), ("rate_ci_low", fit.ci_low),
                    ("rate_ci_high", fit.ci_high),
                    ("target_rate", p["nu"] ** 2 / p["gamma_d"])]
    # the whole batch draws from one per-step stream keyed (master_seed, 0)
    return [f"{config.master_seed}:0 (batched per step)"], summary


def _run_zeno_blockade(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    res = zeno_blockade(p["n_blocked"], p["omega_r"], p["gamma"], p["drive"],
                        p["n_max"], p["duration"], n_times=p["n_times"])
    _write_states(run_dir, res.times, res.states)
    nb = p["n_blocked"]
    rows = []
    for t, state in zip(res.times, res.states):
        pn = np.real(np.diag(state.data))
        rows.append((t, float(pn[:nb].sum()), float(pn[nb:].sum())))
    write_csv(os.path.join(run_dir, "blockade.csv"),
              ("t_us", "p_below", "p_blocked_plus"), rows)
    summary = [("max_p_blocked_plus", max(r[2] for r in rows))]
    if p["wigner_extent"] > 0.0:
        grid = np.linspace(-p["wigner_extent"], p["wigner_extent"],
                           p["wigner_points"])
        w_min = min(float(wigner(s, grid).values.min()) for s in res.states)
        summary.append(("min_wigner", w_min))
    return [], summary


def _run_kerrcat(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    params = KerrCatParams(K=p["kerr"], eps2=p["eps2"], g2=p["g2"],
                           kappa_r=p["kappa_r"])
    kappa2 = p["kappa2"]
    if kappa2 is None:
        kappa2 = adiabatic_elimination(params).kappa2
    alpha = kerr_dark_alpha(params, kappa2)
    rho0 = None
    n_max = p["n_max"]
    if p["start"] == "cat":
        if n_max is None:
            a = abs(alpha)
            n_max = int(math.ceil(a * a + 5.0 * a + 4.0))
        amp = (coherent_state(alpha, n_max).amplitudes
               + coherent_state(-alpha, n_max).amplitudes)
        amp = amp / np.linalg.norm(amp)
        rho0 = DensityMatrix(SpaceShape((n_max + 1,)), np.outer(amp, amp.conj()))
    res = kerr_cat_stabilization(params, p["kappa1"], p["duration"],
                                 kappa2=p["kappa2"], n_max=n_max,
                                 n_times=p["n_times"], rho0=rho0)
    _write_states(run_dir, res.times, res.states)
    d = res.states[0].shape.dim
    parity_op = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    rows = []
    for t, state in zip(res.times, res.states):
        par = float(np.real(np.diag(state.data)) @ parity_op)
        rows.append((t, par, cat_subspace_weight(state, alpha)))
    write_csv(os.path.join(run_dir, "parity.csv"),
              ("t_us", "parity", "subspace_weight"), rows)
    summary = [("alpha_re", alpha.real), ("alpha_im", alpha.imag),
               ("kappa2", kappa2),
               ("parity_final", rows[-1][1]),
               ("weight_final", rows[-1][2])]
    return [], summary


def _run_wigner(config: RunConfig, run_dir: str, jobs: int):
    p = config.params
    n_max = p["n_max"]
    shape = SpaceShape((n_max + 1,))
    alpha = complex(p["alpha_re"], p["alpha_im"])
    if p["state"] == "vacuum":
        state = basis_state(shape, 0)
    elif p["state"] == "fock":
        if p["fock_n"] > n_max:
            raise ConfigError(f"fock_n {p['fock_n']} exceeds n_max {n_max}",
                              path=config.path)
        state = basis_state(shape, p["fock_n"])
    elif p["state"] == "coherent":
        state = coherent_state(alpha, n_max)
    else:
        amp = (coherent_state(alpha, n_max).amplitudes
               + coherent_state(-alpha, n_max).amplitudes)
        state = PureState(shape, amp / np.linalg.norm(amp))
    grid = np.linspace(-p["extent"], p["extent"], p["points"])
    wg = wigner(state, grid)
    rows = [(re, im, wg.values[i, j])
            for i, re in enumerate(wg.re_axis)
            for j, im in enumerate(wg.im_axis)]
    write_csv(os.path.join(run_dir, "wigner.csv"), ("re", "im", "w"), rows)
    _write_states(run_dir, [0.0], [state])
    center = float(wg.values[p["points"] // 2, p["points"] // 2])
    summary = [("center_w", center), ("integral", wg.integral()),
               ("extent_warning", wg.extent_warning)]
    return [], summary


_RUNNERS = {
    "trajectory": _run_trajectory,
    "ensemble": _run_ensemble,
    "rabi": _run_rabi,
    "halfparity": _run_halfparity,
    "phase": _run_phase,
    "zeno-drag": _run_zeno_drag,
    "zeno-blockade": _run_zeno_blockade,
    "kerrcat": _run_kerrcat,
    "wigner": _run_wigner,
}


def run(config: RunConfig, out_dir: str | None = None, jobs: int = 1) -> str:
    """Execute a validated config; returns the run directory."""
    run_dir = out_dir or config.out or "qtraj-run"
    os.makedirs(run_dir, exist_ok=True)
    started = time.perf_counter()
    seeds, summary = _RUNNERS[config.protocol](config, run_dir, jobs)
    write_csv(os.path.join(run_dir, "summary.csv"), ("key", "value"),
              [(k, _fmt(v)) for k, v in summary])
    write_manifest(run_dir, config, seeds, summary,
                   time.perf_counter() - started)
    return run_dir


# ---------------------------------------------------------------------------
# plot-data emission

def _require(run_dir: str, filename: str) -> str:
    path = os.path.join(run_dir, filename)
    if not os.path.exists(path):
        raise ConfigError(f"run directory has no {filename}", path=run_dir)
    return path


def _emit_bloch(run_dir: str, args) -> list[tuple]:
    times, states = read_states(run_dir)
    if states[0].shape.dim != 2:
        raise ConfigError("bloch emission needs single-qubit states",
                          path=run_dir)
    rows = []
    for t, s in zip(times, states):
        b = bloch_vector(s)
        rows.append((t, b.x, b.y, b.z))
    return [("t_us", "x", "y", "z")] + rows


def _emit_record(run_dir: str, args) -> list[tuple]:
    rec_dir = os.path.join(run_dir, "records")
    if not os.path.isdir(rec_dir):
        raise ConfigError("run directory has no records/", path=run_dir)
    names = sorted(n for n in os.listdir(rec_dir) if n.endswith(".csv"))
    if not names:
        raise ConfigError("records/ is empty", path=run_dir)
    header, rows = read_csv(os.path.join(rec_dir, names[0]))
    return [tuple(header)] + [tuple(row) for row in rows]


def _emit_fidelity(run_dir: str, args) -> list[tuple]:
    header, rows = read_csv(_require(run_dir, "fidelity.csv"))
    return [tuple(header)] + [tuple(row) for row in rows]


def _emit_wigner_slice(run_dir: str, args) -> list[tuple]:
    times, states = read_states(run_dir)
    state = states[-1]
    d = state.shape.dim
    if args.extent is not None:
        extent = args.extent
    else:
        n_eff = max(d - 5, 1)
        extent = 0.5 * (-5.0 + math.sqrt(9.0 + 4.0 * n_eff))  # truncation reach
    re_axis = np.linspace(-extent, extent, args.points)
    wg = wigner(state, (re_axis, np.array([0.0])))
    rows = [(re, float(wg.values[i, 0])) for i, re in enumerate(re_axis)]
    return [("re_beta", "w")] + rows


def _emit_survival(run_dir: str, args) -> list[tuple]:
    header, rows = read_csv(_require(run_dir, "survival.csv"))
    return [tuple(header)] + [tuple(row) for row in rows]


def _emit_phase_hist(run_dir: str, args) -> list[tuple]:
    cols = read_columns(_require(run_dir, "estimates.csv"))
    est = np.angle(np.exp(1j * cols["estimate"]))
    counts, edges = np.histogram(est, bins=args.bins,
                                 range=(-math.pi, math.pi), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return [("phi", "density")] + list(zip(centers, counts))


_EMITTERS = {
    "bloch": _emit_bloch,
    "record": _emit_record,
    "fidelity": _emit_fidelity,
    "wigner-slice": _emit_wigner_slice,
    "survival": _emit_survival,
    "phase-hist": _emit_phase_hist,
}


def emit(run_dir: str, quantity: str, args) -> str:
    """Write plots/<quantity>.csv derived from a finished run."""
    if quantity not in _EMITTERS:
        raise ConfigError(f"unknown quantity '{quantity}'", path=run_dir)
    table = _EMITTERS[quantity](run_dir, args)
    plot_dir = os.path.join(run_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    path = os.path.join(plot_dir, f"{quantity}.csv")
    write_csv(path, table[0], table[1:])
    return path


# ---------------------------------------------------------------------------
# entry point

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtraj",
        description="Continuous-measurement trajectory batch harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a run config")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override [run] master_seed")
    p_run.add_argument("--jobs", type=int, default=None,
                       help="worker threads (default $QTRAJ_JOBS or 1)")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides [run] out)")

    p_emit = sub.add_parser("emit", help="derive plot CSVs from a run")
    p_emit.add_argument("run_dir", help="directory produced by qtraj run")
    p_emit.add_argument("--quantity", required=True,
                        help=f"one of: {', '.join(QUANTITIES)}")
    p_emit.add_argument("--extent", type=float, default=None,
                        help="wigner-slice half-width (default: reach)")
    p_emit.add_argument("--points", type=int, default=81,
                        help="wigner-slice sample count")
    p_emit.add_argument("--bins", type=int, default=24,
                        help="phase-hist bin count")
    return parser


def _default_jobs(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("QTRAJ_JOBS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"QTRAJ_JOBS is not an integer: {env!r}") from None
    return 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = read_config(args.config)
            if args.seed is not None:
                config.master_seed = args.seed
            run_dir = run(config, out_dir=args.out,
                          jobs=_default_jobs(args.jobs))
            print(f"run complete: {run_dir}")
            return 0
        path = emit(args.run_dir, args.quantity, args)
        print(f"emitted: {path}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except QtrajError as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
