"""Tests for the batch harness: configs, runs, manifests, emission."""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from qtraj import cli
from qtraj.errors import ConfigError
from qtraj.hilbert import Operator, SpaceShape, basis_state, pauli
from qtraj.sme import (
    LindbladModel,
    MeasurementChannel,
    WienerStream,
    simulate_trajectory,
)

QUBIT = SpaceShape((2,))


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


TRAJ_CFG = """
[run]
protocol = trajectory
master_seed = 7

[trajectory]
omega_r = 2.0
gamma_d = 1.0
eta = 0.4
duration = 0.2
dt = 1e-3
thin = 20
start = plus
"""


# ---------------------------------------------------------------------------
# config parsing

def test_parse_config_defaults_and_values():
    cfg = cli.parse_config(TRAJ_CFG)
    assert cfg.protocol == "trajectory"
    assert cfg.master_seed == 7
    assert cfg.out is None
    assert cfg.params["omega_r"] == 2.0
    assert cfg.params["phi"] == 0.0          # default
    assert cfg.params["integrator"] == "kraus"
    assert cfg.params["trajectory_index"] == 0


def test_parse_config_comments_and_blank_lines():
    text = "# top\n[run]\nprotocol = wigner  # inline\n\n[wigner]\n" \
           "state = vacuum\nn_max = 4\nextent = 1.0\npoints = 5\n"
    cfg = cli.parse_config(text)
    assert cfg.params["state"] == "vacuum"


def test_parse_config_line_anchored_errors():
    with pytest.raises(ConfigError) as err:
        cli.parse_config("[run]\nprotocol = trajectory\n[trajectory]\n"
                         "gamma_d = 1.0\nduratio = 1.0\n", path="x.cfg")
    assert "x.cfg:5" in str(err.value) and "duratio" in str(err.value)
    with pytest.raises(ConfigError) as err:
        cli.parse_config("[run]\nprotocol = trajectory\nbroken line\n",
                         path="x.cfg")
    assert "x.cfg:3" in str(err.value)
    with pytest.raises(ConfigError) as err:
        cli.parse_config("key = 1\n[run]\nprotocol = wigner\n", path="x.cfg")
    assert "x.cfg:1" in str(err.value)


def test_parse_config_structural_errors():
    with pytest.raises(ConfigError, match=r"missing \[run\]"):
        cli.parse_config("[trajectory]\ngamma_d = 1.0\n")
    with pytest.raises(ConfigError, match="protocol"):
        cli.parse_config("[run]\nmaster_seed = 3\n")
    with pytest.raises(ConfigError, match="duplicate key"):
        cli.parse_config("[run]\nprotocol = wigner\nprotocol = wigner\n")
    with pytest.raises(ConfigError, match="duplicate section"):
        cli.parse_config("[run]\nprotocol = wigner\n[run]\n")
    with pytest.raises(ConfigError, match="unexpected section"):
        cli.parse_config("[run]\nprotocol = wigner\n[rabi]\ngain = 0.1\n")


def test_parse_config_value_errors():
    base = "[run]\nprotocol = trajectory\n[trajectory]\n" \
           "duration = 1.0\ndt = 1e-3\n"
    with pytest.raises(ConfigError, match="bad value"):
        cli.parse_config(base + "gamma_d = fast\n")
    with pytest.raises(ConfigError, match="one of"):
        cli.parse_config(base + "gamma_d = 1.0\nstart = up\n")
    with pytest.raises(ConfigError, match="bad value"):
        cli.parse_config(base + "gamma_d = 1.0\nthin = 2.5\n")
    with pytest.raises(ConfigError, match="missing required key 'gamma_d'"):
        cli.parse_config(base)


def test_parse_config_range_checks():
    def cfg(extra):
        return ("[run]\nprotocol = ensemble\n[ensemble]\ngamma_d = 1.0\n"
                "duration = 1.0\n" + extra)
    with pytest.raises(ConfigError, match="'eta' must lie"):
        cli.parse_config(cfg("dt = 1e-3\nn_trajectories = 4\neta = 1.5\n"))
    with pytest.raises(ConfigError, match="'eta' must lie"):
        cli.parse_config(cfg("dt = 1e-3\nn_trajectories = 4\neta = 0.0\n"))
    with pytest.raises(ConfigError, match="at least 1"):
        cli.parse_config(cfg("dt = 1e-3\nn_trajectories = 0\neta = 0.4\n"))
    with pytest.raises(ConfigError, match="positive"):
        cli.parse_config(cfg("dt = -1e-3\nn_trajectories = 4\neta = 0.4\n"))


def test_read_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        cli.read_config(str(tmp_path / "nope.cfg"))


# ---------------------------------------------------------------------------
# CSV round-trip

def test_csv_floats_round_trip(tmp_path):
    path = str(tmp_path / "t.csv")
    values = [0.1, 1.0 / 3.0, 1e-300, 6.283185307179586, float("nan"), -0.0]
    cli.write_csv(path, ("a",), [(v,) for v in values])
    back = cli.read_columns(path)["a"]
    for orig, new in zip(values, back):
        assert (math.isnan(orig) and math.isnan(new)) or orig == new


def test_read_csv_empty_file(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("")
    with pytest.raises(ConfigError, match="empty"):
        cli.read_csv(str(path))


# ---------------------------------------------------------------------------
# trajectory protocol

def test_trajectory_run_artifacts_match_library(tmp_path):
    cfg = cli.parse_config(TRAJ_CFG)
    run_dir = cli.run(cfg, out_dir=str(tmp_path / "out"))
    for name in ("manifest.txt", "states.csv", "summary.csv",
                 os.path.join("records", "traj_00000.csv")):
        assert os.path.exists(os.path.join(run_dir, name))

    c = Operator(QUBIT, math.sqrt(0.5) * pauli("z").data)
    model = LindbladModel(H=Operator(QUBIT, pauli("y").data),
                          channels=[MeasurementChannel(c=c, eta=0.4, phi=0.0)])
    amp = np.array([1.0, 1.0], complex) / math.sqrt(2.0)
    from qtraj.hilbert import DensityMatrix
    rec = simulate_trajectory(model, 0.2, 1e-3, stream=WienerStream(7, 0),
                              integrator="kraus", thin=20,
                              rho0=DensityMatrix(QUBIT, np.outer(amp, amp)))
    times, states = cli.read_states(run_dir)
    assert np.array_equal(times, rec.state_times)
    for disk, mem in zip(states, rec.states):
        assert np.array_equal(disk.data, mem.data)
    cols = cli.read_columns(os.path.join(run_dir, "records",
                                         "traj_00000.csv"))
    assert np.array_equal(cols["v0"], rec.records[:, 0])
    assert np.array_equal(cols["t_us"], (np.arange(200) + 1) * 1e-3)


def test_closed_trajectory_is_exact(tmp_path):
    text = ("[run]\nprotocol = trajectory\n[trajectory]\n"
            "omega_r = 6.283185307179586\ngamma_d = 0.0\nduration = 1.0\n"
            "dt = 1e-3\nthin = 10\nstart = e\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    assert not os.path.isdir(os.path.join(run_dir, "records"))
    cli.emit(run_dir, "bloch", _emit_args())
    cols = cli.read_columns(os.path.join(run_dir, "plots", "bloch.csv"))
    target = np.cos(2.0 * math.pi * cols["t_us"])
    assert np.max(np.abs(cols["z"] - target)) <= 1e-6


def _emit_args(extent=None, points=81, bins=24):
    import argparse
    return argparse.Namespace(extent=extent, points=points, bins=bins)


# ---------------------------------------------------------------------------
# ensemble protocol and determinism

ENS_CFG = """
[run]
protocol = ensemble
master_seed = 42

[ensemble]
omega_r = 2.0
gamma_d = 1.0
eta = 0.4
duration = 0.25
dt = 1e-3
n_trajectories = 96
thin = 10
"""


def _tree_digest(run_dir):
    """{relative path: bytes}, with the manifest's volatile line dropped."""
    out = {}
    for root, _, files in os.walk(run_dir):
        for name in files:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir)
            with open(path, "rb") as fh:
                data = fh.read()
            if name == "manifest.txt":
                data = b"\n".join(ln for ln in data.split(b"\n")
                                  if not ln.startswith(b"wall_clock_s"))
            out[rel] = data
    return out


def test_ensemble_outputs_and_jobs_determinism(tmp_path):
    cfg = cli.parse_config(ENS_CFG)
    d1 = cli.run(cfg, out_dir=str(tmp_path / "j1"), jobs=1)
    d4 = cli.run(cfg, out_dir=str(tmp_path / "j4"), jobs=4)
    t1, t4 = _tree_digest(d1), _tree_digest(d4)
    assert t1.keys() == t4.keys()
    assert all(t1[k] == t4[k] for k in t1)
    assert len([k for k in t1 if k.startswith("records")]) == 96

    manifest = cli.read_manifest(os.path.join(d1, "manifest.txt"))
    assert manifest["config"]["ensemble.n_trajectories"] == "96"
    assert manifest["seeds"]["trajectory.00000"] == "42:0"
    assert manifest["seeds"]["trajectory.00095"] == "42:95"
    assert float(manifest["summary"]["max_gap_z"]) <= 0.3
    cols = cli.read_columns(os.path.join(d1, "mean_bloch.csv"))
    assert abs(cols["x"][0] - 1.0) <= 1e-12


def test_ensemble_mean_tracks_lindblad_reference(tmp_path):
    cfg = cli.parse_config(ENS_CFG)
    run_dir = cli.run(cfg, out_dir=str(tmp_path / "out"), jobs=2)
    mean = cli.read_columns(os.path.join(run_dir, "mean_bloch.csv"))
    ref = cli.read_columns(os.path.join(run_dir, "lindblad_bloch.csv"))
    # 96 trajectories: statistical gap, loose bound only
    assert np.max(np.abs(mean["z"] - ref["z"])) <= 0.3
    assert np.max(np.abs(ref["y"])) <= 1e-9


def test_seed_override_changes_noise(tmp_path):
    cfg1 = cli.parse_config(TRAJ_CFG)
    cfg2 = cli.parse_config(TRAJ_CFG)
    cfg2.master_seed = 8
    d1 = cli.run(cfg1, out_dir=str(tmp_path / "a"))
    d2 = cli.run(cfg2, out_dir=str(tmp_path / "b"))
    r1 = cli.read_columns(os.path.join(d1, "records", "traj_00000.csv"))
    r2 = cli.read_columns(os.path.join(d2, "records", "traj_00000.csv"))
    assert not np.array_equal(r1["v0"], r2["v0"])
    m2 = cli.read_manifest(os.path.join(d2, "manifest.txt"))
    assert m2["config"]["run.master_seed"] == "8"


def test_manifest_round_trip_reproduces_run(tmp_path):
    cfg = cli.parse_config(ENS_CFG)
    d1 = cli.run(cfg, out_dir=str(tmp_path / "orig"), jobs=2)
    rebuilt = cli.manifest_to_config(os.path.join(d1, "manifest.txt"))
    d2 = cli.run(rebuilt, out_dir=str(tmp_path / "again"), jobs=1)
    t1, t2 = _tree_digest(d1), _tree_digest(d2)
    assert t1.keys() == t2.keys()
    assert all(t1[k] == t2[k] for k in t1)


# ---------------------------------------------------------------------------
# remaining protocols, one cheap run each

def test_halfparity_run_fidelity_table(tmp_path):
    text = ("[run]\nprotocol = halfparity\nmaster_seed = 3\n[halfparity]\n"
            "gamma = 1.0\nduration = 1.4\ndt = 1e-3\nthin = 10\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    cols = cli.read_columns(os.path.join(run_dir, "fidelity.csv"))
    i = int(np.argmin(np.abs(cols["gamma_t"] - 2.0 * math.log(2.0))))
    assert abs(cols["fidelity"][i] - 0.75) <= 0.01
    cli.emit(run_dir, "fidelity", _emit_args())
    again = cli.read_columns(os.path.join(run_dir, "plots", "fidelity.csv"))
    assert np.array_equal(again["fidelity"], cols["fidelity"])


def test_phase_run_and_histogram(tmp_path):
    text = ("[run]\nprotocol = phase\nmaster_seed = 13\n[phase]\n"
            "theta_true = 1.0\nduration = 1.0\ndt = 1e-3\neta = 1.0\n"
            "n_runs = 30\ncap_factor = 50.0\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    cols = cli.read_columns(os.path.join(run_dir, "estimates.csv"))
    assert len(cols["estimate"]) == 30
    cli.emit(run_dir, "phase-hist", _emit_args(bins=12))
    hist = cli.read_columns(os.path.join(run_dir, "plots", "phase-hist.csv"))
    width = 2.0 * math.pi / 12
    assert abs(np.sum(hist["density"]) * width - 1.0) <= 1e-9


def test_zeno_drag_run_and_survival(tmp_path):
    text = ("[run]\nprotocol = zeno-drag\nmaster_seed = 5\n[zeno-drag]\n"
            "nu = 0.05\ngamma_d = 1.0\nduration = 60.0\n"
            "n_trajectories = 150\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    esc = cli.read_columns(os.path.join(run_dir, "escape_times.csv"))
    assert len(esc["trajectory"]) == 150
    surv = cli.read_columns(os.path.join(run_dir, "survival.csv"))
    assert np.all(np.diff(surv["fraction"]) <= 1e-12)
    manifest = cli.read_manifest(os.path.join(run_dir, "manifest.txt"))
    assert "fitted_rate" in manifest["summary"]
    cli.emit(run_dir, "survival", _emit_args())
    again = cli.read_columns(os.path.join(run_dir, "plots", "survival.csv"))
    assert np.array_equal(again["fraction"], surv["fraction"])


def test_zeno_blockade_run(tmp_path):
    text = ("[run]\nprotocol = zeno-blockade\n[zeno-blockade]\n"
            "n_blocked = 2\nomega_r = 20.0\ngamma = 3.0\ndrive = 0.15\n"
            "n_max = 8\nduration = 1.0\nn_times = 3\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    cols = cli.read_columns(os.path.join(run_dir, "blockade.csv"))
    assert np.allclose(cols["p_below"] + cols["p_blocked_plus"], 1.0,
                       atol=1e-9)
    _, states = cli.read_states(run_dir)
    assert states[0].shape.dim == 9


def test_kerrcat_run_with_cat_start(tmp_path):
    text = ("[run]\nprotocol = kerrcat\n[kerrcat]\nkerr = 1.0\neps2 = 4.0\n"
            "kappa1 = 0.01\nkappa2 = 0.2\nduration = 2.0\nn_times = 3\n"
            "start = cat\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    cols = cli.read_columns(os.path.join(run_dir, "parity.csv"))
    assert cols["parity"][0] >= 0.999        # even cat starts at parity +1
    assert cols["parity"][-1] < cols["parity"][0]  # single-photon loss flips
    assert np.all(cols["subspace_weight"] >= 0.99)
    manifest = cli.read_manifest(os.path.join(run_dir, "manifest.txt"))
    assert abs(float(manifest["summary"]["alpha_re"]) - 1.99255) <= 1e-3


def test_wigner_run_vacuum_center(tmp_path):
    text = ("[run]\nprotocol = wigner\n[wigner]\nstate = vacuum\n"
            "n_max = 12\nextent = 1.2\npoints = 41\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    manifest = cli.read_manifest(os.path.join(run_dir, "manifest.txt"))
    assert abs(float(manifest["summary"]["center_w"]) - 2.0 / math.pi) <= 1e-12
    cli.emit(run_dir, "wigner-slice", _emit_args(extent=1.2, points=21))
    sl = cli.read_columns(os.path.join(run_dir, "plots", "wigner-slice.csv"))
    mid = sl["w"][10]
    assert abs(mid - 2.0 / math.pi) <= 1e-3


def test_wigner_fock_bounds_check(tmp_path):
    text = ("[run]\nprotocol = wigner\n[wigner]\nstate = fock\nfock_n = 9\n"
            "n_max = 6\nextent = 1.0\npoints = 5\n")
    with pytest.raises(ConfigError, match="fock_n"):
        cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))


# ---------------------------------------------------------------------------
# emit errors and misc plumbing

def test_emit_requires_matching_artifacts(tmp_path):
    text = ("[run]\nprotocol = wigner\n[wigner]\nstate = vacuum\n"
            "n_max = 12\nextent = 1.0\npoints = 5\n")
    run_dir = cli.run(cli.parse_config(text), out_dir=str(tmp_path / "out"))
    with pytest.raises(ConfigError, match="single-qubit"):
        cli.emit(run_dir, "bloch", _emit_args())
    with pytest.raises(ConfigError, match="records"):
        cli.emit(run_dir, "record", _emit_args())
    with pytest.raises(ConfigError, match="survival"):
        cli.emit(run_dir, "survival", _emit_args())
    with pytest.raises(ConfigError, match="unknown quantity"):
        cli.emit(run_dir, "heatmap", _emit_args())


def test_emit_record_copies_first_trajectory(tmp_path):
    run_dir = cli.run(cli.parse_config(TRAJ_CFG), out_dir=str(tmp_path / "o"))
    cli.emit(run_dir, "record", _emit_args())
    with open(os.path.join(run_dir, "records", "traj_00000.csv"), "rb") as fh:
        src = fh.read()
    with open(os.path.join(run_dir, "plots", "record.csv"), "rb") as fh:
        out = fh.read()
    assert src == out


def test_main_exit_codes(tmp_path, capsys):
    bad = write_cfg(tmp_path, "[run]\nprotocol = trajectory\n[trajectory]\n"
                              "gamma_d = 1.0\nduration = 1.0\ndt = 1e-3\n"
                              "etaa = 0.4\n")
    assert cli.main(["run", bad]) == 2
    assert "etaa" in capsys.readouterr().err

    trunc = write_cfg(tmp_path, "[run]\nprotocol = kerrcat\n[kerrcat]\n"
                                "kerr = 1.0\neps2 = 4.0\nkappa1 = 0.0\n"
                                "kappa2 = 0.2\nn_max = 6\nduration = 20.0\n"
                                "n_times = 5\n", name="trunc.cfg")
    assert cli.main(["run", trunc, "--out", str(tmp_path / "t")]) == 3
    assert "numerical failure" in capsys.readouterr().err

    good = write_cfg(tmp_path, TRAJ_CFG, name="good.cfg")
    out_dir = str(tmp_path / "good")
    assert cli.main(["run", good, "--out", out_dir, "--seed", "9"]) == 0
    manifest = cli.read_manifest(os.path.join(out_dir, "manifest.txt"))
    assert manifest["config"]["run.master_seed"] == "9"
    assert cli.main(["emit", out_dir, "--quantity", "bloch"]) == 0
    assert cli.main(["emit", out_dir, "--quantity", "survival"]) == 2


def test_default_jobs_env(monkeypatch):
    monkeypatch.delenv("QTRAJ_JOBS", raising=False)
    assert cli._default_jobs(None) == 1
    assert cli._default_jobs(6) == 6
    monkeypatch.setenv("QTRAJ_JOBS", "4")
    assert cli._default_jobs(None) == 4
    monkeypatch.setenv("QTRAJ_JOBS", "many")
    with pytest.raises(ConfigError):
        cli._default_jobs(None)


def test_console_script_runs(tmp_path):
    bad = write_cfg(tmp_path, "[run]\nprotocol = nope\n")
    proc = subprocess.run([sys.executable, "-m", "qtraj.cli", "run", bad],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "bad value for 'protocol'" in proc.stderr


def test_manifest_is_written_atomically(tmp_path):
    run_dir = cli.run(cli.parse_config(TRAJ_CFG), out_dir=str(tmp_path / "o"))
    assert not os.path.exists(os.path.join(run_dir, "manifest.txt.tmp"))
