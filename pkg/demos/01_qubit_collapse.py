"""A continuously monitored qubit, one record at a time.

A qubit is measured along sigma_z at dephasing strength Gamma_D.  Which
quadrature of the output field we amplify decides what the back-action
does to the state: the amplitude quadrature (phi = 0) carries which-state
information and drives every trajectory into a sigma_z eigenstate, while
the phase quadrature (phi = pi/2) carries none and leaves the populations
untouched.  Averaging either unraveling recovers the same unconditioned
master equation.
"""

import math
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from qtraj.hilbert import DensityMatrix, Operator, SpaceShape, pauli
from qtraj.sme import (LindbladModel, MeasurementChannel, WienerStream,
                       ensemble_average, lindblad_propagate,
                       simulate_ensemble, simulate_trajectory)

OUT = pathlib.Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

QUBIT = SpaceShape((2,))
GAMMA_D = 1.0   # rad/us
ETA = 0.4
DT = 1e-3       # us


def monitored_qubit(phi):
    c = Operator(QUBIT, math.sqrt(GAMMA_D / 2.0) * pauli("z").data)
    return LindbladModel(H=None,
                         channels=[MeasurementChannel(c=c, eta=ETA, phi=phi)])


def z_of(states):
    return np.real(states[:, 0, 0] - states[:, 1, 1])


# start tilted so the two collapse outcomes are not equally likely
amp = np.array([math.sqrt(0.7), math.sqrt(0.3)], dtype=complex)
rho0 = DensityMatrix(QUBIT, np.outer(amp, amp))

# ---- a handful of single trajectories at each quadrature angle
fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
for phi, ax, label in ((0.0, axes[0], "amplitude quadrature (phi = 0)"),
                       (math.pi / 2, axes[1],
                        "phase quadrature (phi = pi/2)")):
    model = monitored_qubit(phi)
    for k in range(6):
        rec = simulate_trajectory(model, 8.0, DT, rho0=rho0,
                                  stream=WienerStream(5, k), thin=20)
        ax.plot(rec.state_times, z_of(rec.states_data), lw=0.8)
    ax.set_title(label)
    ax.set_xlabel("t (us)")
    ax.set_ylabel("<sigma_z>")
    ax.set_ylim(-1.1, 1.1)

# ---- the trajectory mean reproduces the unconditioned evolution
model = monitored_qubit(0.0)
records = simulate_ensemble(model, 8.0, DT, master_seed=12,
                            n_trajectories=200, rho0=rho0,
                            store_records=False, thin=40)
times, means = ensemble_average(records)
mean_z = np.array([float(np.real(m.data[0, 0] - m.data[1, 1]))
                   for m in means])
reference = lindblad_propagate(model, rho0, times)
ref_z = np.array([float(np.real(r.data[0, 0] - r.data[1, 1]))
                  for r in reference])

axes[2].plot(times, mean_z, label="mean of 200 trajectories")
axes[2].plot(times, ref_z, "--", label="unconditioned")
axes[2].set_title("ensemble average")
axes[2].set_xlabel("t (us)")
axes[2].legend()
fig.tight_layout()
fig.savefig(OUT / "qubit_collapse.png", dpi=130)

# ---- Born statistics of the collapse outcomes
z_end = np.array([z_of(r.states_data)[-1] for r in records])
frac_up = float(np.mean(z_end > 0.0))
frac_done = float(np.mean(np.abs(z_end) >= 0.95))
print(f"collapsed (|z| >= 0.95) after 8/Gamma_D: {frac_done:.2f}")
print(f"fraction ending spin-up: {frac_up:.2f}  (Born weight 0.70)")
print(f"max |mean - unconditioned| in z: {np.max(np.abs(mean_z - ref_z)):.3f}")
print(f"figure: {OUT / 'qubit_collapse.png'}")
