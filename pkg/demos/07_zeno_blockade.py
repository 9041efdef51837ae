"""A measurement that walls off part of Hilbert space.

Driving a qubit line that exists only when the cavity holds exactly N
photons acts as a continuous probe of "is the photon number N?".  A
coherent drive trying to push the cavity past N is blocked: population
piles up below the wall, and the trapped field develops Wigner-function
negativity that no classical drive could produce.
"""

import math
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from qtraj.analysis import wigner
from qtraj.feedback import zeno_blockade

OUT = pathlib.Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

TWO_PI = 2.0 * math.pi
N_BLOCKED = 3
OMEGA = TWO_PI * 6.23   # blockade tone (rad/us)
GAMMA = TWO_PI * 0.77   # qubit decay (rad/us)
DRIVE = TWO_PI * 0.05   # cavity drive (rad/us)
T = 10.0

res = zeno_blockade(N_BLOCKED, OMEGA, GAMMA, DRIVE, n_max=20, duration=T)

# ---- populations: everything stays below the wall
pops = np.array([[float(np.real(s.data[n, n])) for n in range(6)]
                 for s in res.states])
p_above = np.array([float(np.real(np.trace(s.data[N_BLOCKED:, N_BLOCKED:])))
                    for s in res.states])

fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
for n in range(N_BLOCKED):
    axes[0].plot(res.times, pops[:, n], label=f"P({n})")
axes[0].plot(res.times, p_above, "k--", label=f"P(n >= {N_BLOCKED})")
axes[0].set_xlabel("t (us)")
axes[0].set_ylabel("population")
axes[0].set_title("blockade at N = 3")
axes[0].legend(fontsize=8)

# without the wall the same drive displaces the cavity without limit
alpha_free = -1j * DRIVE * np.asarray(res.times)
axes[1].plot(res.times, np.abs(alpha_free) ** 2, "--",
             label="free drive <n> = |drive * t|^2")
mean_n = [float(np.real(np.diag(s.data) @ np.arange(21))) for s in res.states]
axes[1].plot(res.times, mean_n, label="blockaded <n>")
axes[1].set_xlabel("t (us)")
axes[1].set_ylabel("<n>")
axes[1].legend(fontsize=8)
axes[1].set_title("mean photon number")

# ---- the trapped state turns nonclassical on the way in
grid = np.linspace(-2.2, 2.2, 81)
maps = [wigner(s, grid).values for s in res.states]
minima = np.array([m.min() for m in maps])
deepest = int(np.argmin(minima))
im = axes[2].pcolormesh(grid, grid, maps[deepest], cmap="RdBu_r",
                        vmin=-2 / math.pi, vmax=2 / math.pi)
axes[2].set_aspect("equal")
axes[2].set_title(f"Wigner at t = {res.times[deepest]:.2f} us")
axes[2].set_xlabel("Re alpha")
axes[2].set_ylabel("Im alpha")
fig.colorbar(im, ax=axes[2], shrink=0.85)
fig.tight_layout()
fig.savefig(OUT / "zeno_blockade.png", dpi=130)

print(f"max P(n >= {N_BLOCKED}) over the run: {p_above.max():.4f}")
print(f"deepest Wigner negativity: {minima.min():.4f} "
      f"at t = {res.times[deepest]:.2f} us")
print(f"free coherent state at t = {T:.0f} would hold "
      f"<n> = {abs(alpha_free[-1])**2:.1f} photons")
print(f"figure: {OUT / 'zeno_blockade.png'}")
