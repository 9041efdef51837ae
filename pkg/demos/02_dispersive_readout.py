"""Where the qubit signal lives: cavity pointer states and the amplifier.

Driving a dispersively coupled cavity puts the two qubit states at two
different steady field amplitudes.  The angle between the emitted fields
sets how fast information leaves (and the qubit dephases); at chi =
kappa/2 the output phases sit at exactly -/+ 90 degrees and the dephasing
rate per drive photon is maximal.  A Josephson parametric amplifier then
boosts one field quadrature at the expense of the other, keeping
|G_S|^2 - |G_I|^2 = 1.
"""

import math
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from qtraj.models import (DispersiveParams, JPAParams, dephasing_rate,
                          jpa_gain, jpa_quadrature_map, pointer_states)

OUT = pathlib.Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

KAPPA = 1.0
EPS = 1.0

# ---- sweep the dispersive shift and watch the pointer states separate
ratios = np.linspace(0.05, 2.0, 80)
rates, angles = [], []
for ratio in ratios:
    chi = ratio * KAPPA / 2.0
    ps = pointer_states(DispersiveParams(0.0, 0.0, chi, KAPPA, EPS))
    rates.append(dephasing_rate(ps.alpha_g, ps.alpha_e, chi))
    angles.append(math.degrees(np.angle(ps.b_out_e) - np.angle(ps.b_out_g)))

fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
axes[0].plot(ratios, rates)
axes[0].axvline(1.0, color="k", ls=":", lw=0.8)
axes[0].set_xlabel("2 chi / kappa")
axes[0].set_ylabel("Gamma_D (rad/us)")
axes[0].set_title("measurement-induced dephasing")

for ratio, marker in ((0.4, "o"), (1.0, "s"), (1.8, "^")):
    chi = ratio * KAPPA / 2.0
    ps = pointer_states(DispersiveParams(0.0, 0.0, chi, KAPPA, EPS))
    for alpha, color in ((ps.alpha_g, "C0"), (ps.alpha_e, "C3")):
        axes[1].plot(alpha.real, alpha.imag, marker, color=color)
    axes[1].plot([ps.alpha_g.real, ps.alpha_e.real],
                 [ps.alpha_g.imag, ps.alpha_e.imag], "-", color="0.8", lw=0.7)
axes[1].set_xlabel("Re alpha")
axes[1].set_ylabel("Im alpha")
axes[1].set_title("cavity pointer states (g blue, e red)")
axes[1].set_aspect("equal")

# at the matched point the reflected drive phases are exactly -/+ 90 deg
ps = pointer_states(DispersiveParams(0.0, 0.0, KAPPA / 2.0, KAPPA, EPS))
print(f"chi = kappa/2: output phases "
      f"{math.degrees(np.angle(ps.b_out_g)):+.1f} / "
      f"{math.degrees(np.angle(ps.b_out_e)):+.1f} deg, "
      f"|b_out| = {abs(ps.b_out_g):.6f} (drive {EPS})")
print(f"Gamma_D there: "
      f"{dephasing_rate(ps.alpha_g, ps.alpha_e, KAPPA / 2.0):.6f} rad/us")

# ---- parametric gain: pump harder, amplify more, stay unitary
pumps = np.linspace(0.0, 0.49, 60)
gain_db = []
for lam in pumps:
    g_s, g_i = jpa_gain(JPAParams(lam=lam * KAPPA, kappa=KAPPA))
    gain_db.append(10.0 * math.log10(abs(g_s) ** 2))
axes[2].plot(pumps, gain_db)
axes[2].set_xlabel("pump lambda / kappa")
axes[2].set_ylabel("|G_S|^2 (dB)")
axes[2].set_title("JPA gain toward the lambda = kappa/2 threshold")
fig.tight_layout()
fig.savefig(OUT / "dispersive_readout.png", dpi=130)

g_s, g_i = jpa_gain(JPAParams(lam=0.45 * KAPPA, kappa=KAPPA))
print(f"lambda = 0.45 kappa: signal gain {10 * math.log10(abs(g_s)**2):.1f} dB, "
      f"|G_S|^2 - |G_I|^2 = {abs(g_s)**2 - abs(g_i)**2:.12f}")
squeeze, stretch = jpa_quadrature_map(1.5, 0.0)
print(f"phase-sensitive mode at r = 1.5: quadrature gains "
      f"{squeeze:.4f} x {stretch:.4f} = {squeeze * stretch:.12f}")
print(f"figure: {OUT / 'dispersive_readout.png'}")
