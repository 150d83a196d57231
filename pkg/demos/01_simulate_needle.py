"""Simulate a force-sensing needle tip and look at what the OCT fibre sees.

A soft epoxy layer sits between the fibre and the metal tip. Pushing on the tip
squeezes the layer, so the tip surface peak in the A-scan moves towards the
epoxy peak. Run with ``python3 demos/01_simulate_needle.py``.
"""

import numpy as np

from octforce import sim

for name, p in sim.PRESETS.items():
    print(f"{name}: f_max {p.f_max:6.0f} mN  k0 {p.k0:.3f} mN/um  "
          f"steady deformation at f_max {p.steady_state(p.f_max):.0f} um")

# step response of the Kelvin-Voigt layer: 200 mN switched on at t=0, off at t=0.1 s
p = sim.PRESETS["needle1"]
dt = 1 / sim.OCT_RATE_HZ
state, trace = sim.DeformState(), []
for i in range(int(0.2 / dt)):
    force = 200.0 if i * dt < 0.1 else 0.0
    d, state = sim.deform_step(state, force, dt, p)
    trace.append(d)
trace = np.array(trace)
print("\ndeformation (um) every 10 ms:", np.round(trace[::55], 1))

# the same deformation rendered as an A-scan: peak index moves by d * px_per_um
optics = sim.OpticalParams()
clean = optics.noiseless()
for d_um in (0.0, 100.0, 300.0):
    scan = sim.render_ascan(d_um * optics.px_per_um, clean, seed=0)
    lo = optics.epoxy_top_idx + 8
    print(f"d = {d_um:5.0f} um -> tip peak at px {lo + int(np.argmax(scan[lo:]))}")

# two seconds of calibration data: OCT at 5.5 kHz, force sensor at 500 Hz
oct_, force = sim.simulate_calibration(p, optics, 2.0, seed=0)
print(f"\n{len(oct_)} A-scans of {oct_.scans.shape[1]} px, {len(force)} force samples, "
      f"force range {force.f.min():.0f}..{force.f.max():.0f} mN")

# an insertion: tissue ruptures show up as sudden tip force drops,
# shaft friction only reaches the base sensor when the needle is unshielded
_, base, tip = sim.simulate_insertion(p, optics, sim.DEFAULT_INSERTION, shielded=False, seed=0)
print(f"insertion {sim.DEFAULT_INSERTION.duration_s:.0f} s: peak tip force {tip.f.max():.0f} mN, "
      f"final base - tip {base.f[-1] - tip.f[-1]:.0f} mN of friction")

# slow axial drift of the fibre shifts both surfaces together
drifting = sim.OpticalParams(drift_px=3.0, drift_tau_s=1.0)
x = sim.axial_drift(oct_.t, drifting, np.random.default_rng(0))
print(f"optional drift over 2 s: {x.min():+.2f}..{x.max():+.2f} px")
