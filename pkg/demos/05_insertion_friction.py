"""Why measure force at the tip: friction along the shaft fools a base sensor.

A model calibrated on pure tip loads is run on an unshielded insertion. Its
predictions follow the tip force, while the base sensor adds shaft friction.
Takes about five minutes on one CPU core.
"""

import numpy as np

from octforce import dataset, nets, sim, streams
from octforce import train as tr

preset, optics = sim.PRESETS["needle2"], sim.OpticalParams()
oct_, force = sim.simulate_calibration(preset, optics, 60.0, seed=0)
splits = dataset.split(streams.build_sequences(oct_, force, stride=25))
spec = nets.LayerSpec(groups=((1, 16), (1, 32)), convgru_layers=1)
model, _ = tr.train("convgru-cnn", spec, splits, tr.TrainConfig(epochs=12, lr=3e-3, seed=0))

for shielded in (False, True):
    ins, base, tip = sim.simulate_insertion(preset, optics, sim.DEFAULT_INSERTION, shielded, seed=1)
    seqs = streams.build_sequences(ins, base, stride=25)
    truth = tip.f[streams.nearest_indices(seqs.t_end, tip.t)]
    pred = model.predict(seqs)
    label = "shielded  " if shielded else "unshielded"
    print(f"{label} MAE vs tip: OCT model {np.mean(np.abs(pred - truth)):6.1f} mN, "
          f"base sensor {np.mean(np.abs(seqs.labels - truth)):6.1f} mN")
