"""Train a small ConvGRU-CNN on simulated calibration data and report metrics.

Uses the library directly; see the README for the same run through the CLI.
Takes about five minutes on one CPU core.
"""

import numpy as np

from octforce import dataset, nets, sim, streams
from octforce import train as tr

preset = sim.PRESETS["needle1"]
oct_, force = sim.simulate_calibration(preset, sim.OpticalParams(), 60.0, seed=0)
seqs = streams.build_sequences(oct_, force, t_s=50, d_c=70, stride=25)
splits = dataset.split(seqs)
print("train/val/test:", [len(s) for s in splits])

spec = nets.LayerSpec(groups=((1, 16), (1, 32)), convgru_layers=1)
config = tr.TrainConfig(epochs=12, lr=3e-3, seed=0)
model, history = tr.train("convgru-cnn", spec, splits, config, log_every=1)
print(history.to_csv())

m = tr.evaluate(model, splits[2])
print(f"test: MAE {m.mae:.2f} +- {m.mae_std:.2f} mN, rMAE {m.rmae:.4f}, CC {m.cc:.4f}")

pred = model.predict(splits[2])
worst = np.argmax(np.abs(pred - splits[2].labels))
print(f"worst window: predicted {pred[worst]:.1f} mN, true {splits[2].labels[worst]:.1f} mN")
