"""Rank the five architectures on one dataset, a few seeds each.

Short runs on a small dataset, so absolute errors are higher than with full
training; the point is the workflow. About ten minutes on one CPU core.
"""

from octforce import dataset, nets, sim, streams
from octforce import train as tr

oct_, force = sim.simulate_calibration(sim.PRESETS["needle1"], sim.OpticalParams(), 30.0, seed=0)
splits = dataset.split(streams.build_sequences(oct_, force, stride=25))
spec = nets.LayerSpec(groups=((1, 8), (1, 16)), convgru_layers=1, convgru_maps=8, gru_hidden=16)

report = tr.compare_models(splits, list(nets.ArchId), spec, tr.TrainConfig(epochs=6, lr=3e-3), n_seeds=2)
print(report.to_csv())
print("ranking by mean MAE:", " < ".join(report.ranking()))
