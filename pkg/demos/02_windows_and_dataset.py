"""From raw streams to training windows and a saved dataset file.

Each A-scan is paired with the nearest force sample in time, cropped to the
d_c pixels that matter, and stacked into windows of t_s consecutive scans.
"""

import tempfile
from pathlib import Path

import numpy as np

from octforce import dataset, sim, streams

optics = sim.OpticalParams()
oct_, force = sim.simulate_calibration(sim.PRESETS["needle2"], optics, 3.0, seed=1)

matched = streams.match_streams(oct_, force)
gap = np.abs(oct_.t - force.t[matched.force_index])
print(f"{len(oct_)} scans matched, worst time gap {gap.max() * 1e3:.2f} ms (force period 2 ms)")

seqs = streams.build_sequences(oct_, force, t_s=50, d_c=70, stride=5, optics=optics)
print("windows:", seqs.windows.shape, "labels:", seqs.labels.shape)

train, val, test = dataset.split(seqs)
print(f"contiguous split: train {len(train)}, val {len(val)}, test {len(test)}")

st = dataset.stats(train)
norm = streams.normalize(train, st)
print(f"normalized train pixels: mean {norm.windows.mean():+.3f}, std {norm.windows.std():.3f}; "
      f"labels in [{norm.labels.min():.2f}, {norm.labels.max():.2f}]")

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "cal.bin"
    header = dataset.save(seqs, dataset.DatasetHeader(t_s=50, d_c=70, n_samples=len(seqs), preset_name="needle2", seed=1, stride=5), path)
    h, back = dataset.load(path)
    print(f"saved {path.stat().st_size / 1e6:.1f} MB, header {h}")
    print("round trip exact:", back.windows.tobytes() == seqs.windows.tobytes())
    raw = bytearray(path.read_bytes())
    raw[20] ^= 1
    path.write_bytes(bytes(raw))
    try:
        dataset.load(path)
    except dataset.DatasetError as e:
        print("flipped one header bit ->", type(e).__name__)
