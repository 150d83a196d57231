"""The small reverse-mode engine the networks are built on.

Operations run inside ``with Tape():`` are recorded; ``backward`` walks the
tape in reverse.
Here we check a GRU cell and a strided convolution against finite differences.
"""

import numpy as np

from octforce import autodiff as ad
from octforce import nets
from octforce.autodiff import Tensor

rng = np.random.default_rng(0)

x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
with ad.Tape():
    loss = ad.mean_all(ad.tanh(ad.matmul(x, w)))
ad.backward(loss)
num = ad.numerical_grad(lambda: ad.mean_all(ad.tanh(ad.matmul(x, w))).value, w.value)
print("dense+tanh  max |analytic - numeric|:", np.abs(w.grad - num).max())

xc = Tensor(rng.standard_normal((2, 3, 20)), requires_grad=True)
k = Tensor(rng.standard_normal((5, 3, 3)), requires_grad=True)
f = lambda: ad.sum_all(ad.relu(ad.conv1d(xc, k, stride=2)))
with ad.Tape():
    loss = f()
ad.backward(loss)
num = ad.numerical_grad(lambda: f().value, k.value)
print("conv1d s=2  max |analytic - numeric|:", np.abs(k.grad - num).max())

# a whole model: every parameter gets a gradient
model = nets.build("convgru-cnn", nets.LayerSpec(groups=((1, 4), (1, 8)), convgru_layers=1, convgru_maps=4),
                   d_c=16, seed=0, dtype=np.float64)
batch, target = rng.random((4, 6, 16)), rng.random((4, 1))
with ad.Tape():
    loss = ad.mse_loss(model(batch), target)
ad.backward(loss)
norms = {name: float(np.linalg.norm(p.grad)) for name, p in model.params.items()}
print(f"ConvGRU-CNN: {model.n_params()} parameters in {len(norms)} tensors, "
      f"{sum(v > 0 for v in norms.values())} with non-zero gradient")

with ad.Tape() as tape, ad.no_grad():
    model(batch)
print("forward under no_grad records", len(tape), "operations")
