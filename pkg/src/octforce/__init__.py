"""Force estimation from simulated OCT A-scan sequences.

Modules:

- ``sim``       needle-tip simulator (epoxy layer, A-scan rendering, force streams)
- ``streams``   stream matching, cropping, windowing, normalisation
- ``dataset``   binary dataset container, contiguous splits, statistics
- ``autodiff``  tape-based reverse-mode differentiation on numpy arrays
- ``nets``      GRU / convGRU cells, residual blocks and the five architectures
- ``train``     Adam, training loop, metrics, architecture comparison
- ``cli``       ``octforce`` command line
"""

__version__ = "0.1.0"
