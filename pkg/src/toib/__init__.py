"""Task-oriented orthogonalised information bottleneck (TOIB) for multi-user
semantic broadcast: encoders, superposed channel, decoders, CLUB-regularised
training and evaluation, on a small numpy autodiff engine."""

__version__ = "0.1.0"
