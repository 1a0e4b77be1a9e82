"""CBIR back-ends (neural, local, global), adversarial query generation,
and the experiment harness tying them together."""

__version__ = "0.1.0"
