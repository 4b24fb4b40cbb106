"""Dynamic-phasor simulation and small-signal analysis of islanded
networked-microgrid systems under two-layer, four-level distributed control."""

__version__ = "0.1.0"
