"""Cross-layer UAV authentication from fused RF and MEMS fingerprints."""

__version__ = "0.1.0"
