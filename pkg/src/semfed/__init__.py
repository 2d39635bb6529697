"""Federated graph adapter that maps heterogeneous frozen encoder features onto
shared semantic anchors, with confidence-based filtering of mispaired samples."""

__version__ = "0.1.0"
