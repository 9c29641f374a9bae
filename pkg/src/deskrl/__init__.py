"""deskrl: desk-scale autonomous reinforcement learning testbed."""

__version__ = "0.1.0"
