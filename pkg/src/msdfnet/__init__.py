"""Light-weight multi-stage duplex fusion network on a from-scratch numpy autograd engine."""

__version__ = "0.1.0"
