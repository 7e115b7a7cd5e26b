"""One-time tooling: truncate zoo backbones at their pooled final
convolutional features and serialize graph + manifest for the runtime."""

__version__ = "0.1.0"
