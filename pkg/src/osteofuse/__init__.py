"""Multi-modal osteoporosis classification pipeline.

Deep features from three serialized backbones are reduced per backbone by
PCA, screened by correlation-based variable clustering, concatenated with
encoded clinical features, and classified by a small mixed-activation
network, with a full metric and Shapley-importance evaluation suite.
"""

__version__ = "0.1.0"
