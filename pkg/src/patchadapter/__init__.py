"""Engine for training and evaluating an attention-adapter head on frozen
patch-token embeddings."""

__version__ = "0.1.0"
