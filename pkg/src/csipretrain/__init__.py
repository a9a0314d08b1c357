"""Scale-aware batching and double-masked toy MAE pretraining for multi-scale CSI."""

__version__ = "0.1.0"
