"""Non-contrastive dialogue pre-training by distilling future knowledge into a context encoder."""

__version__ = "0.1.0"
