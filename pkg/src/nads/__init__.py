"""Architecture distribution search over invertible flows, with WAIC-scored
ensembles for out-of-distribution detection."""

__version__ = "0.1.0"
