"""Station-network forecasting toolkit.

Multi-graph spatio-temporal models, classical baselines, a data-quality
pipeline for ground weather station records, and evaluation utilities,
all on top of a small dense autodiff tape.
"""

__version__ = "0.1.0"
