"""Multi-view image classifiers (CSV, SSG, PSG, CDV) and per-view explanations."""
__version__ = "0.1.0"
