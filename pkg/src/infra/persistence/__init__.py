"""
DriftLab - Artifact Persistence.

Atomic file persistence for calibration tables, moment sidecars,
sample batches and reports.
"""
