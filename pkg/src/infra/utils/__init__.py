# DriftLab - Utilities
