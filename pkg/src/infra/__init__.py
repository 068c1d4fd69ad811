# DriftLab - Infrastructure Layer
