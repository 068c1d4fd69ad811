# DriftLab - Core Layer
