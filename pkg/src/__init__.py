# DriftLab - Core Package
