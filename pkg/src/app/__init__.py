# DriftLab - Application Layer
