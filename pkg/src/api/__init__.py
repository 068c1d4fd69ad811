# DriftLab - Command Layer
