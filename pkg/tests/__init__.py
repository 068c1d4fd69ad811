# DriftLab - Tests
