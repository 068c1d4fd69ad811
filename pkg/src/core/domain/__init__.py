# DriftLab - Domain Models
