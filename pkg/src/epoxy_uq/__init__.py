"""Calibration and uncertainty quantification for a curing epoxy resin model."""
