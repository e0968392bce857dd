"""Nanometre-scale localization of point emitters relative to fiducial alignment marks."""

__version__ = "0.1.0"
