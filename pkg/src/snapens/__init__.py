"""Snapshot ensembles of a single training run, evaluated under FGSM and PGD attacks."""

__version__ = "0.1.0"
