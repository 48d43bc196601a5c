"""Patch classifiers from partially labeled slides: synthetic data, teacher-student
training with similarity ensembles, and lesion-level evaluation."""

__version__ = "0.1.0"
