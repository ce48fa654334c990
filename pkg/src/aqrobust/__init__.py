"""Adversarial robustness toolkit for adaptive questionnaire classifiers."""

__version__ = "0.1.0"
