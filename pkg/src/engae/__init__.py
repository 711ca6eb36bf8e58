"""Disengagement detection as anomaly detection on behavioral/affect time series.

Autoencoders (TCN, LSTM, feedforward) are trained on engaged sequences only
and score new sequences by reconstruction error; binary classifiers serve as
supervised baselines.
"""

__version__ = "0.1.0"
