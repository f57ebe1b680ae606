"""Desk-scale testbed for session-injection attacks on an item-based
recommender, with an LSTM-NLL baseline detector and a sequential-GAN detector.
"""

__version__ = "0.1.0"
