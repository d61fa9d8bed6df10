"""
Compression recipes, calibration corpora, sampling strategies, and compression backends.
"""
