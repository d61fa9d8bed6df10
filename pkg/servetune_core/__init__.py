"""
Core benchmarking and tuning components: models, load generation, analysis,
search pipelines, serving backends, calibration, and flows.
"""
