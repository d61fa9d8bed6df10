"""
High-level search pipelines: the rate sweep and the runtime-configuration tuner.
"""
