"""
Inference backends driven by the load generator (simulated and live HTTP).
"""
