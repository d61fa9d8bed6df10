"""
Post-trial analysis of request telemetry.
"""
