"""
FastAPI-based HTTP API and command-line surface for servetune.
"""
