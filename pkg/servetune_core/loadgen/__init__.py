"""
Load generation: arrival schedules, prompt synthesis, and trial execution.
"""
