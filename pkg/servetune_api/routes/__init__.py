"""
Route packages for the servetune API.
"""
