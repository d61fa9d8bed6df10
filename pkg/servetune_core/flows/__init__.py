"""
Staged flows: registry, worker pools, resource ledger, archives, and job submission.
"""
