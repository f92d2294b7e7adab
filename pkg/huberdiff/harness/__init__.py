"""
Configure, run and report experiments.
"""
