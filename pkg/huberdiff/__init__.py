"""
Train small diffusion models on corrupted point clouds, and measure how well robust losses resist the corruption.
"""
