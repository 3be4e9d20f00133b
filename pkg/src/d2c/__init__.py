"""Desk-scale diffusion dataset condensation pipeline.

Stages: generate toy data -> train a reference denoiser -> score per-sample
difficulty -> select a budgeted subset -> attach text/visual conditions ->
train on the condensed set -> sample and evaluate.
"""
__version__ = "0.1.0"
