"""Desk-scale streaming-attention training lab.

A minimal reverse-mode autodiff core drives a toy encoder-decoder whose
final decoder layer halts on streaming cross-attention (monotonic chunkwise
or cumulative). The two-stage procedure records triggering points during
normal pre-training, then fine-tunes with boundary-masked alignment under
an accuracy/coverage update policy, trading latency against accuracy
without external alignments.
"""

__version__ = "0.1.0"
