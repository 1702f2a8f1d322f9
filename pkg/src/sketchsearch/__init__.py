"""Sketch-based UI screenshot retrieval.

Learns a joint 64-dimensional embedding space for UI sketches and UI
screenshots with a pair of convolutional sub-networks trained under a
triplet loss, and serves full-screen, partial (segment) and multi-screen
(flow) queries over an indexed corpus. A classical BoW-HOG pipeline is
included as the retrieval baseline, together with an evaluation harness
reporting Top-k accuracy.
"""

__version__ = "0.1.0"
