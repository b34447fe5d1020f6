"""Aggregate a two-layer network into one adjacency and weight matrix.

Pairs linked in any layer get the sum of their layer entries scaled by each
layer's largest eigenvalue; unlinked pairs get the smallest such sum.
Run: python3 demos/multiplex_weights.py
"""
import numpy as np

from expfactor import MultiplexStack, multiplex_weights

edges = [(0, 1, 0), (1, 2, 0), (2, 3, 0), (0, 1, 1), (1, 3, 1), (3, 4, 1)]
stack = MultiplexStack.from_edges(edges, n=5)
A, W = multiplex_weights(stack)
np.set_printoptions(precision=3, suppress=True)
print("aggregated adjacency\n", A)
print("weights\n", W)
