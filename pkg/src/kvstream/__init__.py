"""Compressive, tiered KV-cache engine for streaming token inputs.

Pipeline: temporal token dropping -> fixed-size block packing -> per-layer
key/value projection -> hot window with FIFO eviction into a cold store,
indexed by frozen-GRU block keys -> two-layer consensus top-K retrieval ->
attention over rehydrated + local context.
"""

__version__ = "0.1.0"
