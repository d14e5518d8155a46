"""Layer-wise GNN inference engine.

Executes graph-neural-network inference layer by layer over batches sized by
a device-memory feedback controller, with locality-aware node reordering and
optional file-backed stores; a node-wise reference executor serves as the
correctness oracle.
"""

__version__ = "0.1.0"
