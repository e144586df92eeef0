"""Open-vocabulary 3D affordance grounding on posed RGB-D scans.

Query decomposition, memory-guided 2D grounding, multi-view fusion into 3D
candidates, a spatial scene graph and a final selection step, plus synthetic
scenes and deterministic mock backends for offline verification.
"""

__version__ = "0.1.0"
