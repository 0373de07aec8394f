"""embedatlas: an engine for exploring large embedding datasets.

Pipeline: ingest embedding vectors, index them for approximate nearest-neighbor
search, project to 2D with Barnes-Hut t-SNE, zero-shot classify against a
user-defined class list, and serve a tiled point cloud plus semantic search
over HTTP.
"""

__version__ = "0.1.0"
