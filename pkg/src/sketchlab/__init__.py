"""sketchlab: a desk-scale laboratory for sketch-based fine-grained retrieval."""

__version__ = "0.1.0"
