"""Embedding exporter: runs an encoder over images and prompt texts and
writes rplkg's binary cache format.

The exporter is the only place that touches encoder weights; everything
downstream trains on the cached vectors alone.
"""

__version__ = "0.1.0"
