"""gritforge: refer-and-ground conversation dataset pipeline and scoring harness.

The namespace stays empty on purpose: callers import the submodule they
need, and heavyweight dependencies (matplotlib for figures) load only on
the paths that use them.
"""

__version__ = "0.1.0"
