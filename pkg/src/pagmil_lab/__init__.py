"""Desk-scale laboratory for prior-guided continual multiple-instance learning.

Spatially-aware patch selection, prompt-routed per-task heads and a
sequential-task harness on synthetic slide bags.
"""

__version__ = "0.1.0"
