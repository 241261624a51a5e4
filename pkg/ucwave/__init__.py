"""
Stabilized space-time finite elements for unique continuation of the 1D
wave equation, with the experiment harness behind the `ucwave` CLI.
"""

__version__ = "1.0.0"
