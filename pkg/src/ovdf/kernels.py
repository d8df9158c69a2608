"""Kernel backend selection.

Imports the compiled extension when available, otherwise the pure-Python
fallback. Set OVDF_PURE_PYTHON=1 to force the fallback (the benchmark and
equivalence tests load both sides explicitly via load_backend).
"""

from __future__ import annotations

import importlib
import os


def load_backend(force_pure: bool = False):
    """Return (module, name) for the chosen kernel backend."""
    if not force_pure:
        try:
            return importlib.import_module("ovdf._kernels"), "compiled"
        except ImportError:
            pass
    return importlib.import_module("ovdf._kernels_py"), "pure-python"


_impl, BACKEND = load_backend(force_pure=os.environ.get("OVDF_PURE_PYTHON") == "1")

forwarding_probs = _impl.forwarding_probs
decision_value = _impl.decision_value
best_order_brute = _impl.best_order_brute
contact_pairs = _impl.contact_pairs
