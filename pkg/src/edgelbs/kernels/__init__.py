"""Hot-loop kernels with a compiled core and a pure NumPy fallback.

The Cython extension is built at install time; when it is missing
(source checkout without a compiler, failed build) the pure Python
implementation is used instead.  Both backends consume identical
pre-drawn random numbers, so results are deterministic per seed either
way.  ``BACKEND`` reports which one is active.
"""

from edgelbs.kernels import _py

try:
    from edgelbs.kernels import _fast

    _impl = _fast
    BACKEND = "cython"
except ImportError:
    _impl = _py
    BACKEND = "python"

walk_steps = _impl.walk_steps
sgns_epoch = _impl.sgns_epoch

__all__ = ["walk_steps", "sgns_epoch", "BACKEND"]
