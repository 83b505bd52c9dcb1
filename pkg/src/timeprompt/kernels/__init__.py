"""Hot-kernel dispatch: compiled Cython core with a pure-NumPy fallback.

The compiled backend is picked at import when available. Selection can be
forced with ``TIMEPROMPT_KERNELS=python`` / ``TIMEPROMPT_KERNELS=compiled``
or switched in-process with :func:`use`, which the kernel benchmark relies
on. Both backends expose the same functions with matching semantics; see
``tests/test_kernels.py`` for the parity suite.
"""

from __future__ import annotations

import os

from . import fallback

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

_active = fallback


def available_backends() -> list[str]:
    names = [fallback.NAME]
    if compiled is not None:
        names.append(compiled.NAME)
    return names


def use(name: str):
    """Select the kernel backend by name ('python' or 'compiled')."""
    global _active
    if name == fallback.NAME:
        _active = fallback
    elif compiled is not None and name == compiled.NAME:
        _active = compiled
    else:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; "
                         f"available: {available_backends()}")
    return _active


def active():
    """The currently selected backend module."""
    return _active


def backend_name() -> str:
    return _active.NAME


_env = os.environ.get("TIMEPROMPT_KERNELS")
if _env:
    use(_env)
elif compiled is not None:
    _active = compiled
