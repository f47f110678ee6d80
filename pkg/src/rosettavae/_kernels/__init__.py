"""Training-step kernels with import-time backend selection.

The compiled extension is preferred when it imported cleanly; otherwise
the numpy implementation serves as a drop-in fallback. Both expose the
same ``loss_and_grad`` contract, and ``get_impl`` lets benchmarks and
tests address a specific backend regardless of the default.
"""

from __future__ import annotations

from . import _ref

try:  # pragma: no cover - exercised indirectly by backend tests
    from . import _core
except ImportError:  # pragma: no cover
    _core = None

DEFAULT = _core if _core is not None else _ref
BACKEND = DEFAULT.NAME

_BY_NAME = {"python": _ref}
if _core is not None:
    _BY_NAME["compiled"] = _core


def available_backends() -> tuple[str, ...]:
    return tuple(_BY_NAME)


def get_impl(name: str | None = None):
    """Return a kernel module by name, or the default when name is None."""
    if name is None:
        return DEFAULT
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValueError(
            f"unknown kernel backend '{name}'; available: {sorted(_BY_NAME)}"
        ) from None
