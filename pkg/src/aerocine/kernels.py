"""Backend selection for the hot loops.

The compiled ``_core`` extension is used when importable; otherwise the
pure-Python ``_pycore`` kernels are used. ``AEROCINE_BACKEND=python`` forces the
fallback. Both expose ``traverse``, ``integrate_rays`` and ``update_field`` with
identical semantics.
"""
from __future__ import annotations

import contextlib
import logging
import os
from types import ModuleType

from . import _pycore

log = logging.getLogger(__name__)

try:
    from . import _core as _native
except ImportError:  # extension not built
    _native = None

BACKENDS: dict[str, ModuleType] = {"python": _pycore}
if _native is not None:
    BACKENDS["native"] = _native


def _initial() -> ModuleType:
    forced = os.environ.get("AEROCINE_BACKEND")
    if forced:
        if forced not in BACKENDS:
            raise ImportError(f"AEROCINE_BACKEND={forced!r} is not available; have {sorted(BACKENDS)}")
        return BACKENDS[forced]
    if _native is None:
        log.info("compiled kernels unavailable, using pure-Python fallback")
    return _native or _pycore


active: ModuleType = _initial()


def available() -> list[str]:
    return sorted(BACKENDS)


def name() -> str:
    return active.NAME


def select(backend: str) -> ModuleType:
    global active
    try:
        active = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown backend {backend!r}; have {sorted(BACKENDS)}") from None
    return active


@contextlib.contextmanager
def using(backend: str):
    """Temporarily switch the active backend."""
    global active
    prev = active
    select(backend)
    try:
        yield active
    finally:
        active = prev
