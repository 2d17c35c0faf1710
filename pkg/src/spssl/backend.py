"""Kernel backend selection.

The compiled extension (`spssl._convcore`, Cython) is preferred when it
imported cleanly; otherwise the numpy fallback (`spssl._convpy`) is used.
Set SPSSL_BACKEND=python|compiled to force one; "compiled" errors out if the
extension is unavailable rather than silently degrading.
"""

import os

from . import _convpy
from .errors import ConfigError

try:
    from . import _convcore
except ImportError:
    _convcore = None


def _select():
    choice = os.environ.get("SPSSL_BACKEND", "auto")
    if choice == "python":
        return _convpy
    if choice == "compiled":
        if _convcore is None:
            raise ConfigError("SPSSL_BACKEND=compiled but spssl._convcore is not built")
        return _convcore
    if choice == "auto":
        return _convcore if _convcore is not None else _convpy
    raise ConfigError(f"unknown SPSSL_BACKEND value: {choice!r}")


kernels = _select()


def backend_name() -> str:
    return kernels.BACKEND_NAME


def available_backends():
    mods = {"python": _convpy}
    if _convcore is not None:
        mods["compiled"] = _convcore
    return mods
