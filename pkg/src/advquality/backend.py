"""Kernel backend selection.

The compiled extension is used when it imported cleanly; setting
``ADVQUALITY_PURE_PYTHON=1`` forces the numpy fallback. Both expose
``forward``, ``backward``, ``loss_input_grad`` and ``pgd_loop``.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

kernels = _pykernels
NAME = "python"

if os.environ.get("ADVQUALITY_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError as exc:  # pragma: no cover - depends on the build
        log.debug("compiled kernels unavailable (%s); using numpy fallback", exc)
    else:
        kernels = _ckernels
        NAME = "compiled"

MODE_UNTARGETED = _pykernels.MODE_UNTARGETED
MODE_TARGETED = _pykernels.MODE_TARGETED
MODE_NONE = _pykernels.MODE_NONE
