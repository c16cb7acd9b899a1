"""Kernel backend selection.

Two interchangeable implementations exist: ``sbprop._pykernels`` (NumPy, the
reference) and ``sbprop._ckernels`` (compiled, optional).  Selection happens
once at import and is per kernel: with the extension available, row-wise
normalization/softmax/activation kernels use the compiled loops (they beat
NumPy's strided temporaries), while ``matmul`` stays on NumPy so matrix
products run on BLAS, which no naive loop matches.

``SBPROP_BACKEND=python`` forces the NumPy implementation of everything;
``SBPROP_BACKEND=cython`` forces the compiled one (raising if it is not
built).  Both backends are pure functions with deterministic summation
order, so within one process repeated calls are bit-identical.
"""

from __future__ import annotations

import os

from . import _pykernels

# kernels where NumPy wins even when the extension is built: matrix products
# run on BLAS, and scalar scaling is a single vectorized pass already
_PREFER_PYTHON = {"matmul", "scale"}

_forced = os.environ.get("SBPROP_BACKEND", "").lower()
if _forced not in ("", "python", "cython"):
    raise RuntimeError(f"SBPROP_BACKEND must be 'python' or 'cython', got {_forced!r}")

_ckernels = None
if _forced != "python":
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:
        _ckernels = None
        if _forced == "cython":
            raise RuntimeError(
                "SBPROP_BACKEND=cython but the compiled extension is not available; "
                "build it with `pip install -e . --no-build-isolation`"
            )

ACTIVE_BACKEND = "cython" if _ckernels is not None else "python"


def _pick(name: str):
    if _ckernels is None:
        return getattr(_pykernels, name)
    if _forced == "cython":
        return getattr(_ckernels, name, getattr(_pykernels, name))
    if name in _PREFER_PYTHON:
        return getattr(_pykernels, name)
    return getattr(_ckernels, name, getattr(_pykernels, name))


matmul = _pick("matmul")
add = _pick("add")
mul = _pick("mul")
scale = _pick("scale")
relu = _pick("relu")
relu_vjp = _pick("relu_vjp")
gelu = _pick("gelu")
gelu_vjp = _pick("gelu_vjp")
softmax_lastdim = _pick("softmax_lastdim")
softmax_vjp = _pick("softmax_vjp")
layer_norm = _pick("layer_norm")
layer_norm_vjp = _pick("layer_norm_vjp")


def available_backends() -> dict[str, object]:
    """Backend modules importable in this process, keyed by name."""
    out: dict[str, object] = {"python": _pykernels}
    try:
        from . import _ckernels as ck  # type: ignore[attr-defined]

        out["cython"] = ck
    except ImportError:
        pass
    return out
