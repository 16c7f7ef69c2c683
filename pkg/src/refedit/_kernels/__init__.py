"""Row-wise fused kernels (softmax, layer norm, GELU) behind one interface.

The compiled Cython module is used when it was built; otherwise the numpy
implementation in ``_fallback`` is used. Set ``REFEDIT_KERNELS=python`` to
force the fallback (e.g. to compare backends).
"""

import os

from refedit._kernels import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("REFEDIT_KERNELS", "auto").lower() != "python":
    try:
        from refedit._kernels import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _fallback
    else:
        BACKEND = "compiled"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd

__all__ = [
    "BACKEND",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
]
