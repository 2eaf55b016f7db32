"""Hot inner loops, compiled when available.

The Cython build is optional. When it is missing, or when the environment
variable ``ALIGNSIM_PURE_PYTHON`` is set to a non-empty value other than
``0``, the numpy implementations are used instead. ``BACKEND`` names the
active one.
"""

import os

from . import _pykernels as python

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("ALIGNSIM_PURE_PYTHON", "") in ("", "0"):
    _active = compiled
    BACKEND = "cython"
else:
    _active = python
    BACKEND = "python"

cosine_topk = _active.cosine_topk
js_divergence = _active.js_divergence
mlp_logit = _active.mlp_logit

__all__ = ["BACKEND", "compiled", "python", "cosine_topk", "js_divergence", "mlp_logit"]
