"""Closed-loop integration kernel, compiled when available.

Set ELTRACK_PURE_PYTHON=1 to force the pure-Python port.
"""

import os

if os.environ.get("ELTRACK_PURE_PYTHON", "") not in ("", "0"):
    from . import _core_py as _impl
    COMPILED = False
else:
    try:
        from . import _core as _impl
        COMPILED = True
    except ImportError:
        from . import _core_py as _impl
        COMPILED = False

integrate = _impl.integrate
rhs_eval = _impl.rhs_eval
unforced_flow = _impl.unforced_flow

MODEL_KINDS = {"pendulum": 0, "two_link": 1}
REF_SINUSOID, REF_UNFORCED = 0, 1
CTRL_RD2, CTRL_RD2_FF, CTRL_CASCADE = 0, 1, 2
MAX_STAGES = 8
