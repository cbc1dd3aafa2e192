"""Backend selection for the hot ray-trace kernel.

The compiled ``_ctrace`` extension is used when it was built; otherwise the
numpy implementation in ``_pytrace`` is used.  Set ``BMISIM_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from bmisim import _pytrace

if os.environ.get("BMISIM_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from bmisim import _ctrace as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"

ALIVE = _pytrace.ALIVE
MISS = _pytrace.MISS
CLIPPED = _pytrace.CLIPPED
TIR = _pytrace.TIR
KIND_REFRACT = _pytrace.KIND_REFRACT
KIND_STOP = _pytrace.KIND_STOP
KIND_SENSOR = _pytrace.KIND_SENSOR

REASONS = {MISS: "miss", CLIPPED: "clipped", TIR: "tir"}


def trace_bundle(origins, directions, table, backend=None):
    """Trace ``(N, 3)`` origins/directions through a surface table.

    ``backend`` may be ``"cython"`` or ``"numpy"``; by default the compiled
    kernel is used when available.
    """
    backend = backend or BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled trace kernel is not available")
        fn = _compiled.trace_bundle
    elif backend == "numpy":
        fn = _pytrace.trace_bundle
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return fn(
        origins,
        directions,
        table["kind"],
        table["z"],
        table["c"],
        table["sd"],
        table["asph"],
        table["n1"],
        table["n2"],
    )
