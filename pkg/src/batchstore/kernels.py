"""Hash kernel selection: compiled extension when present, else pure Python.

Set BATCHSTORE_PURE_PYTHON=1 to force the fallback (used by the kernel
benchmark and the differential tests). `node_seeds` arguments must be an
array.array('Q') so both implementations accept them unchanged.
"""

import os

if os.environ.get("BATCHSTORE_PURE_PYTHON") == "1":
    from batchstore import _kernels_py as _impl
else:
    try:
        from batchstore import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from batchstore import _kernels_py as _impl

IMPLEMENTATION = _impl.IMPLEMENTATION
xxh64 = _impl.xxh64
hrw_select = _impl.hrw_select
hrw_select_many = _impl.hrw_select_many
