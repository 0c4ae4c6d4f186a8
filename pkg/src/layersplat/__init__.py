"""Two-layer (road surfels + environment Gaussians) splatting with depth-ordered compositing."""

import os

# numba sizes its thread pool once at import; keep headroom so --threads can exceed the
# core count (results do not depend on the worker count).
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8)))
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")


def default_threads():
    return int(os.environ.get("LAYERSPLAT_THREADS", os.cpu_count() or 1))


class DivergenceError(FloatingPointError):
    """A loss or parameter became non-finite during optimisation."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


__version__ = "0.1.0"
