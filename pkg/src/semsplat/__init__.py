"""Label-free semantic Gaussian splatting."""

import os

# the TBB layer shipped with some numba wheels is too old and only warns
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
