"""Audio- and lip-cloud-conditioned deformation of a 3D Gaussian head."""

import os

# the bundled TBB is too old for numba; pick a layer that needs no probing
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
