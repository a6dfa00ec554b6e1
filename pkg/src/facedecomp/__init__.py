"""Two-stage inverse rendering of faces: SDF geometry, diffuse/specular BRDF,
spherical-harmonic ambient light, and a learned subsurface diffuse offset."""

import os

# honor the thread cap before any BLAS pool spins up
_threads = os.environ.get("FACEDECOMP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os

from . import tape  # noqa: E402
from .tape import Tensor, Parameter, UsageError, backward, grad, no_grad  # noqa: E402
from .params import ParamStore, save_checkpoint, load_checkpoint  # noqa: E402
from .adam import AdamState  # noqa: E402

__version__ = "0.1.0"
