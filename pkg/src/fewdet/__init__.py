"""fewdet: desk-scale few-shot object detection on a minimal numpy autograd.

The package is organized around six layers:

- ``tensor`` / ``nn``: dense tensors, tape-based reverse-mode autodiff,
  layers and SGD.
- ``attention``: pixel-wise query/support cross-attention refinement.
- ``roi``: RoI Align, bilinear resize and multi-resolution attentive fusion.
- ``detector``: the toy two-stage detector (backbone, RPN, RoI head, losses).
- ``shapes`` / ``episodes``: the procedural benchmark and episodic sampling.
- ``metrics`` / ``train`` / ``gradcheck`` / ``cli``: evaluation, the training
  harness and verification commands.
"""

import os


def _limit_blas_threads():
    # multithreaded BLAS thrashes on the small matrices this package uses;
    # FEWDET_BLAS_THREADS overrides (0 keeps the ambient setting)
    n = int(os.environ.get("FEWDET_BLAS_THREADS", "1"))
    if n <= 0:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n, "blas")
    except ImportError:  # pragma: no cover
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


_limit_blas_threads()

from .tensor import Tape, Tensor, backward  # noqa: E402
from .nn import Parameter, sgd_step  # noqa: E402

__all__ = ["Tape", "Tensor", "backward", "Parameter", "sgd_step"]

__version__ = "0.1.0"
