"""Tucker compression of dense tensors with ST-HOSVD and HOOI.

Sequential kernels live in :mod:`partucker.tensor` and
:mod:`partucker.decompose`; the block-distributed versions run on a simulated
message-passing runtime (:mod:`partucker.runtime`, :mod:`partucker.distributed`).
"""

from .analysis import (ErrorCurve, ScalingRecord, center_scale, compression_ratio,
                       error_curves, error_metrics, inverse_center_scale)
from .cost import CostParams, CostReport, estimate_cost
from .decompose import (DecomposeOptions, TuckerModel, choose_rank, eig_leading, hooi,
                        reconstruct, sthosvd)
from .distributed import (DistFactorMatrix, DistTensor, distribute, gather, memory_bound,
                          par_eigenvectors, par_gram, par_hooi, par_sthosvd, par_ttm)
from .io import (BadMagicError, FormatError, TruncatedFileError, VersionMismatchError,
                 generate_synthetic, read_model, read_tensor, write_model, write_tensor)
from .runtime import DeadlockError, Harness, HarnessError, ProcessGrid, grid_create
from .tensor import DenseTensor, UnfoldingView, gram, norm, ttm, ttm_chain, unfold_map

__version__ = "0.1.0"
