"""Compression-based normalization layers, a matrix-kernel mutual-information
probe, and a desk-scale training harness for comparing them."""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, backward, grad_check  # noqa: F401
from .compression import (CompressionKind, CompressionParams,  # noqa: F401
                          compress, compression_ratio,
                          deviation_jacobian_bound, f_lambda)
from .estimator import (GramMatrix, IBTrace, MaskMatrix, gram,  # noqa: F401
                        joint_gram, matrix_entropy, mutual_information,
                        token_ib_value)
from .layers import (AffineParams, BatchStats, NormKind, NormSpec,  # noqa: F401
                     build_norm, parse_norm_name)
