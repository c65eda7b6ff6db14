"""Post-training quantization error compensation with a shared low-rank
expert plus routed low-rank experts selected per token."""

from .calib import (ChannelStats, CoOccurrence, OutlierProfile, channel_frequency,
                    channel_stats, co_occurrence, importance_vector, npmi_similarity,
                    partition_channels, synth_calibration, token_topk, topk_sets)
from .costmodel import LayerShape, flops, params
from .errors import (ConfigError, InvalidInputError, MissingMemberError,
                     NumericFailureError, QEError, SingularMatrixError)
from .experts import (ExpertPack, LowRankAdapter, Router, RoutedExperts, SharedExpert,
                      assemble_pack, build_routed_experts, build_shared_expert,
                      spectral_cluster)
from .linalg import SvdResult, cholesky, eigh, kmeans, svd_truncated
from .package import LayerBuild, LoadedLayer, read_package, write_package
from .pipeline import RunConfig, analyze_channels, build_layers, evaluate_layer, quantize_layer
from .quantizer import (QuantScheme, QuantizedWeight, dequantize_weight, quant_error,
                        quantize_activations, quantize_weight)
from .refine import RefineConfig, RefineResult, cosine_lr, grad_check, refine_layer, refine_losses
from .runtime import (ForwardTrace, forward_baselines, forward_compensated,
                      layer_metrics, prepare_activations, route)
from .tensorfile import TensorFileError, read_tensor, write_tensor

__version__ = "0.1.0"
