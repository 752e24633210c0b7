"""serq: saliency-aware post-training quantization with a single low-rank
error-reconstruction matrix, plus RTN/GPTQ/SVD baselines, an MXFP4 block
format, and a desk-scale metrics harness."""

from .compensate import (
    Compensator,
    OpProbe,
    build_serq_gptq_swapped,
    build_serq_rtn,
    build_svd_baseline,
    forward_reconstructed,
    jacobi_svd,
)
from .estimators import IntFakeQuant, MxFakeQuant, SerqQuantizer
from .flatten import FlatteningPlan, apply_inverse_to_activation, compute_smoothing_scales, fold_scales
from .gptq import GptqConfig, HessianState, accumulate_hessian, gptq_quantize, proxy_loss
from .harness import MetricsReport, emit_report, qsnr
from .mxfmt import MxBlockTensor, e2m1_nearest, int_gemm_reference, mx_decode, mx_encode, mx_gemm_reference
from .pipeline import LayerArtifacts, layer_forward, quantize_layer
from .quantcore import (
    IntQuantConfig,
    QuantizedTensor,
    dequantize,
    effective_bits,
    fake_quant,
    quantize_asymmetric,
    quantize_symmetric,
)
from .saliency import (
    LayerGraph,
    PermutationAssignment,
    SaliencyPlan,
    apply_assignment,
    build_plan,
    propagate_permutations,
    score_rows,
    verify_equivalence,
)
from .tensorio import (
    CalibStats,
    ModelManifest,
    SyntheticSpec,
    collect_calib_stats,
    gen_synthetic_activations,
    load_tensor,
    save_tensor,
)
from .toymodel import ToyBlock, forward_fp, forward_quantized, quantize_block, random_block

__version__ = "0.1.0"
