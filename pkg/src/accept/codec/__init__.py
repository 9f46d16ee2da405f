"""Bit-level activation/gradient compression."""
from .blocks import (
    HEADER_BYTES,
    QuantizedFeatureBlock,
    QuantizedGradientBlock,
    RawBlock,
    compression_ratio_backward,
    compression_ratio_forward,
    deserialize_block,
    feature_block_nbytes,
    gradient_block_nbytes,
    packed_feature_bytes,
    packed_gradient_bytes,
    raw_block_nbytes,
    serialize_block,
)
from .mbq import (
    MbqState,
    codewords,
    ema_beta,
    least_squares_alpha,
    mbq_assign_bases,
    mbq_assign_bases_bisect,
    mbq_init_residue,
    mbq_update_alpha,
)
from .packing import backward_decode, backward_encode, forward_decode, forward_encode, forward_unencoded
from .quantize import (
    backward_dequantize,
    backward_quantize,
    compress_gradients,
    decode_block,
    decode_features,
    decode_gradients,
    forward_dequantize,
    forward_quantize,
)
from .schedule import BitwidthSchedule, bitwidth_on_lr_change, bitwidths_for_epoch, lr_at_epoch

__all__ = [name for name in dir() if not name.startswith("_")]
