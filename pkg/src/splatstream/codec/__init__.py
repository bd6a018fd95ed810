"""Anchor compression: embedding, quantization, entropy coding, bitstream."""

from splatstream.codec.embedding import (
    DecoderWeights,
    decode_anchor,
    decode_attributes,
    fit_embedding,
)
from splatstream.codec.entropy import EntropyModel, estimate_bits, fit_entropy_model
from splatstream.codec.quantization import (
    QuantizationSpec,
    inject_noise,
    quantize,
    rd_select_step,
)
from splatstream.codec.rangecoder import ac_decode, ac_encode
from splatstream.codec.bitstream import (
    BadMagicError,
    BadVersionError,
    BitstreamError,
    CrcMismatchError,
    KindMismatchError,
    PayloadKind,
    TruncatedStreamError,
    decoded_full_map,
    deserialize,
    fit_full_map,
    serialize_full,
)

__all__ = [
    "DecoderWeights", "decode_anchor", "decode_attributes", "fit_embedding",
    "EntropyModel", "estimate_bits", "fit_entropy_model",
    "QuantizationSpec", "inject_noise", "quantize", "rd_select_step",
    "ac_decode", "ac_encode",
    "BitstreamError", "BadMagicError", "BadVersionError", "CrcMismatchError",
    "KindMismatchError", "TruncatedStreamError", "PayloadKind",
    "deserialize", "serialize_full", "fit_full_map", "decoded_full_map",
]
