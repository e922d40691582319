from .cdf import CdfTable, build_cdf, quantize_pmf
from .container import (
    BitstreamError,
    BitstreamParseError,
    FrameLatents,
    IncompatibleModelError,
    SequenceHeader,
    decode_sequence,
    parse_latents,
    read_sequence,
    scan_sequence,
    write_sequence,
)
from .rangecoder import RangeCoderError, range_decode, range_encode

__all__ = [
    "BitstreamError",
    "BitstreamParseError",
    "CdfTable",
    "FrameLatents",
    "IncompatibleModelError",
    "RangeCoderError",
    "SequenceHeader",
    "build_cdf",
    "decode_sequence",
    "parse_latents",
    "quantize_pmf",
    "range_decode",
    "range_encode",
    "read_sequence",
    "scan_sequence",
    "write_sequence",
]
