"""Private and secure approximate coded distributed computing.

Submodules: ``realmat`` (matrices and fixed-point quantization), ``ecc``
(elliptic-curve group, ECDH and the matrix cipher), ``codec`` (Berrut
encode/decode), ``cluster`` (simulated master/workers), ``dl`` (coded
backpropagation) and ``cli``.
"""

from .cluster import Cluster, ClusterReport, TaskSpec, WaitPolicy, collusion_audit, make_profiles, run_job
from .codec import CodecConfig, decode, default_anchors, encode, gen_masks, recover
from .ecc import P256, SECP256K1, TOY_CURVE, CurveParams, CurvePoint, keygen, mea_decrypt, mea_encrypt
from .errors import InsufficientData, InvalidConfig, JobFailed, ProtocolError, QuantizationRangeError, SpacdcError
from .realmat import QuantizedMatrix, dequantize, partition_rows, quantize

__version__ = "0.1.0"

__all__ = [
    "Cluster", "ClusterReport", "TaskSpec", "WaitPolicy", "collusion_audit", "make_profiles", "run_job",
    "CodecConfig", "decode", "default_anchors", "encode", "gen_masks", "recover",
    "P256", "SECP256K1", "TOY_CURVE", "CurveParams", "CurvePoint", "keygen", "mea_decrypt", "mea_encrypt",
    "InsufficientData", "InvalidConfig", "JobFailed", "ProtocolError", "QuantizationRangeError", "SpacdcError",
    "QuantizedMatrix", "dequantize", "partition_rows", "quantize",
]
