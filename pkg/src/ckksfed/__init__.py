"""Federated averaging with CKKS-encrypted aggregation."""

from .backend import NAME as BACKEND
from .ckks import CkksParams, decode, decrypt, encode, encrypt, keygen
from .data import ENVIRONMENTS, PartitionScheme, generate_synthetic, partition, train_eval_split
from .fedavg import AggregationWeights, TrainerSpec, aggregate_encrypted, aggregate_plain, local_sgd
from .federation import Federation, FederationConfig, RoundMetrics, evaluate_community, run_federation
from .lattice import RingParams, RnsPolynomial
from .modelpack import ModelLayout, PackedModel, decrypt_model, encrypt_model, flatten, unflatten

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CkksParams", "decode", "decrypt", "encode", "encrypt", "keygen",
    "ENVIRONMENTS", "PartitionScheme", "generate_synthetic", "partition", "train_eval_split",
    "AggregationWeights", "TrainerSpec", "aggregate_encrypted", "aggregate_plain", "local_sgd",
    "Federation", "FederationConfig", "RoundMetrics", "evaluate_community", "run_federation",
    "RingParams", "RnsPolynomial", "ModelLayout", "PackedModel", "decrypt_model", "encrypt_model",
    "flatten", "unflatten",
]
