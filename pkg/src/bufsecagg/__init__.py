"""Secure aggregation for buffered asynchronous federated learning.

A server fills a K-slot buffer with masked model updates uploaded by
asynchronously arriving users. Pairwise masks are exchanged through
attribute-gated sealed seeds, so masks cancel exactly in the committed
aggregate while no party but the slot holder can open a seed. The package
also ships the surrounding training loop, a discrete-event straggler
simulator, a synchronous baseline and a TCP wire demo.
"""

from .field import DEFAULT_MODULUS, FieldVector, QuantizerConfig, dequantize, quantize
from .kernels import BACKEND as KERNEL_BACKEND
from .prg import Seed, expand
from .protocol import (
    ProtocolViolation,
    RoundResult,
    ServerBusy,
    ServerEngine,
    SlotGrant,
    UploadMsg,
    UserAbort,
    collusion_view,
    run_round,
    unmask_aggregate,
    user_run,
)
from .training import GlobalModel, StalenessFn, local_train, make_synthetic_task, server_step
from .vault import (
    AccessDenied,
    Attribute,
    AttributeAuthority,
    AuthorityRejected,
    SealedSeed,
    decrypt,
    encrypt,
    keygen,
    setup,
)

__version__ = "0.1.0"

__all__ = [
    "AccessDenied",
    "Attribute",
    "AttributeAuthority",
    "AuthorityRejected",
    "DEFAULT_MODULUS",
    "FieldVector",
    "GlobalModel",
    "KERNEL_BACKEND",
    "ProtocolViolation",
    "QuantizerConfig",
    "RoundResult",
    "SealedSeed",
    "Seed",
    "ServerBusy",
    "ServerEngine",
    "SlotGrant",
    "StalenessFn",
    "UploadMsg",
    "UserAbort",
    "collusion_view",
    "decrypt",
    "dequantize",
    "encrypt",
    "expand",
    "keygen",
    "local_train",
    "make_synthetic_task",
    "quantize",
    "run_round",
    "server_step",
    "setup",
    "unmask_aggregate",
    "user_run",
]
