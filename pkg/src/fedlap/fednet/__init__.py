"""Simulated federation: secure aggregation backends, transcripts, decentralized Arnoldi."""

from .backends import Ciphertext, MaskBackend, MockBackend, make_backend
from .protocol import (
    DecentralizedArnoldi,
    decentralized_arnoldi,
    distributed_inner_product,
    distributed_matvec,
    distributed_norm,
    knowledge_audit,
)
from .transcript import (
    SERVER,
    AggregationGroup,
    AggregationWithheld,
    Fabric,
    ProtocolTranscript,
    comm_report,
    comm_report_csv,
    fit_linear_coefficient,
)
