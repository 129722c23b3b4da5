"""Accuracy-first differential privacy: noise reduction, ex-post accounting and privacy filters."""

from .accounting import (
    Decision,
    ExPostFilter,
    FilterHaltedError,
    LedgerError,
    PsiParams,
    TwoTrackSession,
    UnifiedFilter,
    ZcdpFilter,
    brownian_privacy_loss,
    psi,
)
from .core import (
    DpGuarantee,
    ExPostCertificate,
    NoiseReductionTranscript,
    NormOrder,
    Sensitivity,
    TimeSchedule,
    ZcdpParams,
    rho_for_dp,
    zcdp_compose,
    zcdp_to_dp,
)
from .mechanisms import (
    FixedStop,
    RelativeErrorStop,
    StatisticQuery,
    StoppingFunction,
    brownian_noise_reduction,
    exponential_mechanism_argmax,
    gaussian_mechanism,
    laplace_mechanism,
    laplace_noise_reduction,
    relative_error_stop,
)

__all__ = [
    "Decision",
    "DpGuarantee",
    "ExPostCertificate",
    "ExPostFilter",
    "FilterHaltedError",
    "FixedStop",
    "LedgerError",
    "NoiseReductionTranscript",
    "NormOrder",
    "PsiParams",
    "RelativeErrorStop",
    "Sensitivity",
    "StatisticQuery",
    "StoppingFunction",
    "TimeSchedule",
    "TwoTrackSession",
    "UnifiedFilter",
    "ZcdpFilter",
    "ZcdpParams",
    "brownian_noise_reduction",
    "brownian_privacy_loss",
    "exponential_mechanism_argmax",
    "gaussian_mechanism",
    "laplace_mechanism",
    "laplace_noise_reduction",
    "psi",
    "relative_error_stop",
    "rho_for_dp",
    "zcdp_compose",
    "zcdp_to_dp",
]
