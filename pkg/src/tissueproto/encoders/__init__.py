from .base import (BackendUnavailable, EncoderBackend, FeaturePyramid, available_backends,
                   get_backend, register_backend)
from .adapters import (Adapter, AdapterStack, REAL_ADAPTER_HIDDEN, adapt, count_parameters,
                       trainable_parameter_report)
from . import toy as _toy  # noqa: F401  registers "toy"
from . import real as _real  # noqa: F401  registers "conch+segformer"
from .toy import ToyBackend

__all__ = [
    "Adapter", "AdapterStack", "BackendUnavailable", "EncoderBackend", "FeaturePyramid",
    "REAL_ADAPTER_HIDDEN", "ToyBackend", "adapt", "available_backends", "count_parameters",
    "get_backend", "register_backend", "trainable_parameter_report",
]
