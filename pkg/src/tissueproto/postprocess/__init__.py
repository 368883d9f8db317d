from .crf import CrfContractError, CrfParams, appearance_filter, dense_crf, exact_kernel, mean_field, potts, unary_from_probabilities
from .probabilities import (PostprocessConfig, assemble_probabilities, background_probability,
                            predict_mask, refined_maps)
from .tta import IDENTITY, TtaConfig, augment, tta_cams

__all__ = [
    "CrfContractError", "CrfParams", "IDENTITY", "PostprocessConfig", "TtaConfig",
    "appearance_filter", "assemble_probabilities", "augment", "background_probability", "dense_crf", "exact_kernel",
    "mean_field", "potts", "predict_mask", "refined_maps", "tta_cams", "unary_from_probabilities",
]
