"""Hierarchical VQ-VAE with autoregressive priors."""

from ._core import (  # noqa: F401
    Codec,
    Prior,
    evaluate,
    extract_codes,
    generate,
    gradient_suite,
    load_codec,
    load_prior,
    preset,
    quantize,
    run_stage1,
    run_stage2,
    synthetic_images,
)

__all__ = [
    "Codec",
    "Prior",
    "evaluate",
    "extract_codes",
    "generate",
    "gradient_suite",
    "load_codec",
    "load_prior",
    "preset",
    "quantize",
    "run_stage1",
    "run_stage2",
    "synthetic_images",
]
