"""De-biasing experiment laboratory: HSIC-regularized min-max training and
baselines on a synthetic color-biased digit benchmark."""

from ._core import (
    ConvNetSpec,
    Model,
    __version__,
    bias_audit,
    build_biased_dataset,
    cross_entropy,
    default_f_spec,
    default_g_spec,
    default_palette,
    hsic_biased,
    hsic_from_features,
    hsic_grad,
    hsic_unbiased,
    kmeans,
    lr_schedule,
    median_sigma,
    rbf_gram,
    train_run,
)

__all__ = [
    "ConvNetSpec",
    "Model",
    "__version__",
    "bias_audit",
    "build_biased_dataset",
    "cross_entropy",
    "default_f_spec",
    "default_g_spec",
    "default_palette",
    "hsic_biased",
    "hsic_from_features",
    "hsic_grad",
    "hsic_unbiased",
    "kmeans",
    "lr_schedule",
    "median_sigma",
    "rbf_gram",
    "train_run",
]
