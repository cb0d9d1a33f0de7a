"""Federated ViT/CNN simulation with CKA representation analysis."""

from ._vitfl import (
    ConfigError,
    Error,
    FormatError,
    NumericError,
    ShapeError,
    __version__,
    analyze,
    cka,
    config_hash,
    fedavg_aggregate,
    generate_synthetic,
    gram_linear,
    hsic1_unbiased,
    load_cifar10,
    moon_loss,
    normalize_config,
    partition,
    read_cka_csv,
    run,
    verify,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
