"""advpatch: universal targeted adversarial patches against a self-trained CNN zoo.

The package trains small convolutional classifiers from scratch on a built-in
synthetic dataset (or CIFAR-10), optimizes universal targeted patches with an
expectation-over-transformation objective, and benchmarks them with
whitebox / ensemble / blackbox / control evaluation protocols.
"""

from .errors import (
    AdvPatchError,
    ArchitectureError,
    ConfigError,
    DataError,
    FormatError,
    NumericsError,
    ShapeError,
    StateError,
)

__all__ = [
    "AdvPatchError",
    "ArchitectureError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericsError",
    "ShapeError",
    "StateError",
]

__version__ = "0.1.0"
