# Copyright 2026 The MARE Authors
# SPDX-License-Identifier: Apache-2.0
"""Multi-aspect rationale extraction."""

from ._core import (
    ConfigError,
    Dataset,
    DimensionError,
    DivergenceError,
    LengthError,
    MareError,
    Model,
    SchemaError,
    VocabularyError,
    run_cli,
    synth,
    token_prf,
    version,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "DimensionError",
    "DivergenceError",
    "LengthError",
    "MareError",
    "Model",
    "SchemaError",
    "VocabularyError",
    "run_cli",
    "synth",
    "token_prf",
    "version",
]
