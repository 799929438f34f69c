"""Python front end for the cpmlho C++ library."""

from ._cpmlho import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    FormatError,
    PairingError,
    TruncationError,
    baseline,
    format_number,
    gradcheck,
    gradcheck_report,
    load_idx,
    make_synthetic,
    parse_number,
    resolve_config,
    response_gap,
    sha256_hex,
    sweep,
    sweepable_keys,
    train,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "Error",
    "FormatError",
    "PairingError",
    "TruncationError",
    "baseline",
    "format_number",
    "gradcheck",
    "gradcheck_report",
    "load_idx",
    "make_synthetic",
    "parse_number",
    "resolve_config",
    "response_gap",
    "sha256_hex",
    "sweep",
    "sweepable_keys",
    "train",
]
