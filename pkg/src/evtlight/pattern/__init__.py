"""Pattern codification: De Bruijn sequences, Perfect SubMaps and signal assignment."""

from evtlight.pattern.debruijn import (
    PatternSizeError,
    cyclic_windows,
    debruijn_rows,
    generate_debruijn,
)
from evtlight.pattern.io import load_pattern, pattern_from_dict, pattern_to_dict, save_pattern
from evtlight.pattern.psm import (
    GenerationError,
    PSMReport,
    SymbolGrid,
    codeword_index,
    generate_psm,
    verify_psm,
    window_codewords,
)
from evtlight.pattern.signals import (
    DEFAULT_DUTYCYCLES,
    DEFAULT_FREQUENCY_HZ,
    DMD_MAX_MIRRORS,
    DMD_STEP_US,
    PROJECTOR_HEIGHT,
    PROJECTOR_WIDTH,
    SENSOR_BANDWIDTH_EPS,
    BudgetReport,
    ConfigurationError,
    DomainError,
    LoadStats,
    PatternSpec,
    SignalSpec,
    assign_signals,
    check_dmd_budget,
    default_alphabet,
    load_statistics,
    make_stripe_pattern,
    square_wave_edges,
)

__all__ = [
    "BudgetReport",
    "ConfigurationError",
    "DEFAULT_DUTYCYCLES",
    "DEFAULT_FREQUENCY_HZ",
    "DMD_MAX_MIRRORS",
    "DMD_STEP_US",
    "DomainError",
    "GenerationError",
    "LoadStats",
    "PROJECTOR_HEIGHT",
    "PROJECTOR_WIDTH",
    "PSMReport",
    "PatternSizeError",
    "PatternSpec",
    "SENSOR_BANDWIDTH_EPS",
    "SignalSpec",
    "SymbolGrid",
    "assign_signals",
    "check_dmd_budget",
    "codeword_index",
    "cyclic_windows",
    "debruijn_rows",
    "default_alphabet",
    "generate_debruijn",
    "generate_psm",
    "load_pattern",
    "load_statistics",
    "make_stripe_pattern",
    "pattern_from_dict",
    "pattern_to_dict",
    "save_pattern",
    "square_wave_edges",
    "verify_psm",
    "window_codewords",
]
