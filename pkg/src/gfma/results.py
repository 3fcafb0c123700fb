"""Result containers shared by the identification and detection stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class IdentificationResult:
    """Estimated active set plus per-device statistics.

    ``scores`` is algorithm specific: per-column detector statistics
    (k_u x L) for the ridge identifier, group norms (k_u,) for the BIC
    identifier.
    """

    active_set: np.ndarray
    scores: np.ndarray | None = None
    decisions: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class DetectionResult:
    """Per-device decoded payloads and packet-error flags.

    ``errors`` holds a flag only for devices that are both truly active and
    identified (falsely identified devices decode noise; they carry no truth
    to compare against).
    """

    payloads: dict[int, np.ndarray]
    errors: dict[int, bool] = field(default_factory=dict)
    order: np.ndarray | None = None
    mf_outputs: dict[int, np.ndarray] | None = None
    partitions: dict[int, np.ndarray] | None = None
    means: dict[int, tuple[complex, complex]] | None = None
