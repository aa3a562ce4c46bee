"""The 14-finding label vocabulary and label-vector validation.

The vocabulary is closed: every label vector in the package is a binary
vector of length 14 indexed against ``FINDINGS``, and "No Finding" is
mutually exclusive with every other finding.
"""

from __future__ import annotations

import numpy as np

FINDINGS: tuple[str, ...] = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

FINDING_INDEX: dict[str, int] = {name: i for i, name in enumerate(FINDINGS)}

NO_FINDING = FINDING_INDEX["No Finding"]

# The six classes used by the classification benchmark and per-class metrics.
BENCH_CLASSES: tuple[str, ...] = (
    "Cardiomegaly",
    "Lung Opacity",
    "Edema",
    "No Finding",
    "Pneumothorax",
    "Pleural Effusion",
)


def label_vector(*names: str) -> np.ndarray:
    """Binary length-14 vector with the named findings set."""
    vec = np.zeros(len(FINDINGS), dtype=np.int8)
    for name in names:
        if name not in FINDING_INDEX:
            raise ValueError(f"unknown finding: {name!r}")
        vec[FINDING_INDEX[name]] = 1
    return vec


def active_findings(labels: np.ndarray) -> list[str]:
    """Names of the set findings, in vocabulary order."""
    labels = np.asarray(labels)
    return [FINDINGS[i] for i in range(len(FINDINGS)) if labels[i]]


def validate_labels(labels: np.ndarray) -> np.ndarray:
    """Check a label vector against the vocabulary invariants.

    Returns the vector as int8.  Raises ValueError if the vector has the
    wrong length, non-binary entries, no set finding, or combines
    "No Finding" with another finding.
    """
    labels = np.asarray(labels)
    if labels.shape != (len(FINDINGS),):
        raise ValueError(f"label vector must have shape ({len(FINDINGS)},), got {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("label vector must be binary")
    total = int(labels.sum())
    if total == 0:
        raise ValueError("label vector must set at least one finding")
    if labels[NO_FINDING] and total > 1:
        raise ValueError("'No Finding' is exclusive and cannot be combined with other findings")
    return labels.astype(np.int8)
