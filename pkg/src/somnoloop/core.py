"""Shared domain constants and value types.

Everything here is a plain value; no I/O, no state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict

import numpy as np

SAMPLE_RATE_HZ = 256
EPOCH_SECONDS = 30
EPOCH_SAMPLES = SAMPLE_RATE_HZ * EPOCH_SECONDS  # 7680


class SleepStage(IntEnum):
    """AASM 5-class staging; integer codes are stable in files."""

    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


STAGE_ORDER = (SleepStage.W, SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.REM)


@dataclass
class Epoch:
    """One 30-second, per-channel sample buffer; the unit of all analysis.

    ``channels`` maps a channel id to a float array of exactly EPOCH_SAMPLES
    samples in physical units.
    """

    epoch_index: int
    channels: Dict["int", np.ndarray] = field(default_factory=dict)

    def channel(self, channel_id) -> np.ndarray:
        return self.channels[channel_id]

    @property
    def first_sample_index(self) -> int:
        return self.epoch_index * EPOCH_SAMPLES
