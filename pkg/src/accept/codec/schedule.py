from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

FORWARD_START, FORWARD_MAX = 2, 4
BACKWARD_START, BACKWARD_MIN = 8, 4

CODEC_MODES = ("off", "fixed", "adaptive")


@dataclass(frozen=True)
class BitwidthSchedule:
    """Forward bits grow by one per LR change (up to 4); backward bits drop 8 -> 4."""

    forward_k: int = FORWARD_START
    backward_k: int = BACKWARD_START
    events: int = 0


def bitwidth_on_lr_change(schedule: BitwidthSchedule) -> BitwidthSchedule:
    return BitwidthSchedule(
        forward_k=min(schedule.forward_k + 1, FORWARD_MAX),
        backward_k=BACKWARD_MIN,
        events=schedule.events + 1,
    )


def lr_at_epoch(lr_schedule: Sequence[Sequence[float]], epoch: int) -> float:
    """``lr_schedule`` is a list of (start_epoch, lr) pairs sorted by epoch."""
    lr = lr_schedule[0][1]
    for start, value in lr_schedule:
        if epoch >= start:
            lr = value
    return float(lr)


def lr_changes_before(lr_schedule: Sequence[Sequence[float]], epoch: int) -> int:
    """Number of LR changes that have taken effect by ``epoch`` (the initial LR is not a change)."""
    return sum(1 for start, _ in lr_schedule[1:] if epoch >= start)


def bitwidths_for_epoch(mode: str, lr_schedule, epoch: int, fixed_k: int = 2) -> BitwidthSchedule:
    if mode not in CODEC_MODES:
        raise ValueError(f"codec mode must be one of {CODEC_MODES}, got {mode!r}")
    if mode == "fixed":
        return BitwidthSchedule(fixed_k, BACKWARD_START)
    sched = BitwidthSchedule()
    for _ in range(lr_changes_before(lr_schedule, epoch)):
        sched = bitwidth_on_lr_change(sched)
    return sched
