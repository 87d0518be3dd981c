"""Shared test helpers."""
from pathlib import Path

import numpy as np


class MonotonicityRecorder:
    def __init__(self):
        self.previous = None
        self.calls = 0
        self.violations = 0

    def __call__(self, stage, iteration, field):
        scores = field.scores
        if self.previous is not None:
            # every rank of a sorted list can only improve under strict insertion
            self.violations += int(np.count_nonzero(scores < self.previous))
        self.previous = scores.copy()
        self.calls += 1


FIXTURES = Path(__file__).parent / "fixtures"


def unique_patch_image(size, seed, channels=1):
    """Random texture whose patches are almost surely pairwise distinct."""
    return np.random.default_rng(seed).random((size, size, channels))


#: One "PASS/FAIL" line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = []


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
