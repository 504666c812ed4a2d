"""Sequence batch sampler: m = 64 // n sequences with n sorted frames each."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

BATCH_BUDGET = 64


def sequences_per_batch(n: int) -> int:
    if n < 1:
        raise ValueError("frames per sequence must be >= 1")
    return BATCH_BUDGET // n


def sample_batch(lengths, n: int, rng, warn: bool = True):
    """Draw one batch of ``(sequence, frame)`` index pairs.

    ``lengths`` are the frame counts of the dataset's sequences.  Sequences
    shorter than ``n`` are ineligible.  Sequences are drawn without
    replacement when enough are eligible, otherwise with replacement; frames
    within a sequence are distinct and sorted.  Returns an ``(m, n, 2)`` int array.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0:
        raise ValueError("dataset is empty")
    m = sequences_per_batch(n)
    eligible = np.flatnonzero(lengths >= n)
    if eligible.size < lengths.size and warn:
        log.warning("%d sequence(s) shorter than %d frames excluded", lengths.size - eligible.size, n)
    if eligible.size == 0:
        raise ValueError(f"no sequence has at least {n} frames")
    rng = np.random.default_rng(rng)
    if eligible.size >= m:
        seqs = rng.choice(eligible, size=m, replace=False)
    else:
        seqs = rng.choice(eligible, size=m, replace=True)
    # n distinct frames per group: the n smallest of uniform keys over each sequence
    longest = int(lengths[seqs].max())
    keys = rng.random((m, longest))
    keys[np.arange(longest)[None, :] >= lengths[seqs][:, None]] = np.inf
    frames = np.sort(np.argpartition(keys, n - 1, axis=1)[:, :n], axis=1) if n < longest else \
        np.tile(np.arange(n), (m, 1))
    return np.stack([np.repeat(seqs[:, None], n, axis=1), frames], axis=-1)


def expected_draw_count(iterations: int, batch: int, total_frames: int) -> float:
    """Expected selections of one frame, I * B / D, under uniform per-frame marginals."""
    return iterations * batch / total_frames
