"""Counter-based sample blocks, deterministic reductions and the MC result type.

Samples are cut into fixed-size blocks; block ``b`` of a run seeded with
``seed`` draws from a Philox stream keyed by ``(seed, stream, b)``. Blocks are
reduced in block order, so the estimate depends on ``(seed, n_samples)`` only,
never on how many workers processed the blocks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

BLOCK_SIZE = 1 << 15


def block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def block_sizes(n_samples: int, block_size: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(int(n_samples), block_size)
    return [block_size] * full + ([rest] if rest else [])


@dataclass
class MCEstimate:
    mean: float | np.ndarray
    stderr: float | np.ndarray
    n_samples: int
    work: int = 0

    @property
    def work_per_sample(self) -> float:
        return self.work / self.n_samples

    def __iter__(self):
        yield self.mean
        yield self.stderr


class Moments:
    """Running count/mean/M2 merged pairwise (Chan et al.)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add_block(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        k = values.shape[0]
        if k == 0:
            return
        mean_b = values.mean(axis=0)
        m2_b = ((values - mean_b) ** 2).sum(axis=0)
        if self.count == 0:
            self.count, self.mean, self.m2 = k, mean_b, m2_b
            return
        tot = self.count + k
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (k / tot)
        self.m2 = self.m2 + m2_b + delta**2 * (self.count * k / tot)
        self.count = tot

    def estimate(self, work: int = 0) -> MCEstimate:
        if self.count == 0:
            raise ValueError("no samples")
        var = self.m2 / (self.count - 1) if self.count > 1 else 0.0 * self.m2
        stderr = np.sqrt(var / self.count)
        mean = self.mean
        if np.ndim(mean) == 0:
            mean, stderr = float(mean), float(stderr)
        return MCEstimate(mean, stderr, self.count, work)


def run_blocks(
    block_fn: Callable[[np.random.Generator, int, int], tuple[np.ndarray, int]],
    n_samples: int,
    seed: int,
    stream: int = 0,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> MCEstimate:
    """Evaluate ``block_fn(rng, size, block) -> (per-sample values, work)`` over all
    blocks and reduce in block order."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    sizes = block_sizes(n_samples, block_size)

    def one(b):
        return block_fn(block_rng(seed, b, stream), sizes[b], b)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(sizes))))
    else:
        results = [one(b) for b in range(len(sizes))]
    acc = Moments()
    work = 0
    for values, w in results:
        acc.add_block(values)
        work += int(w)
    return acc.estimate(work)
