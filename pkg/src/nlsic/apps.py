"""Common output type of all APP detectors, plus operation counting.

Every detector (forward-backward, Gibbs sampler, recurrent network) returns
an :class:`AppMatrix`: one PMF over the symbol alphabet per target position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG2 = np.log(2.0)


@dataclass
class MultCounter:
    """Tally of real multiplications executed by an instrumented kernel."""

    total: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, count: int) -> None:
        self.total += int(count)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(count)


@dataclass
class AppMatrix:
    """Per-symbol a-posteriori PMFs over the alphabet.

    Attributes:
        probs: (N, M) probabilities, each row a PMF.
        logp: (N, M) natural-log probabilities (kept alongside for
            rate estimation without re-taking logs of tiny numbers).
        positions: (N,) serial 0-based symbol indices the rows refer to.
    """

    probs: np.ndarray
    logp: np.ndarray
    positions: np.ndarray

    @classmethod
    def from_logp(cls, logp: np.ndarray, positions: np.ndarray) -> "AppMatrix":
        """Normalize unnormalized log scores row-wise into PMFs."""
        logp = np.asarray(logp, dtype=np.float64)
        mx = logp.max(axis=1, keepdims=True)
        z = np.exp(logp - mx)
        denom = z.sum(axis=1, keepdims=True)
        probs = z / denom
        norm_logp = (logp - mx) - np.log(denom)
        return cls(probs=probs, logp=norm_logp, positions=np.asarray(positions))

    @classmethod
    def point_masses(cls, indices: np.ndarray, m_symbols: int,
                     positions: np.ndarray) -> "AppMatrix":
        """Exact one-hot rows (used for pinned positions)."""
        n = len(indices)
        probs = np.zeros((n, m_symbols))
        probs[np.arange(n), np.asarray(indices, dtype=int)] = 1.0
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        return cls(probs=probs, logp=logp, positions=np.asarray(positions))

    @property
    def n_rows(self) -> int:
        return self.probs.shape[0]

    def log2_prob_of(self, indices: np.ndarray, floor: float = 1e-30) -> np.ndarray:
        """log2 of the probability assigned to given symbol indices per row.

        Probabilities below `floor` are clamped so the result stays finite.
        """
        p = self.probs[np.arange(self.n_rows), np.asarray(indices, dtype=int)]
        return np.log2(np.maximum(p, floor))
