"""Frame representations built from one event window.

Three encodings feed the feature providers:

* polarity histogram: per-pixel, per-polarity event counts (H, W, 2);
* multi-channel time surface (MCTS): exponential decay of time since the
  last event at each pixel/polarity, one channel per time constant
  (H, W, 2, K);
* tencode: 3-channel image of last-event polarity and temporal recency
  (H, W, 3) with channels (p, recency, 1 - p).

All builders are pure functions of (window, geometry, parameters) and are
deterministic, so they can run in parallel across windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveTau
from .event_io import EventWindow

# Time constants for the MCTS channels, microseconds.
DEFAULT_MCTS_TAUS_US = (10_000, 20_000, 30_000, 40_000, 50_000)

# One timestamp quantum; keeps the recency denominator nonzero for
# single-instant windows.
DEFAULT_RECENCY_EPSILON_US = 1.0


@dataclass(frozen=True)
class PolarityHistogram:
    """Event counts per (row, col, polarity); dtype uint32."""

    data: np.ndarray

    @property
    def total(self) -> int:
        return int(self.data.sum(dtype=np.uint64))

    def to_float(self) -> np.ndarray:
        """Counts as float32, the provider-boundary convention."""
        return self.data.astype(np.float32)


@dataclass(frozen=True)
class MctsTensor:
    """Time-surface values in [0, 1] per (row, col, polarity, tau)."""

    data: np.ndarray
    taus: tuple[float, ...]


@dataclass(frozen=True)
class TencodeImage:
    """(row, col, channel) image; channels are (p, recency, 1 - p)."""

    data: np.ndarray


def build_histogram(window: EventWindow, geometry: tuple[int, int]) -> PolarityHistogram:
    """Count events per pixel and polarity; empty windows give all zeros."""
    width, height = geometry
    ev = window.events
    if len(ev) == 0:
        return PolarityHistogram(np.zeros((height, width, 2), dtype=np.uint32))
    flat = (ev["y"].astype(np.int64) * width + ev["x"]) * 2 + ev["p"]
    counts = np.bincount(flat, minlength=height * width * 2)
    return PolarityHistogram(counts.reshape(height, width, 2).astype(np.uint32))


def build_mcts(window: EventWindow, geometry: tuple[int, int],
               taus: tuple[float, ...] = DEFAULT_MCTS_TAUS_US,
               t_ref: int | None = None) -> MctsTensor:
    """Build the multi-channel time surface for one window.

    Each cell holds exp(-(t_ref - t_last) / tau) where t_last is the most
    recent event at that pixel and polarity inside the window, and exactly
    0 where no event occurred. t_ref defaults to the window end, the only
    causal choice for offline batches; it is shared by all tau channels.
    """
    taus = tuple(float(tau) for tau in taus)
    if not taus or any(tau <= 0 for tau in taus):
        raise NonPositiveTau(f"time constants must be positive, got {taus}")
    width, height = geometry
    ev = window.events
    if t_ref is None:
        t_ref = window.t_max
    out = np.zeros((height, width, 2, len(taus)), dtype=np.float32)
    if len(ev) == 0:
        return MctsTensor(out, taus)
    if int(ev["t"].max()) > t_ref:
        raise ValueError("t_ref precedes an event in the window")

    t_last = np.full(height * width * 2, -1, dtype=np.int64)
    flat = (ev["y"].astype(np.int64) * width + ev["x"]) * 2 + ev["p"]
    np.maximum.at(t_last, flat, ev["t"].astype(np.int64))
    active = t_last >= 0
    elapsed = (float(t_ref) - t_last[active].astype(np.float64))
    values = np.exp(-elapsed[:, None] / np.asarray(taus, dtype=np.float64))
    flat_out = out.reshape(-1, len(taus))
    flat_out[active] = values.astype(np.float32)
    return MctsTensor(out, taus)


def build_tencode(window: EventWindow, geometry: tuple[int, int],
                  epsilon: float = DEFAULT_RECENCY_EPSILON_US,
                  background: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> TencodeImage:
    """Build the tencode image for one window.

    Per pixel, the event with the highest stream index wins (so among
    equal-timestamp events the later one). Its polarity p and temporal
    recency 1 - (t - t_min) / (t_max - t_min + epsilon) fill the channels
    (p, recency, 1 - p); pixels without events take ``background``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    width, height = geometry
    out = np.empty((height, width, 3), dtype=np.float32)
    out[:] = np.asarray(background, dtype=np.float32)
    ev = window.events
    if len(ev) == 0:
        return TencodeImage(out)

    last_idx = np.full(height * width, -1, dtype=np.int64)
    flat = ev["y"].astype(np.int64) * width + ev["x"]
    np.maximum.at(last_idx, flat, np.arange(len(ev), dtype=np.int64))
    active = last_idx >= 0
    winners = ev[last_idx[active]]
    span = float(window.t_max - window.t_min) + float(epsilon)
    recency = 1.0 - (winners["t"].astype(np.float64) - float(window.t_min)) / span
    p = winners["p"].astype(np.float32)

    flat_out = out.reshape(-1, 3)
    flat_out[active, 0] = p
    flat_out[active, 1] = recency.astype(np.float32)
    flat_out[active, 2] = 1.0 - p
    return TencodeImage(out)
