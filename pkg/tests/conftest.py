import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evpr.event_io import EventWindow, make_events  # noqa: E402


def window_from_tuples(tuples, t_min=None, t_max=None, index=0) -> EventWindow:
    """Build an EventWindow from (t, x, y, p) tuples for unit tests."""
    if tuples:
        t, x, y, p = zip(*tuples)
    else:
        t = x = y = p = ()
    events = make_events(t, x, y, p)
    if t_min is None:
        t_min = int(events["t"][0]) if len(events) else 0
    if t_max is None:
        t_max = int(events["t"][-1]) if len(events) else 0
    return EventWindow(t_min=t_min, t_max=t_max, events=events, index=index)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_window(rng, n_events: int, geometry, t_span=50_000, t0=0) -> EventWindow:
    width, height = geometry
    t = np.sort(rng.integers(t0, t0 + t_span, size=n_events))
    events = make_events(t,
                         rng.integers(0, width, size=n_events),
                         rng.integers(0, height, size=n_events),
                         rng.integers(0, 2, size=n_events))
    return EventWindow(t_min=t0, t_max=t0 + t_span, events=events, index=0)
