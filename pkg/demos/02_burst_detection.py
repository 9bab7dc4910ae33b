"""
Poisson burst detection
=======================

Each query's hourly search count is compared with the floored mean of the
previous 24 hours. The surprise of a count is -ln P(X >= count) under a
Poisson model; a window bursts when the surprise reaches 9 nats.
"""

import numpy as np

from rttp.burst import QueryVolumeSeries, detect_bursts, poisson_surprise

###############################################################################
# Surprise grows quickly once a count leaves the bulk of the distribution.
for observed in (5, 10, 15, 20, 30, 50):
    print(f"observed {observed:3d} at rate 5: surprise {poisson_surprise(observed, 5.0):7.3f}")

###############################################################################
# A stream of background traffic with one planted spike.
rng = np.random.default_rng(0)
counts = rng.poisson(5.0, size=200)
counts[150] = 45
series = QueryVolumeSeries("eras tour", tuple(int(c) for c in counts))
for event in detect_bursts(series):
    print(f"window {event.window_index}: {event.observed} searches, rate {event.expected_rate:.2f}, "
          f"surprise {event.surprise:.1f}")

###############################################################################
# On pure background traffic the threshold should almost never fire.
null = rng.poisson(5.0, size=10_024)
fires = detect_bursts(QueryVolumeSeries("null", tuple(int(c) for c in null)))
print(f"false fires on 10,000 null windows: {len(fires)} (threshold tail ~ {10_000 * np.exp(-9):.2f})")
