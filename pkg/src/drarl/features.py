"""Observation featurization for the driving policy.

The observation is translation invariant: ego speed, lateral offset and
heading error against the route, progress remaining, then the K nearest
objects as relative position, relative velocity, kind one-hot and a presence
flag.  Absent slots are zero-filled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Frame, ScenarioMap, VALID_KINDS, wrap_angle

K_NEAREST = 4

_KIND_INDEX = {k: i for i, k in enumerate(VALID_KINDS)}

EGO_FEATURES = 4
PER_OBJECT = 4 + len(VALID_KINDS) + 1
OBS_DIM = EGO_FEATURES + K_NEAREST * PER_OBJECT


@dataclass(frozen=True)
class FeatureScales:
    """Fixed normalization constants stored alongside any policy."""

    speed: float = 15.0
    distance: float = 30.0
    progress: float = 100.0


def featurize(frame: Frame, smap: ScenarioMap, scales: FeatureScales | None = None) -> np.ndarray:
    scales = scales or FeatureScales()
    ego = frame.ego
    progress, lateral, route_heading = smap.frenet(ego.x, ego.y)
    heading_err = wrap_angle(ego.heading - route_heading)
    remaining = smap.route_length() - progress
    out = np.zeros(OBS_DIM)
    out[0] = ego.speed / scales.speed
    out[1] = lateral / smap.lane_width
    out[2] = heading_err / math.pi
    out[3] = remaining / scales.progress
    ranked = sorted(
        frame.objects,
        key=lambda rec: (math.hypot(rec.state.x - ego.x, rec.state.y - ego.y), rec.uid),
    )
    for slot, rec in enumerate(ranked[:K_NEAREST]):
        base = EGO_FEATURES + slot * PER_OBJECT
        st = rec.state
        out[base + 0] = (st.x - ego.x) / scales.distance
        out[base + 1] = (st.y - ego.y) / scales.distance
        out[base + 2] = (st.vx - ego.vx) / scales.speed
        out[base + 3] = (st.vy - ego.vy) / scales.speed
        out[base + 4 + _KIND_INDEX[rec.kind]] = 1.0
        out[base + 4 + len(VALID_KINDS)] = 1.0
    return out
