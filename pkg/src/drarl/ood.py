"""Out-of-distribution detection and disengagement-reason traceback.

For each object and frame, the predictor samples futures from the window two
frames back; a Gaussian KDE over those sampled positions turns the realized
position into a highest-density-region p-value e (the fraction of sampled
futures whose density does not exceed the query's).  A frame is OOD when e
falls below the threshold, and the reason window of an object starts at its
earliest OOD frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DisengagementCase, ReasonElement, ReasonSet, VALID_KINDS
from .predictor import (
    HORIZON_FRAMES,
    FutureSampleSet,
    PredictorModel,
    build_window,
    sample_from_modes,
)

BANDWIDTH_FLOOR = 0.05  # metres; keeps degenerate clouds usable


class OodError(Exception):
    pass


@dataclass(frozen=True)
class KdeModel:
    """Product-Gaussian KDE with per-axis Scott bandwidths."""

    points: np.ndarray            # (n, 2)
    bandwidth: np.ndarray         # (2,)
    point_densities: np.ndarray   # density of the KDE at its own points
    degenerate: bool = False      # all inputs identical; floor applied

    @property
    def n(self) -> int:
        return self.points.shape[0]


def fit_kde(samples: FutureSampleSet | np.ndarray) -> KdeModel:
    """Fit the KDE; per-axis h = sigma * n^(-1/6), floored at 0.05 m."""
    pts = samples.positions if isinstance(samples, FutureSampleSet) else np.asarray(samples, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise OodError("need an (n, 2) array with n >= 2 to fit a density")
    if not np.all(np.isfinite(pts)):
        raise OodError("non-finite sample positions")
    n = pts.shape[0]
    sigma = pts.std(axis=0, ddof=1)
    h = np.maximum(sigma * n ** (-1.0 / 6.0), BANDWIDTH_FLOOR)
    degenerate = bool(np.all(pts == pts[0]))
    model = KdeModel(points=pts, bandwidth=h, point_densities=np.empty(0), degenerate=degenerate)
    dens = kde_density(model, pts)
    return replace(model, point_densities=dens)


def kde_density(kde: KdeModel, query: np.ndarray) -> np.ndarray:
    """Density at query points (m, 2); vectorized over the full cloud."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    hx, hy = kde.bandwidth
    dx = (q[:, None, 0] - kde.points[None, :, 0]) / hx
    dy = (q[:, None, 1] - kde.points[None, :, 1]) / hy
    log_norm = math.log(2.0 * math.pi * hx * hy)
    dens = np.exp(-0.5 * (dx * dx + dy * dy) - log_norm).mean(axis=1)
    return dens


def tail_probability(kde: KdeModel, x: tuple[float, float] | np.ndarray) -> float:
    """Highest-density-region p-value: the fraction of the cloud's own points
    whose density does not exceed the density at x."""
    fx = kde_density(kde, np.asarray(x, dtype=np.float64).reshape(1, 2))[0]
    return float(np.count_nonzero(kde.point_densities <= fx) / kde.n)


@dataclass(frozen=True)
class ReasonConfig:
    """Knobs for OOD checking and the reason traceback."""

    ood_threshold: float = 1e-4       # e below this is out of distribution
    n_samples: int = 1000
    horizon_frames: int = HORIZON_FRAMES
    proximity_filter: bool = True
    proximity_radius: float = 20.0    # metres from the ego, any frame
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.ood_threshold < 1.0):
            raise ValueError("ood_threshold must lie in (0, 1)")
        if self.n_samples < 2 or self.horizon_frames < 1:
            raise ValueError("need n_samples >= 2 and horizon_frames >= 1")


@dataclass(frozen=True)
class OodVerdict:
    """Outcome of one (object, frame) check."""

    uid: int
    t: int
    tail_prob: float
    is_ood: bool
    position: tuple[float, float]
    absent: bool = False


def _check_rng(config: ReasonConfig, uid: int, t: int) -> np.random.Generator:
    # every (object, frame) check gets its own reproducible stream
    return np.random.default_rng(np.random.SeedSequence([config.seed, uid & 0x7FFFFFFF, t]))


def check_state(
    model: PredictorModel,
    case: DisengagementCase,
    uid: int,
    t: int,
    config: ReasonConfig,
) -> OodVerdict:
    """OOD verdict for object uid at frame t of the case.

    The window ends at t - horizon.  When the object is absent there or at t,
    or the window history is incomplete (the model only ever trained on full
    windows), no judgment is possible and the verdict carries the absent flag.
    """
    gamma = config.horizon_frames
    if t < gamma:
        raise OodError(f"frame {t} is earlier than the {gamma}-frame horizon")
    frames = case.frames
    rec = frames[t].get(uid) if t < len(frames) else None
    window = build_window(frames, uid, t - gamma)
    if rec is None or window is None or window.padded:
        return OodVerdict(uid, t, 1.0, False, (math.nan, math.nan), absent=True)
    if rec.kind not in VALID_KINDS:
        raise OodError(f"unknown object kind {rec.kind!r}")
    probs, means, logstds = model.mode_params(window)
    samples = sample_from_modes(
        probs, means, np.exp(logstds), window.current, window.kind,
        gamma, config.n_samples, _check_rng(config, uid, t),
    )
    kde = fit_kde(samples)
    e = tail_probability(kde, (rec.state.x, rec.state.y))
    return OodVerdict(uid, t, e, e < config.ood_threshold, (rec.state.x, rec.state.y))


def _within_proximity(case: DisengagementCase, uid: int, radius: float) -> bool:
    for fr in case.frames:
        rec = fr.get(uid)
        if rec is None:
            continue
        if math.hypot(rec.state.x - fr.ego.x, rec.state.y - fr.ego.y) <= radius:
            return True
    return False


def proximity_uids(case: DisengagementCase, radius: float) -> tuple[int, ...]:
    """Objects that ever come within the radius of the ego during the case."""
    return tuple(uid for uid in case.object_uids()
                 if _within_proximity(case, uid, radius))


@dataclass
class ReasonTrace:
    """Reason set plus the per-check verdicts behind it."""

    reason: ReasonSet
    verdicts: list[OodVerdict] = field(default_factory=list)
    filtered_uids: tuple[int, ...] = ()   # objects excluded by proximity


def trace_reason(
    case: DisengagementCase,
    model: PredictorModel,
    config: ReasonConfig,
) -> ReasonTrace:
    """Scan every candidate object over the whole recording.

    For each object the scan runs from the horizon frame up to the takeover
    frame and stops at the first OOD verdict, which is by construction the
    earliest anomalous frame; that frame starts the object's reason window.
    """
    d = case.disengagement_t
    gamma = config.horizon_frames
    elements: list[ReasonElement] = []
    verdicts: list[OodVerdict] = []
    skipped: list[int] = []
    for uid in case.object_uids():
        if config.proximity_filter and not _within_proximity(case, uid, config.proximity_radius):
            skipped.append(uid)
            continue
        for t in range(gamma, d + 1):
            v = check_state(model, case, uid, t, config)
            verdicts.append(v)
            if v.absent:
                continue
            if v.is_ood:
                # a first flag exactly at the takeover frame still names the
                # object; the window start clamps to keep start < end
                elements.append(ReasonElement(uid, min(t, d - 1), d))
                break
    return ReasonTrace(ReasonSet(tuple(elements)), verdicts, tuple(skipped))


def identify_reason(
    case: DisengagementCase,
    model: PredictorModel,
    config: ReasonConfig | None = None,
) -> ReasonSet:
    """Reason set of a case; empty means a casual disengagement."""
    return trace_reason(case, model, config or ReasonConfig()).reason
