"""Gait events, cycle normalization, the deviation index, and timing metrics.

Events are normally ingested from files produced by an upstream detector; a
simple kinematic fallback is provided for trials without one.  Cycles are
built from consecutive same-foot initial contacts after discarding the
trial's first and last steps (the globally earliest and latest contacts,
whichever foot they belong to).

The deviation index follows the classic construction: hip flexion, hip
adduction and knee flexion traces are each resampled to 50 points over the
cycle and concatenated into a 150-vector; a PCA basis fitted on normative
cycles keeps the smallest component count reaching 95% cumulative variance;
a cycle's score is 100 - 10 * z where z standardizes the log distance to
the normative mean within that subspace.  By construction the normative set
scores mean 100 and standard deviation 10 against its own bank.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GaitEvents",
    "GaitCycle",
    "NormativeBank",
    "EventDetectorConfig",
    "extract_cycles",
    "fit_normative",
    "gdi",
    "session_gdi",
    "cadence",
    "double_support_time",
    "detect_events_from_markers",
    "CYCLE_ANGLES",
    "CYCLE_POINTS",
]

CYCLE_POINTS = 50
# per-side coordinate names feeding the 150-vector, in block order
CYCLE_ANGLES = ("hip_flexion", "hip_adduction", "knee_flexion")

GDI_CEILING = 130.0
MIN_CYCLE_S = 0.3
MAX_CYCLE_S = 3.0


@dataclass
class GaitEvents:
    """Per-foot initial-contact and toe-off timestamps (seconds)."""

    ic_left: np.ndarray
    to_left: np.ndarray
    ic_right: np.ndarray
    to_right: np.ndarray
    source: str = "ingested"

    def __post_init__(self):
        for name in ("ic_left", "to_left", "ic_right", "to_right"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if np.any(np.diff(arr) <= 0):
                raise ValueError(f"{name}: event times must be strictly increasing")
        for side in ("left", "right"):
            ic = getattr(self, f"ic_{side}")
            to = getattr(self, f"to_{side}")
            merged = sorted([(t, "ic") for t in ic] + [(t, "to") for t in to])
            for (_, a), (_, b) in zip(merged, merged[1:]):
                if a == b:
                    raise ValueError(f"{side} foot events must alternate IC/TO")

    def ics(self, side: str) -> np.ndarray:
        return self.ic_left if side == "L" else self.ic_right

    def all_ics(self) -> np.ndarray:
        return np.sort(np.concatenate([self.ic_left, self.ic_right]))


@dataclass
class GaitCycle:
    """Cycle-normalized kinematics: 3 traces x 50 points, degrees."""

    vector: np.ndarray
    side: str
    session_id: str = ""
    duration: float = 0.0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (len(CYCLE_ANGLES) * CYCLE_POINTS,):
            raise ValueError("cycle vector must have 150 entries")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("cycle vector must be finite")
        if self.side not in ("L", "R"):
            raise ValueError("side must be 'L' or 'R'")


def resample_trace(times: np.ndarray, values: np.ndarray, t0: float,
                   t1: float, points: int = CYCLE_POINTS) -> np.ndarray:
    """Linear resampling to ``points`` samples at 0%, 2%, ... increments."""
    ts = t0 + (t1 - t0) * np.arange(points) / points
    return np.interp(ts, times, values)


def extract_cycles(times: np.ndarray, angles_deg: dict[str, np.ndarray],
                   events: GaitEvents, session_id: str = "") -> list[GaitCycle]:
    """Cycle vectors for both sides.

    ``angles_deg`` maps per-side coordinate names (``hip_flexion_l`` and so
    on) to degree traces aligned with ``times``.  The trial's first and last
    steps (earliest and latest initial contact over both feet) are discarded
    before pairing same-foot contacts; cycles outside the 0.3-3 s sanity
    window are dropped.
    """
    times = np.asarray(times, dtype=np.float64)
    all_ics = events.all_ics()
    if len(all_ics) < 2:
        warnings.warn("too few initial contacts to form cycles")
        return []
    first, last = all_ics[0], all_ics[-1]
    cycles: list[GaitCycle] = []
    for side in ("L", "R"):
        ics = events.ics(side)
        ics = ics[(ics != first) & (ics != last)]
        if len(ics) < 2:
            continue
        suffix = side.lower()
        for t0, t1 in zip(ics[:-1], ics[1:]):
            duration = t1 - t0
            if not MIN_CYCLE_S < duration < MAX_CYCLE_S:
                continue
            blocks = []
            for angle in CYCLE_ANGLES:
                trace = angles_deg[f"{angle}_{suffix}"]
                blocks.append(resample_trace(times, trace, t0, t1))
            cycles.append(GaitCycle(np.concatenate(blocks), side=side,
                                    session_id=session_id, duration=float(duration)))
    if not cycles:
        warnings.warn("no usable gait cycles after discarding boundary steps")
    return cycles


@dataclass
class NormativeBank:
    """PCA basis over normative cycle vectors plus log-distance statistics."""

    mean: np.ndarray
    components: np.ndarray          # (k, 150)
    explained_ratio: np.ndarray     # all 150 ratios, descending
    n_components: int
    ln_mean: float
    ln_std: float
    ln_floor: float                 # smallest normative distance, guards ln(0)
    n_cycles: int

    def project(self, vector: np.ndarray) -> np.ndarray:
        return self.components @ (np.asarray(vector, dtype=np.float64) - self.mean)


def fit_normative(cycles: list[GaitCycle], variance_target: float = 0.95,
                  min_cycles: int = 150) -> NormativeBank:
    """Mean-centered PCA bank with the 95% cumulative-variance rule.

    Deterministic: eigendecomposition of the covariance with components
    ordered by decreasing eigenvalue and signs fixed so each component's
    largest-magnitude loading is positive.
    """
    if len(cycles) < min_cycles:
        raise ValueError(f"need at least {min_cycles} normative cycles, got {len(cycles)}")
    x = np.stack([c.vector for c in cycles])
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise ValueError("normative cycles have zero variance")
    ratios = evals / total
    k = int(np.searchsorted(np.cumsum(ratios), variance_target) + 1)
    k = min(k, len(evals))
    comps = evecs[:, :k].T
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = centered @ comps.T
    dists = np.linalg.norm(proj, axis=1)
    positive = dists[dists > 0]
    if len(positive) == 0:
        raise ValueError("all normative cycles coincide with the mean")
    floor = float(positive.min())
    ln_d = np.log(np.maximum(dists, floor))
    ln_std = float(ln_d.std(ddof=1))
    if ln_std == 0:
        raise ValueError("degenerate normative distance distribution")
    return NormativeBank(mean=mean, components=comps, explained_ratio=ratios,
                         n_components=k, ln_mean=float(ln_d.mean()),
                         ln_std=ln_std, ln_floor=floor, n_cycles=len(x))


def gdi(cycle: GaitCycle | np.ndarray, bank: NormativeBank) -> float:
    """Deviation score: 100 at the normative mean log-distance, 10 points
    per standard deviation, capped at the configured ceiling."""
    vector = cycle.vector if isinstance(cycle, GaitCycle) else np.asarray(cycle)
    d = float(np.linalg.norm(bank.project(vector)))
    d = max(d, bank.ln_floor)
    z = (np.log(d) - bank.ln_mean) / bank.ln_std
    return float(min(100.0 - 10.0 * z, GDI_CEILING))


def session_gdi(cycles: list[GaitCycle], bank: NormativeBank) -> float:
    """Arithmetic mean of per-step scores over both sides."""
    if not cycles:
        raise ValueError("need at least one cycle")
    return float(np.mean([gdi(c, bank) for c in cycles]))


def cadence(events: GaitEvents) -> float:
    """Steps per minute from bilateral initial contacts."""
    ics = events.all_ics()
    if len(ics) < 2:
        raise ValueError("need at least two initial contacts for cadence")
    duration = ics[-1] - ics[0]
    return 60.0 * (len(ics) - 1) / duration


def double_support_time(events: GaitEvents) -> float:
    """Mean double-support time per gait cycle (seconds).

    Each right-foot cycle contributes two intervals: opposite-foot contact
    persisting after this foot's contact (contact to contralateral toe-off)
    and the mirror interval around the contralateral contact.  Cycles with
    missing toe-offs are skipped; raises if none are measurable.
    """
    per_cycle: list[float] = []
    for side in ("L", "R"):
        ics = events.ics(side)
        opp_ic = events.ics("R" if side == "L" else "L")
        opp_to = events.to_right if side == "L" else events.to_left
        own_to = events.to_left if side == "L" else events.to_right
        for t0, t1 in zip(ics[:-1], ics[1:]):
            ds1_candidates = opp_to[(opp_to > t0) & (opp_to < t1)]
            mid_candidates = opp_ic[(opp_ic > t0) & (opp_ic < t1)]
            if len(ds1_candidates) == 0 or len(mid_candidates) == 0:
                continue
            ds1 = ds1_candidates[0] - t0
            mid = mid_candidates[0]
            own = own_to[(own_to > mid) & (own_to <= t1)]
            if len(own) == 0:
                continue
            per_cycle.append(ds1 + (own[0] - mid))
    if not per_cycle:
        raise ValueError("double-support time unavailable: missing toe-offs")
    return float(np.mean(per_cycle))


@dataclass
class EventDetectorConfig:
    """Kinematic fallback detector parameters."""

    heel_sites: tuple[str, str] = ("LHEEL", "RHEEL")   # left, right
    toe_sites: tuple[str, str] = ("LTOE", "RTOE")
    velocity_fraction: float = 0.3
    min_swing_speed: float = 0.1     # m/s; below this the trial is "standing"
    smooth_window: int = 5
    refine_window_s: float = 0.12


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    kernel = np.ones(window) / window
    return np.convolve(np.pad(x, (window // 2, window // 2), mode="edge"),
                       kernel, mode="valid")[: len(x)]


def detect_events_from_markers(times: np.ndarray, heel_pos: np.ndarray,
                               toe_pos: np.ndarray, heading: np.ndarray,
                               config: EventDetectorConfig | None = None
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Initial contacts and toe-offs for one foot from marker trajectories.

    Swing is where the toe's forward velocity (along ``heading``) exceeds a
    fraction of its peak; contacts are swing offsets refined to the nearest
    heel-height minimum, toe-offs are swing onsets.  A trial whose foot
    never reaches ``min_swing_speed`` yields no events.
    """
    cfg = config or EventDetectorConfig()
    times = np.asarray(times, dtype=np.float64)
    fwd = np.asarray(toe_pos, dtype=np.float64) @ np.asarray(heading, dtype=np.float64)
    vel = _smooth(np.gradient(fwd, times), cfg.smooth_window)
    vmax = vel.max() if len(vel) else 0.0
    if vmax < cfg.min_swing_speed:
        return np.array([]), np.array([])
    swing = vel > cfg.velocity_fraction * vmax
    height = np.asarray(heel_pos, dtype=np.float64)[:, 2]
    ics, tos = [], []
    for i in range(1, len(swing)):
        if swing[i - 1] and not swing[i]:
            lo = np.searchsorted(times, times[i] - cfg.refine_window_s)
            hi = np.searchsorted(times, times[i] + cfg.refine_window_s) + 1
            ics.append(times[lo + int(np.argmin(height[lo:hi]))])
        elif not swing[i - 1] and swing[i]:
            tos.append(times[i])
    ic = np.unique(np.asarray(ics))
    to = np.unique(np.asarray(tos))
    return _enforce_alternation(ic, to)


def _enforce_alternation(ic: np.ndarray, to: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep the longest alternating IC/TO subsequence starting at the first IC."""
    if len(ic) == 0:
        return ic, np.array([])
    events = sorted([(t, "ic") for t in ic] + [(t, "to") for t in to])
    kept_ic, kept_to = [], []
    expect = "ic"
    for t, kind in events:
        if kind != expect:
            continue
        if kind == "ic":
            kept_ic.append(t)
            expect = "to"
        else:
            kept_to.append(t)
            expect = "ic"
    return np.asarray(kept_ic), np.asarray(kept_to)


def detect_events_kinematic(times: np.ndarray, markers: np.ndarray,
                            site_index: dict[str, int],
                            heading: np.ndarray | None = None,
                            config: EventDetectorConfig | None = None) -> GaitEvents:
    """Fallback bilateral event detection from an (F, 87, 3) marker series."""
    cfg = config or EventDetectorConfig()
    markers = np.asarray(markers, dtype=np.float64)
    if heading is None:
        # dominant horizontal direction of overall marker motion
        disp = markers.mean(axis=1)[-1] - markers.mean(axis=1)[0]
        disp[2] = 0.0
        n = np.linalg.norm(disp)
        heading = disp / n if n > 1e-6 else np.array([1.0, 0.0, 0.0])
    ic_l, to_l = detect_events_from_markers(
        times, markers[:, site_index[cfg.heel_sites[0]]],
        markers[:, site_index[cfg.toe_sites[0]]], heading, cfg)
    ic_r, to_r = detect_events_from_markers(
        times, markers[:, site_index[cfg.heel_sites[1]]],
        markers[:, site_index[cfg.toe_sites[1]]], heading, cfg)
    return GaitEvents(ic_left=ic_l, to_left=to_l, ic_right=ic_r, to_right=to_r,
                      source="kinematic-fallback")
