"""Synthetic environments, measurement synthesis, and benchmark scenarios.

Surfaces are deterministic functions (alpha, beta) -> gamma over the unit
submap triangle. Measurement synthesis draws uniform samples in a polygonal
region, perturbs them with a configurable noise model, and attaches the
exact generating covariance to each measurement. Scenario drivers exercise
the incremental-update path of a mesh map and record messaging cost.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .baseline import ElevationMap
from .distributions import kl_gaussian
from .geometry import OutsideSubmap
from .mapgraph import STMMap, incremental_update, map_height
from .surfel import Measurement


class EmptyRegion(Exception):
    """Raised when a sampling polygon has no interior."""


# ---------------------------------------------------------------------------
# synthetic surfaces


@dataclass(frozen=True)
class SyntheticSurface:
    """Deterministic heightfield over the submap.

    kind: "perlin", "profile", or "flat".
    """

    kind: str
    seed: int
    amplitude: float
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)

    def __call__(self, alpha, beta):
        a = np.asarray(alpha, dtype=float)
        b = np.asarray(beta, dtype=float)
        return self.evaluator(a, b)


def _fade(t: np.ndarray) -> np.ndarray:
    # quintic smoothstep, C2 at lattice boundaries
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_surface(
    seed: int,
    amplitude: float = 1.0,
    frequency: float = 4.0,
    octaves: int = 4,
    persistence: float = 0.5,
) -> SyntheticSurface:
    """Gradient-noise heightfield with seeded lattice gradients.

    Octave o contributes at frequency*2^o with weight amplitude*persistence^o,
    so the output is bounded by amplitude * sum of octave weights.
    """
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    rng = np.random.default_rng(seed)
    grids = []
    for o in range(octaves):
        res = max(1, int(round(frequency * 2**o)))
        angles = rng.uniform(0.0, 2.0 * np.pi, size=(res + 1, res + 1))
        grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        grids.append((res, grads))

    def evaluator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.clip(a, 0.0, 1.0)
        b = np.clip(b, 0.0, 1.0)
        total = np.zeros(np.broadcast(a, b).shape)
        amp = amplitude
        for res, grads in grids:
            x = np.minimum(a * res, res - 1e-9)
            y = np.minimum(b * res, res - 1e-9)
            i = x.astype(int)
            j = y.astype(int)
            fx = x - i
            fy = y - j
            n00 = grads[i, j, 0] * fx + grads[i, j, 1] * fy
            n10 = grads[i + 1, j, 0] * (fx - 1.0) + grads[i + 1, j, 1] * fy
            n01 = grads[i, j + 1, 0] * fx + grads[i, j + 1, 1] * (fy - 1.0)
            n11 = grads[i + 1, j + 1, 0] * (fx - 1.0) + grads[i + 1, j + 1, 1] * (
                fy - 1.0
            )
            u = _fade(fx)
            v = _fade(fy)
            top = n00 + u * (n10 - n00)
            bot = n01 + u * (n11 - n01)
            total = total + amp * (top + v * (bot - top))
            amp *= persistence
        return total

    return SyntheticSurface("perlin", seed, amplitude, evaluator)


def profile_surface(amplitude: float = 1.0) -> SyntheticSurface:
    """Fixed smooth 1-D profile; gamma depends on alpha only."""

    def evaluator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        out = amplitude * (
            0.45 * np.sin(2.0 * np.pi * 1.3 * a)
            + 0.30 * np.sin(2.0 * np.pi * 3.1 * a + 0.8)
            + 0.15 * np.sin(2.0 * np.pi * 6.7 * a + 2.1)
        )
        return out + np.zeros(np.broadcast(a, b).shape)

    return SyntheticSurface("profile", 0, amplitude, evaluator)


def flat_surface(height: float = 0.0) -> SyntheticSurface:
    def evaluator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.full(np.broadcast(a, b).shape, float(height))

    return SyntheticSurface("flat", 0, 0.0, evaluator)


# ---------------------------------------------------------------------------
# noise models


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise: diagonal stds rotated randomly per measurement.

    rotate=False keeps the covariance axis-aligned.
    """

    sigmas: tuple
    rotate: bool = True
    profile: str = "custom"

    def __post_init__(self):
        if len(self.sigmas) != 3 or any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be three nonnegative values")

    @staticmethod
    def stereo_like() -> "NoiseSpec":
        # high uncertainty along the simulated ray, low transverse
        return NoiseSpec(sigmas=(0.004, 0.004, 0.12), rotate=True, profile="stereo")

    @staticmethod
    def lidar_like() -> "NoiseSpec":
        return NoiseSpec(sigmas=(0.005, 0.005, 0.005), rotate=False, profile="lidar")

    def draw_cov(self, rng: np.random.Generator) -> np.ndarray:
        d = np.diag(np.square(np.asarray(self.sigmas, dtype=float)))
        if not self.rotate:
            return d
        q, r = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q * np.sign(np.diag(r))
        return q @ d @ q.T


# ---------------------------------------------------------------------------
# measurement synthesis

SUBMAP_TRIANGLE = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting, vectorized over points."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xi)
    return inside


def sample_measurements(
    surface: SyntheticSurface,
    region: np.ndarray,
    density: float,
    noise: NoiseSpec,
    seed: int,
    n_elements_per_unit_area: float,
) -> list[Measurement]:
    """Uniform samples of the surface inside an alpha-beta polygon.

    The sample count is density (measurements per grid element) times the
    number of elements covered by the region; pass 2 * 4**depth for the
    element count per unit of alpha-beta area at that depth.
    """
    region = np.asarray(region, dtype=float)
    area = _polygon_area(region)
    if area <= 0.0:
        raise EmptyRegion("sampling polygon has zero area")
    count = max(1, int(round(density * area * n_elements_per_unit_area)))
    rng = np.random.default_rng(seed)

    lo = region.min(axis=0)
    hi = region.max(axis=0)
    pts = np.empty((0, 2))
    while len(pts) < count:
        cand = rng.uniform(lo, hi, size=(max(64, 4 * count), 2))
        cand = cand[_points_in_polygon(cand, region)]
        pts = np.vstack([pts, cand])
    pts = pts[:count]

    gamma = surface(pts[:, 0], pts[:, 1])
    out = []
    for idx in range(count):
        cov = noise.draw_cov(rng)
        truth = np.array([pts[idx, 0], pts[idx, 1], gamma[idx]])
        sigmas = np.asarray(noise.sigmas)
        if np.all(sigmas == 0.0):
            mean = truth
            cov = np.eye(3) * 1e-18
        else:
            mean = truth + rng.multivariate_normal(np.zeros(3), cov)
        out.append(Measurement(mean=mean, cov=cov, id=idx))
    return out


# ---------------------------------------------------------------------------
# scenario drivers


@dataclass
class StepRecord:
    step: int
    n_new: int
    messages: int
    normalized: float
    total_kl: float
    kl_per_surfel: np.ndarray = field(repr=False, default=None)


@dataclass
class ScenarioReport:
    scenario: str
    steps: list
    total_measurements: int = 0
    total_messages: int = 0

    def finalize(self) -> "ScenarioReport":
        self.total_measurements = sum(s.n_new for s in self.steps)
        self.total_messages = sum(s.messages for s in self.steps)
        return self

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "n_new", "messages", "normalized", "total_kl"])
            for s in self.steps:
                w.writerow(
                    [s.step, s.n_new, s.messages, f"{s.normalized:.6f}", f"{s.total_kl:.6e}"]
                )

    def to_json(self, path: str) -> None:
        payload = {
            "format_version": 1,
            "scenario": self.scenario,
            "total_measurements": self.total_measurements,
            "total_messages": self.total_messages,
            "steps": [
                {
                    "step": s.step,
                    "n_new": s.n_new,
                    "messages": s.messages,
                    "normalized": s.normalized,
                    "total_kl": s.total_kl,
                }
                for s in self.steps
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def _belief_snapshot(stm: STMMap) -> list:
    return [s.belief_h for s in stm.surfels]


def _belief_change_kls(stm: STMMap, before: list) -> np.ndarray:
    kls = np.zeros(len(stm.surfels))
    for i, state in enumerate(stm.surfels):
        old = before[i]
        new = state.belief_h
        if old.is_normalizable() and new.is_normalizable():
            kls[i] = kl_gaussian(new, old)
    return kls


def _run_step(stm: STMMap, batch: list, step: int) -> StepRecord:
    before = _belief_snapshot(stm)
    msg0 = stm.metrics.message_count
    incremental_update(stm, batch)
    messages = stm.metrics.message_count - msg0
    kls = _belief_change_kls(stm, before)
    n_new = len(batch)
    return StepRecord(
        step=step,
        n_new=n_new,
        messages=messages,
        normalized=messages / max(1, n_new),
        total_kl=float(kls.sum()),
        kl_per_surfel=kls,
    )


def scenario_pushbroom(
    stm: STMMap,
    surface: SyntheticSurface,
    steps: int,
    density: float = 10.0,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> ScenarioReport:
    """Forward-shifting sensor band sweeping the submap.

    The band at step k covers beta in [k/steps, (k+1)/steps] clipped to the
    submap triangle, so the swath area shrinks linearly as the frontier
    advances toward the apex.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    noise = noise or NoiseSpec.lidar_like()
    per_area = 2.0 * 4.0**stm.grid.depth
    report = ScenarioReport(scenario="pushbroom", steps=[])
    for k in range(steps):
        b0 = k / steps
        b1 = (k + 1) / steps
        band = np.array(
            [[0.0, b0], [1.0 - b0, b0], [1.0 - b1, b1], [0.0, b1]]
        )
        batch = sample_measurements(surface, band, density, noise, seed + k, per_area)
        report.steps.append(_run_step(stm, batch, k))
    return report.finalize()


def scenario_reobserve(
    stm: STMMap,
    surface: SyntheticSurface,
    steps: int,
    density: float = 10.0,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> ScenarioReport:
    """Identical full-region batch folded in repeatedly."""
    if steps < 3:
        raise ValueError("steps must be >= 3")
    noise = noise or NoiseSpec.lidar_like()
    per_area = 2.0 * 4.0**stm.grid.depth
    batch = sample_measurements(
        surface, SUBMAP_TRIANGLE, density, noise, seed, per_area
    )
    report = ScenarioReport(scenario="reobserve", steps=[])
    for k in range(steps):
        report.steps.append(_run_step(stm, batch, k))
    return report.finalize()


# ---------------------------------------------------------------------------
# accuracy metrics


def _eval_points(n_eval: int, seed: int) -> np.ndarray:
    """Uniform points in the open submap triangle."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(1e-6, 1.0 - 1e-6, size=(2 * n_eval + 64, 2))
    pts = pts[pts.sum(axis=1) < 1.0 - 1e-6]
    while len(pts) < n_eval:
        more = rng.uniform(1e-6, 1.0 - 1e-6, size=(2 * n_eval, 2))
        pts = np.vstack([pts, more[more.sum(axis=1) < 1.0 - 1e-6]])
    return pts[:n_eval]


def _model_mean(model: Union[STMMap, ElevationMap], alpha: float, beta: float) -> float:
    if isinstance(model, STMMap):
        return map_height(model, alpha, beta)
    return model.height(alpha, beta)


def _observed_at(model: Union[STMMap, ElevationMap], sid: int) -> bool:
    if isinstance(model, STMMap):
        return model.surfels[sid].n_meas_total > 0
    return model.cells[sid].observed


def evaluate_mse(
    model: Union[STMMap, ElevationMap],
    surface: SyntheticSurface,
    n_eval: int,
    seed: int = 0,
    companion: Union[STMMap, ElevationMap, None] = None,
) -> float:
    """Mean squared height error at uniform evaluation points.

    Passing a companion model restricts evaluation to elements observed by
    both, keeping comparisons symmetric.
    """
    pts = _eval_points(n_eval, seed)
    errs = []
    for a, b in pts:
        try:
            sid = model.grid.locate(a, b)
            if companion is not None:
                companion.grid.locate(a, b)
        except OutsideSubmap:
            continue
        if not _observed_at(model, sid):
            continue
        if companion is not None and not _observed_at(companion, sid):
            continue
        truth = float(surface(a, b))
        errs.append((truth - _model_mean(model, a, b)) ** 2)
    if not errs:
        raise ValueError("no evaluable points: models unobserved everywhere")
    return float(np.mean(errs))


def evaluate_loglik_ratio(
    stm: STMMap,
    elev: ElevationMap,
    surface: SyntheticSurface,
    n_eval: int,
    seed: int = 0,
) -> float:
    """Summed log-likelihood difference, mesh map minus elevation map.

    Positive values mean the mesh map assigns higher density to the true
    surface. Both sides use the plug-in rule: the mesh model scores
    N(gamma; mean plane, expected deviation), the elevation model scores
    N(gamma; cell mean, cell variance).
    """
    pts = _eval_points(n_eval, seed)
    total = 0.0
    used = 0
    for a, b in pts:
        try:
            sid = stm.grid.locate(a, b)
            elev.grid.locate(a, b)
        except OutsideSubmap:
            continue
        if not (_observed_at(stm, sid) and _observed_at(elev, sid)):
            continue
        truth = float(surface(a, b))
        mu = map_height(stm, a, b)
        nu = stm.surfels[sid].expected_deviation()
        d = truth - mu
        ll_stm = -0.5 * (math.log(2.0 * math.pi * nu) + d * d / nu)
        ll_elev = elev.log_likelihood(a, b, truth)
        total += ll_stm - ll_elev
        used += 1
    if used == 0:
        raise ValueError("no evaluable points: models unobserved everywhere")
    return total
