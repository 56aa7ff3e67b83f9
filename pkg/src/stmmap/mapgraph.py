"""Full-map inference: cluster graph, Gaussian LBP between surfels.

The map holds one surfel cluster per grid element and one sepset per
interior edge. Sepset scopes start as the two shared vertex heights and are
reduced so the running intersection property holds: for every vertex, the
sepsets containing it form a spanning tree over the surfels incident to it.

Inference sweeps cycle over surfels in ascending id order. Each sweep
recomputes the incoming neighbor message, ratio-updates the belief, runs the
per-cluster VMP updates, and emits outgoing messages to each neighbor. A
message is converged when its divergence from the previous iteration falls
below the threshold; a surfel whose messages have all converged is skipped
until a neighbor sends it a changed message.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    GaussianCanonical,
    InverseGammaFactor,
    gauss_divide,
    gauss_marginalize,
    gauss_product,
    kl_gaussian,
)
from .geometry import OutsideSubmap, TriGrid
from .surfel import (
    LikelihoodClusterState,
    Measurement,
    SurfelState,
    apportion_nu_scales,
    init_likelihood_cluster,
    mean_plane_eval,
    update_mean_plane_factor,
    update_planar_deviation_factor,
)
from .distributions import GaussianMoment


@dataclass(frozen=True)
class PriorConfig:
    """Per-surfel priors: correlated zero-mean height Gaussian, inverse-gamma deviation."""

    rho: float = 0.5
    sigma2: float = 100.0
    a_p: float = 1.0
    b_p: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.sigma2 <= 0.0 or self.a_p <= 0.0 or self.b_p <= 0.0:
            raise ValueError("prior parameters must be positive")

    def height_covariance(self) -> np.ndarray:
        s = self.sigma2
        r = self.rho
        return s * np.array([[1.0, r, r], [r, 1.0, r], [r, r, 1.0]])


@dataclass(frozen=True)
class ConvergenceConfig:
    kl_threshold: float = 1e-5
    max_sweeps: int = 200


@dataclass
class Sepset:
    """Interior-edge interface between two surfel clusters."""

    s: int
    c: int
    shared: tuple[int, int]
    variables: tuple
    msg_to_s: GaussianCanonical = None
    msg_to_c: GaussianCanonical = None

    def __post_init__(self):
        if self.msg_to_s is None:
            self.msg_to_s = GaussianCanonical.vacuous(self.variables)
        if self.msg_to_c is None:
            self.msg_to_c = GaussianCanonical.vacuous(self.variables)

    def msg_to(self, sid: int) -> GaussianCanonical:
        return self.msg_to_s if sid == self.s else self.msg_to_c

    def set_msg_to(self, sid: int, msg: GaussianCanonical):
        if sid == self.s:
            self.msg_to_s = msg
        else:
            self.msg_to_c = msg

    def other(self, sid: int) -> int:
        return self.c if sid == self.s else self.s


@dataclass
class Metrics:
    message_count: int = 0
    sweep_count: int = 0


@dataclass
class ConvergenceReport:
    converged: bool
    sweeps: int
    messages: int
    n_measurements: int
    n_skipped_outside: int
    surfel_converged: np.ndarray


@dataclass
class MapQueryResult:
    surfel_mean_heights: np.ndarray  # (n_surfels, 3)
    surfel_height_stds: np.ndarray  # (n_surfels, 3)
    expected_deviation: np.ndarray  # (n_surfels,)
    n_meas: np.ndarray  # (n_surfels,)
    observed: np.ndarray  # (n_surfels,) bool
    vertex_mean: np.ndarray  # (n_vertices,)
    vertex_std: np.ndarray  # (n_vertices,)


class STMMap:
    """A stochastic triangular mesh submap."""

    def __init__(
        self,
        grid: TriGrid,
        prior: PriorConfig = PriorConfig(),
        window: int = 1,
        convergence: ConvergenceConfig = ConvergenceConfig(),
    ):
        self.grid = grid
        self.prior = prior
        self.window = window
        self.convergence = convergence
        self.metrics = Metrics()
        self.batch = 0

        sigma_p = prior.height_covariance()
        omega_p = np.linalg.inv(sigma_p)
        prior_nu = InverseGammaFactor.normalized(prior.a_p, prior.b_p)
        self.surfels: list[SurfelState] = []
        for s in grid.surfels:
            labels = s.vertex_ids
            prior_h = GaussianCanonical(np.zeros(3), omega_p, labels)
            self.surfels.append(
                SurfelState(sid=s.sid, labels=labels, prior_h=prior_h, prior_nu=prior_nu)
            )

        var_lists = enforce_rip(grid)
        self.sepsets: list[Sepset] = []
        self._incident: list[list[Sepset]] = [[] for _ in grid.surfels]
        for (a, b, shared), variables in zip(grid.adjacency, var_lists):
            sep = Sepset(a, b, shared, variables)
            self.sepsets.append(sep)
            if variables:
                self._incident[a].append(sep)
                self._incident[b].append(sep)

        # Surfels are activated by measurements or by changed neighbor
        # messages; an untouched map is at its (empty) fixed point.
        self._converged = np.ones(len(self.surfels), dtype=bool)

    def incident_sepsets(self, sid: int) -> list[Sepset]:
        return self._incident[sid]


def enforce_rip(grid: TriGrid) -> list[tuple]:
    """Reduce sepset scopes so each vertex's sepsets form a spanning tree.

    Per-variable Kruskal over the edges containing the vertex, edges ordered
    by (low surfel id, high surfel id) for determinism; off-tree edges drop
    the vertex from their scope.
    """
    keep = [set(shared) for (_, _, shared) in grid.adjacency]
    by_vertex: dict[int, list[int]] = {}
    for idx, (_, _, shared) in enumerate(grid.adjacency):
        for v in shared:
            by_vertex.setdefault(v, []).append(idx)
    for v, edge_ids in by_vertex.items():
        edge_ids.sort(key=lambda i: (grid.adjacency[i][0], grid.adjacency[i][1]))
        parent: dict[int, int] = {}

        def find(x: int) -> int:
            while parent.setdefault(x, x) != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for idx in edge_ids:
            a, b, _ = grid.adjacency[idx]
            ra, rb = find(a), find(b)
            if ra == rb:
                keep[idx].discard(v)
            else:
                parent[ra] = rb
    return [tuple(sorted(k)) for k in keep]


def build_map(
    grid: TriGrid,
    prior: PriorConfig,
    window: int = 1,
    convergence: ConvergenceConfig = ConvergenceConfig(),
) -> STMMap:
    return STMMap(grid, prior, window=window, convergence=convergence)


def _gauss_divergence(new: GaussianCanonical, old: GaussianCanonical) -> float:
    """Exclusive KL between message iterates, with a relative natural-parameter
    surrogate when either iterate is improper (KL is then undefined)."""
    def well_conditioned(g: GaussianCanonical) -> bool:
        lam = np.linalg.eigvalsh(g.omega)
        return lam[0] > 1e-9 * max(lam[-1], 1e-300)

    if well_conditioned(new) and well_conditioned(old):
        return kl_gaussian(new, old)
    d_omega = np.max(np.abs(new.omega - old.omega)) / (
        1.0 + np.max(np.abs(old.omega))
    )
    d_xi = np.max(np.abs(new.xi - old.xi)) / (1.0 + np.max(np.abs(old.xi)))
    return max(d_omega, d_xi)


def _ig_divergence(new: InverseGammaFactor, old: InverseGammaFactor) -> float:
    d_exp = abs(new.exponent - old.exponent)
    d_scale = abs(new.scale - old.scale) / (1.0 + abs(old.scale))
    return max(d_exp, d_scale)


def neighbor_out_message(stm: STMMap, sep: Sepset, sid: int) -> GaussianCanonical:
    """Outgoing LBP message from surfel sid over the given sepset.

    Marginal of the surfel height belief divided by the reverse message.
    """
    state = stm.surfels[sid]
    reverse = sep.msg_to(sid)
    ratio = gauss_divide(state.belief_h, reverse)
    msg = gauss_marginalize(ratio, sep.variables)
    stm.metrics.message_count += 1
    return msg


def _associate(stm: STMMap, batch: list[Measurement]) -> tuple[dict, int]:
    """Group measurements by surfel, expressed in normalized-element coordinates."""
    per_surfel: dict[int, list[Measurement]] = {}
    skipped = 0
    for m in batch:
        try:
            sid = stm.grid.locate(float(m.mean[0]), float(m.mean[1]))
        except OutsideSubmap:
            skipped += 1
            continue
        mom = stm.grid.normalize_to_element(sid, GaussianMoment(m.mean, m.cov))
        per_surfel.setdefault(sid, []).append(Measurement(mom.mu, mom.sigma, m.id))
    return per_surfel, skipped


def run_inference(stm: STMMap, batch: list[Measurement]) -> ConvergenceReport:
    """Incorporate one measurement batch and iterate to convergence.

    Measurements must already be in submap (alpha, beta, gamma) coordinates.
    Points outside the submap are counted and skipped.
    """
    per_surfel, skipped = _associate(stm, batch)
    n_used = sum(len(v) for v in per_surfel.values())

    gamma_all = np.array(
        [m.mean[2] for ms in per_surfel.values() for m in ms], dtype=float
    )
    fallback_var = float(np.var(gamma_all)) if gamma_all.size >= 2 else 1e-2

    for sid, ms in per_surfel.items():
        state = stm.surfels[sid]
        gammas = np.array([m.mean[2] for m in ms])
        target = state.expected_deviation() if state.n_meas_total > 0 else None
        nu_scale = apportion_nu_scales(
            gammas,
            state.belief_nu.exponent,
            state.belief_nu.scale,
            fallback_var,
            target_var=target,
        )
        for m in ms:
            state.clusters.append(
                init_likelihood_cluster(m, state.labels, nu_scale, batch=stm.batch)
            )
        state.n_meas_total += len(ms)
        state.recompute_beliefs()
        stm._converged[sid] = False

    tol = stm.convergence.kl_threshold
    messages_before = stm.metrics.message_count
    sweeps = 0
    converged_all = bool(stm._converged.all())
    while not converged_all and sweeps < stm.convergence.max_sweeps:
        sweeps += 1
        stm.metrics.sweep_count += 1
        for sid in range(len(stm.surfels)):
            if stm._converged[sid]:
                continue
            state = stm.surfels[sid]
            changed = False
            belief_h_start = state.belief_h
            belief_nu_start = state.belief_nu

            # LBP: refresh the incoming neighbor message and ratio-update.
            new_in = GaussianCanonical.vacuous(state.labels)
            for sep in stm.incident_sepsets(sid):
                new_in = gauss_product(new_in, sep.msg_to(sid))
            new_in = new_in.reorder(state.labels)
            ratio = gauss_divide(new_in, state.neighbor_in_msg)
            state.belief_h = gauss_product(state.belief_h, ratio).reorder(state.labels)
            state.neighbor_in_msg = new_in

            # VMP: refit likelihood clusters. A cluster whose messages are
            # at their fixed point only needs refitting once the surfel
            # belief has moved since its last update.
            if state.ref_belief_h is None:
                belief_moved = True
            else:
                belief_moved = (
                    _gauss_divergence(state.belief_h, state.ref_belief_h) >= tol
                    or _ig_divergence(state.belief_nu, state.ref_belief_nu) >= tol
                )
            any_refit = False
            for cluster in state.clusters:
                if cluster.converged and not belief_moved:
                    continue
                old_h = cluster.out_msg_h
                old_nu = cluster.out_msg_nu
                update_mean_plane_factor(state, cluster)
                update_planar_deviation_factor(state, cluster)
                stm.metrics.message_count += 1
                any_refit = True
                cluster.converged = (
                    _gauss_divergence(cluster.out_msg_h, old_h) < tol
                    and _ig_divergence(cluster.out_msg_nu, old_nu) < tol
                )
                if not cluster.converged:
                    belief_moved = True
            if any_refit:
                state.ref_belief_h = state.belief_h
                state.ref_belief_nu = state.belief_nu

            # The surfel settles once its belief stops moving over a sweep;
            # internal message churn that cancels in the belief is ignored.
            if (
                _gauss_divergence(state.belief_h, belief_h_start) >= tol
                or _ig_divergence(state.belief_nu, belief_nu_start) >= tol
            ):
                changed = True

            # LBP: emit messages to each neighbor.
            for sep in stm.incident_sepsets(sid):
                other = sep.other(sid)
                old = sep.msg_to(other)
                msg = neighbor_out_message(stm, sep, sid)
                sep.set_msg_to(other, msg)
                if _gauss_divergence(msg, old) >= tol:
                    changed = True
                    stm._converged[other] = False

            stm._converged[sid] = not changed
        converged_all = bool(stm._converged.all())

    return ConvergenceReport(
        converged=converged_all,
        sweeps=sweeps,
        messages=stm.metrics.message_count - messages_before,
        n_measurements=n_used,
        n_skipped_outside=skipped,
        surfel_converged=stm._converged.copy(),
    )


def incremental_update(stm: STMMap, batch: list[Measurement]) -> ConvergenceReport:
    """Window old clusters into the priors, then run inference on the new batch.

    With window W, clusters from batches older than the W most recent are
    folded into the priors; the default W=1 keeps only the incoming batch
    live. Sepset messages are retained as the warm start for the new batch.
    """
    stm.batch += 1
    cutoff = stm.batch - stm.window
    for state in stm.surfels:
        fold = [c for c in state.clusters if c.batch <= cutoff]
        keep = [c for c in state.clusters if c.batch > cutoff]
        for cluster in fold:
            state.prior_h = gauss_product(state.prior_h, cluster.out_msg_h).reorder(
                state.labels
            )
            state.prior_nu = InverseGammaFactor(
                state.prior_nu.exponent + cluster.out_msg_nu.exponent,
                state.prior_nu.scale + cluster.out_msg_nu.scale,
            )
        state.clusters = keep
    return run_inference(stm, batch)


def query_map(stm: STMMap) -> MapQueryResult:
    """Summarize the map belief: per-surfel moments and fused vertex marginals."""
    n_s = len(stm.surfels)
    means = np.zeros((n_s, 3))
    stds = np.zeros((n_s, 3))
    devs = np.zeros(n_s)
    n_meas = np.zeros(n_s, dtype=int)
    observed = np.zeros(n_s, dtype=bool)
    vertex_w = np.zeros(stm.grid.n_vertices)
    vertex_wm = np.zeros(stm.grid.n_vertices)
    vertex_wv = np.zeros(stm.grid.n_vertices)
    for i, state in enumerate(stm.surfels):
        mom = state.belief_h.to_moments()
        means[i] = mom.mu
        var = np.diag(mom.sigma)
        stds[i] = np.sqrt(np.maximum(var, 0.0))
        devs[i] = state.expected_deviation()
        n_meas[i] = state.n_meas_total
        observed[i] = state.n_meas_total > 0
        for k, v in enumerate(state.labels):
            w = 1.0 / max(var[k], 1e-300)
            vertex_w[v] += w
            vertex_wm[v] += w * mom.mu[k]
            vertex_wv[v] += w * var[k]
    nz = vertex_w > 0
    vertex_mean = np.zeros(stm.grid.n_vertices)
    vertex_var = np.zeros(stm.grid.n_vertices)
    vertex_mean[nz] = vertex_wm[nz] / vertex_w[nz]
    vertex_var[nz] = vertex_wv[nz] / vertex_w[nz]
    return MapQueryResult(
        surfel_mean_heights=means,
        surfel_height_stds=stds,
        expected_deviation=devs,
        n_meas=n_meas,
        observed=observed,
        vertex_mean=vertex_mean,
        vertex_std=np.sqrt(vertex_var),
    )


def map_height(stm: STMMap, alpha: float, beta: float) -> float:
    """Mean-mesh height at a submap coordinate."""
    sid = stm.grid.locate(alpha, beta)
    a, v0 = stm.grid.element_affine(sid)
    local = a[:2, :2] @ (np.array([alpha, beta]) - v0[:2])
    mom = stm.surfels[sid].belief_h.to_moments()
    return mean_plane_eval(float(local[0]), float(local[1]), mom.mu)
