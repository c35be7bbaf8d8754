"""End-to-end training, testing, and generation procedures.

All modes share one iteration body: compute dz between the replicas,
update its moving average, clamp visible neurons to data, fire fake
targets on hidden neurons, step both replicas, then apply the local
weight update.  States persist across sample changes; only the clamp
targets move.  The `Engine` class holds the mutable run state and a
block-structured matmul path for layered topologies; `learning_step` is
the plain reference form of the same iteration built from the public
operations, and the two are held equal by tests.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .net import (
    STATE_BOUND,
    ClampPlan,
    DivergenceError,
    HyperParams,
    NetworkParams,
    Topology,
    activation,
    build_topology,
    init_params,
    pressure,
    relax_step,
)
from .plasticity import (
    DZ_FLOOR,
    DualState,
    compute_dz,
    init_dual,
    sample_fake_targets,
    stdp_update,
    smoothing_update,
    update_dz_mavg,
)

MODES = ("unsupervised", "supervised", "selfsup", "generate", "test")

STABILITY_CAP = 1000


@dataclass
class RunConfig:
    """Everything needed to reproduce one run bit-exactly."""

    mode: str
    hyper: HyperParams
    topology: Topology
    total_updates: int
    seed: int = 0
    fake_targets: bool = True
    momentum: bool = True
    stability_threshold: float = 0.001
    trace_every: int = 1
    metrics_path: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.hyper.validate()
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")
        if self.stability_threshold <= 0:
            raise ValueError("stability_threshold must be > 0")

    @property
    def inertia(self) -> float:
        return self.hyper.inertia if self.momentum else 1.0


@dataclass
class EpisodeTrace:
    """Per-iteration and per-presentation diagnostics of one run."""

    clamp_cost: list = field(default_factory=list)   # per recorded iteration
    mean_dz: list = field(default_factory=list)
    fire_rate: list = field(default_factory=list)
    steps_to_stability: list = field(default_factory=list)  # per presentation
    recon_error: list = field(default_factory=list)  # selfsup stage only
    updates: int = 0
    final_state: Optional[DualState] = None


@dataclass
class StepStats:
    clamp_cost: float
    mean_dz: float
    fire_rate: float
    max_ds: float


def onehot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if n == 0:
        return np.zeros((len(labels), 0))
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"labels out of range for {n} output neurons")
    return np.eye(n)[labels]


def visible_matrix(dataset, topology: Topology) -> np.ndarray:
    """Arrange dataset items as full visible vectors [inputs..., outputs...].

    Accepts images that already span the whole visible set, or images
    spanning the inputs plus labels for the output block.
    """
    dim = dataset.images.shape[1]
    n_in, n_out = topology.n_input, topology.n_output
    if dim == n_in + n_out:
        return dataset.images
    if dim == n_in and n_out == 0:
        return dataset.images
    if dim == n_in and dataset.labels is not None:
        return np.hstack([dataset.images, onehot(dataset.labels, n_out)])
    raise ValueError(
        f"dataset dim {dim} does not fit visible split {n_in}+{n_out}"
    )


def clamp_plan(topology: Topology, hyper: HyperParams, values, idx) -> ClampPlan:
    """Plan clamping the given neurons to values at (theta_s, theta_l)."""
    values = np.atleast_2d(values)
    plan = ClampPlan.empty(values.shape[0], topology.n_total)
    plan.target[:, idx] = values
    plan.strength_s[:, idx] = hyper.theta_s
    plan.strength_l[:, idx] = hyper.theta_l
    return plan


def supervised_clamp_plan(
    topology: Topology,
    hyper: HyperParams,
    inputs,
    labels,
    step: int,
    free_iters: int,
) -> ClampPlan:
    """Inputs are always clamped; outputs only after the free phase."""
    plan = clamp_plan(topology, hyper, inputs, topology.input_idx)
    if step > free_iters:
        out = topology.output_idx
        plan.target[:, out] = onehot(labels, topology.n_output)
        plan.strength_s[:, out] = hyper.theta_s
        plan.strength_l[:, out] = hyper.theta_l
    return plan


def merge_fake_targets(plan: ClampPlan, draw, topology: Topology, hyper: HyperParams) -> ClampPlan:
    """Overlay a fake-target draw on the hidden columns of a data plan."""
    hid = topology.hidden_idx
    target = plan.target.copy()
    strength_s = plan.strength_s.copy()
    strength_l = plan.strength_l.copy()
    target[:, hid] = draw.target[:, hid]
    strength_s[:, hid] = hyper.theta_s * draw.indicator[:, hid]
    strength_l[:, hid] = hyper.theta_l * draw.indicator[:, hid]
    return ClampPlan(target, strength_s, strength_l)


def learning_step(
    params: NetworkParams,
    dual: DualState,
    plan: ClampPlan,
    topology: Topology,
    hyper: HyperParams,
    rng,
    *,
    alpha: float,
    inertia: float = 1.0,
    fake_targets: bool = True,
    update_mask: np.ndarray = None,
    bias_mask: np.ndarray = None,
):
    """One full iteration, composed from the public operations.

    Order within the iteration: dz from the pre-step states, dz_m update,
    fake-target draw, both replica steps, then the weight update using
    the pre-step dz and the post-step weak-replica state.  Returns
    (params', dual').
    """
    dz = compute_dz(dual)
    dz_m = update_dz_mavg(dual.dz_m, dz, hyper.m_avg)
    if fake_targets and len(topology.hidden_idx) > 0:
        draw = sample_fake_targets(dz, dz_m, topology, hyper, rng)
        plan = merge_fake_targets(plan, draw, topology, hyper)
    s_s, v_s = relax_step(
        params, dual.s_s, plan.target, plan.strength_s, hyper.eps_s, dual.v_s, inertia
    )
    s_l, v_l = relax_step(
        params, dual.s_l, plan.target, plan.strength_l, hyper.eps_l, dual.v_l, inertia
    )
    new_params = params
    if alpha != 0.0:
        new_params = stdp_update(params, topology, s_s, dz, alpha, update_mask)
        if bias_mask is not None:
            new_params.b = params.b + (new_params.b - params.b) * bias_mask
    if hyper.smoothing_rate > 0.0:
        ds = pressure(params, dual.s_s) - dual.s_s
        new_params = smoothing_update(new_params, topology, dual.s_s, ds, hyper.smoothing_rate)
    return new_params, DualState(s_s, s_l, v_s, v_l, dz_m)


def _block_pairs(topology: Topology):
    """Directed layer-pair slices covering the mask, or None for custom masks."""
    sizes = topology.layer_sizes
    slices = topology.layer_slices()
    pairs = []
    for i in range(len(sizes) - 1):
        if sizes[i] > 0 and sizes[i + 1] > 0:
            pairs.append((slices[i], slices[i + 1]))
            pairs.append((slices[i + 1], slices[i]))
    intra = slices[1] if len(sizes) == 3 and sizes[1] > 0 else None
    if intra is not None:
        pairs.append((intra, intra))
    recon = np.zeros_like(topology.mask)
    for a, b in pairs:
        recon[a, b] = True
    np.fill_diagonal(recon, False)
    if not np.array_equal(recon, topology.mask):
        return None, None
    return pairs, intra


class Engine:
    """Mutable state of one run: parameters, replicas, and fast kernels.

    Parameters passed in are copied; callers read results back through
    `params()`.  Both replicas live stacked in one array (weak rows
    first) so every elementwise pass covers them together, and for
    layered topologies the matmuls run per connected layer block,
    skipping the structurally absent edges; custom masks fall back to
    dense masked arithmetic.  Both paths implement the same iteration as
    `learning_step`, and tests hold them equal.

    The `dual` property exposes views into the live buffers; take
    `snapshot_dual()` for a copy that survives further stepping.
    """

    def __init__(
        self,
        params: NetworkParams,
        topology: Topology,
        hyper: HyperParams,
        rng,
        *,
        batch: int,
        alpha: float,
        fake_targets: bool = True,
        inertia: float = 1.0,
        dual: DualState = None,
        update_mask: np.ndarray = None,
        bias_mask: np.ndarray = None,
    ):
        self.W = params.W.copy()
        self.b = params.b.copy()
        self.topology = topology
        self.hyper = hyper
        self.rng = rng
        self.batch = batch
        self.alpha = alpha
        self.fake_targets = fake_targets
        self.inertia = inertia
        self.update_mask = update_mask
        self.bias_mask = bias_mask
        self.pairs, self._intra = _block_pairs(topology)
        self._mask_f = None if self.pairs is not None else topology.mask.astype(np.float64)
        self.iteration = 0

        n = topology.n_total
        rows2 = 2 * batch
        self._s2 = np.empty((rows2, n))
        self._v2 = np.empty((rows2, n))
        self._z2 = np.empty((rows2, n))
        self.dz_m = np.empty(n)
        self._g = np.empty((rows2, n))
        self._dz = np.empty((batch, n))
        self._tmp2 = np.empty((rows2, n))
        self._raw2 = np.empty((rows2, n))
        self._target2 = np.empty((rows2, n))
        self._strength2 = np.empty((rows2, n))
        self._absbuf = np.empty((batch, n))
        self._eps2 = np.empty((rows2, 1))
        self._eps2[:batch] = hyper.eps_s
        self._eps2[batch:] = hyper.eps_l
        self._blk_out = None
        if self.pairs is not None:
            self._blk_out = [np.empty((s.stop - s.start, d.stop - d.start))
                             for s, d in self.pairs]
        self.set_states(dual if dual is not None
                        else init_dual(topology, batch, rng))

    @property
    def dual(self) -> DualState:
        b = self.batch
        return DualState(
            s_s=self._s2[:b], s_l=self._s2[b:],
            v_s=self._v2[:b], v_l=self._v2[b:],
            dz_m=self.dz_m,
        )

    def snapshot_dual(self) -> DualState:
        return self.dual.copy()

    def params(self) -> NetworkParams:
        return NetworkParams(self.W.copy(), self.b.copy())

    def set_states(self, dual: DualState) -> None:
        b = self.batch
        self._s2[:b] = dual.s_s
        self._s2[b:] = dual.s_l
        self._v2[:b] = dual.v_s
        self._v2[b:] = dual.v_l
        self.dz_m[:] = dual.dz_m
        self._activation_into(self._s2, self._z2)

    def _net_input(self, z: np.ndarray, out: np.ndarray) -> np.ndarray:
        out[:] = self.b
        if self.pairs is None:
            out += z @ self.W
        else:
            for src, dst in self.pairs:
                out[:, dst] += z[:, src] @ self.W[src, dst]
        return out

    def _stdp_add(self, z_pre: np.ndarray, dz: np.ndarray, scale: float) -> None:
        if self.pairs is None:
            dw = z_pre.T @ dz
            dw *= self._mask_f
            if self.update_mask is not None:
                dw *= self.update_mask
            self.W += scale * dw
        else:
            for (src, dst), blk in zip(self.pairs, self._blk_out):
                np.matmul(z_pre[:, src].T, dz[:, dst], out=blk)
                blk *= scale
                if self.update_mask is not None:
                    blk *= self.update_mask[src, dst]
                self.W[src, dst] += blk
            if self._intra is not None:
                np.fill_diagonal(self.W[self._intra, self._intra], 0.0)
        db = scale * dz.sum(axis=0)
        if self.bias_mask is not None:
            db = db * self.bias_mask
        self.b += db

    def _smooth_add(self, z_old: np.ndarray, weighted: np.ndarray, scale: float) -> None:
        if self.pairs is None:
            dw = z_old.T @ weighted
            dw *= self._mask_f
            self.W -= scale * dw
        else:
            for src, dst in self.pairs:
                self.W[src, dst] -= scale * (z_old[:, src].T @ weighted[:, dst])
            if self._intra is not None:
                np.fill_diagonal(self.W[self._intra, self._intra], 0.0)
        self.b -= scale * weighted.sum(axis=0)

    @staticmethod
    def _activation_into(s: np.ndarray, out: np.ndarray) -> np.ndarray:
        np.multiply(s, -4.0, out=out)
        np.exp(out, out=out)
        out += 1.0
        np.reciprocal(out, out=out)
        return out

    @staticmethod
    def _check(s: np.ndarray) -> None:
        peak = float(np.abs(s).max())
        if not peak <= STATE_BOUND:  # a NaN peak fails this comparison too
            raise DivergenceError(
                f"state magnitude {peak:.3g} exceeds bound {STATE_BOUND}"
            )

    def step(self, plan: ClampPlan) -> StepStats:
        """One iteration against the given data plan.

        Written with preallocated buffers and in-place arithmetic; the
        plain composition of the public operations lives in
        `learning_step` and tests hold the two paths equal.
        """
        h = self.hyper
        self.iteration += 1
        b = self.batch
        dz = self._dz

        np.subtract(self._z2[b:], self._z2[:b], out=dz)
        np.abs(dz, out=self._absbuf)
        self.dz_m *= 1.0 - h.m_avg
        self.dz_m += h.m_avg * self._absbuf.mean(axis=0)
        np.maximum(self.dz_m, DZ_FLOOR, out=self.dz_m)

        target2, strength2 = self._target2, self._strength2
        target2[:b] = plan.target
        target2[b:] = plan.target
        strength2[:b] = plan.strength_s
        strength2[b:] = plan.strength_l
        fire_rate = 0.0
        hid = self.topology.hidden_idx
        if self.fake_targets and len(hid) > 0:
            dz_h = dz[:, hid]
            u = self.rng.uniform(0.0, 1.0, size=dz_h.shape)
            if h.k_as_multiplier:
                u *= self.dz_m[hid] / h.k
            else:
                u *= h.k * self.dz_m[hid]
            fired = (np.abs(dz_h) > u).astype(np.float64)
            t_f = np.sign(dz_h) * h.t_c * fired
            target2[:b, hid] = t_f
            target2[b:, hid] = t_f
            strength2[:b, hid] = h.theta_s * fired
            strength2[b:, hid] = h.theta_l * fired
            fire_rate = float(fired.mean())

        g = self._net_input(self._z2, self._g)

        # raw drive R(s) - s, with rho'(s) = 4 rho (1 - rho) from cached rho
        raw2, tmp2 = self._raw2, self._tmp2
        np.subtract(1.0, self._z2, out=raw2)
        raw2 *= self._z2
        raw2 *= 4.0
        raw2 *= g
        raw2 -= self._s2

        keep_z = keep_raw = None
        if h.smoothing_rate > 0.0:
            keep_z = self._z2[:b].copy()
            keep_raw = raw2[:b].copy()

        np.subtract(target2, self._s2, out=tmp2)
        tmp2 *= strength2
        tmp2 += raw2
        self._v2 *= 1.0 - self.inertia
        tmp2 *= self.inertia
        self._v2 += tmp2
        np.multiply(self._v2, self._eps2, out=tmp2)
        self._s2 += tmp2
        self._check(self._s2)

        self._activation_into(self._s2, self._z2)
        if self.alpha != 0.0:
            self._stdp_add(self._z2[:b], dz, self.alpha / b)
        if h.smoothing_rate > 0.0:
            keep_raw *= 4.0 * keep_z * (1.0 - keep_z)
            self._smooth_add(keep_z, keep_raw, h.smoothing_rate / b)

        np.subtract(plan.target, self._s2[:b], out=self._absbuf)
        np.multiply(self._absbuf, self._absbuf, out=self._absbuf)
        self._absbuf *= plan.strength_s > 0.0
        cost = float(0.5 * self._absbuf.sum(axis=1).mean())
        max_ds = float(h.eps_s * np.abs(self._v2[:b]).max())
        return StepStats(cost, float(np.abs(dz).mean()), fire_rate, max_ds)

    def present(
        self,
        plan_for_iter: Callable[[int], ClampPlan],
        iters: int,
        *,
        stability_threshold: float = 0.001,
        trace: EpisodeTrace = None,
        trace_every: int = 1,
    ) -> int:
        """Run `iters` iterations for one sample; returns steps to stability.

        Stability is the first iteration whose weak-replica state moved
        less than the threshold everywhere; the presentation still runs
        to completion.  Returns the iteration count itself when the
        threshold is never met.
        """
        settled = 0
        for t in range(1, iters + 1):
            try:
                stats = self.step(plan_for_iter(t))
            except DivergenceError as err:
                raise DivergenceError(
                    f"{err} (iteration {self.iteration})"
                ) from None
            if settled == 0 and stats.max_ds < stability_threshold:
                settled = t
            if trace is not None and (t % trace_every) == 0:
                trace.clamp_cost.append(stats.clamp_cost)
                trace.mean_dz.append(stats.mean_dz)
                trace.fire_rate.append(stats.fire_rate)
        return settled if settled > 0 else iters


class _Metrics:
    def __init__(self, path):
        self.f = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        if self.f:
            self.f.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self.f:
            self.f.close()


def _pick_batch(rng, count: int, batch: int, order, update: int) -> np.ndarray:
    if order is None:
        return rng.integers(0, count, size=batch)
    start = update * batch
    idx = np.asarray(order[start : start + batch], dtype=np.int64)
    if len(idx) < batch:
        raise ValueError("sample order shorter than total_updates * batch")
    return idx


def run_unsupervised(config: RunConfig, dataset, order=None):
    """Train with every visible neuron clamped to the data.

    When the topology has output neurons, labels are concatenated to the
    images as extra visible data.  Returns (params, trace).
    """
    config.validate()
    topo, hyper = config.topology, config.hyper
    rng = np.random.default_rng(config.seed)
    params = init_params(topo, rng)
    engine = Engine(
        params, topo, hyper, rng,
        batch=hyper.batch, alpha=hyper.alpha,
        fake_targets=config.fake_targets, inertia=config.inertia,
    )
    vis = visible_matrix(dataset, topo)
    trace = EpisodeTrace()
    metrics = _Metrics(config.metrics_path)
    try:
        for update in range(config.total_updates):
            idx = _pick_batch(rng, dataset.count, hyper.batch, order, update)
            plan = clamp_plan(topo, hyper, vis[idx], topo.visible_idx)
            settled = engine.present(
                lambda t: plan, hyper.iters,
                stability_threshold=config.stability_threshold,
                trace=trace, trace_every=config.trace_every,
            )
            trace.steps_to_stability.append(settled)
            metrics.write({
                "update": update,
                "clamp_cost": trace.clamp_cost[-1] if trace.clamp_cost else None,
                "mean_dz": trace.mean_dz[-1] if trace.mean_dz else None,
                "fire_rate": trace.fire_rate[-1] if trace.fire_rate else None,
            })
    finally:
        metrics.close()
    trace.updates = config.total_updates
    trace.final_state = engine.snapshot_dual()
    return engine.params(), trace


def run_supervised(config: RunConfig, dataset, labels=None, order=None,
                   params: NetworkParams = None, engine_kwargs=None):
    """Two-phase training: inputs clamped throughout, labels joining late.

    Iterations 1..free_iters leave the output neurons free; the rest
    clamp them to the label.  Hidden fake targets and weight updates run
    every iteration in both phases.  Returns (params, trace).
    """
    config.validate()
    topo, hyper = config.topology, config.hyper
    if labels is None:
        labels = dataset.labels
    if labels is None:
        raise ValueError("supervised mode needs labels")
    rng = np.random.default_rng(config.seed)
    params = init_params(topo, rng) if params is None else params
    engine = Engine(
        params, topo, hyper, rng,
        batch=hyper.batch, alpha=hyper.alpha,
        fake_targets=config.fake_targets, inertia=config.inertia,
        **(engine_kwargs or {}),
    )
    trace = EpisodeTrace()
    metrics = _Metrics(config.metrics_path)
    try:
        for update in range(config.total_updates):
            idx = _pick_batch(rng, dataset.count, hyper.batch, order, update)
            free = clamp_plan(topo, hyper, dataset.images[idx], topo.input_idx)
            full = clamp_plan(topo, hyper, dataset.images[idx], topo.input_idx)
            out = topo.output_idx
            full.target[:, out] = onehot(labels[idx], topo.n_output)
            full.strength_s[:, out] = hyper.theta_s
            full.strength_l[:, out] = hyper.theta_l
            settled = engine.present(
                lambda t: full if t > hyper.free_iters else free, hyper.iters,
                stability_threshold=config.stability_threshold,
                trace=trace, trace_every=config.trace_every,
            )
            trace.steps_to_stability.append(settled)
            metrics.write({
                "update": update,
                "clamp_cost": trace.clamp_cost[-1] if trace.clamp_cost else None,
                "mean_dz": trace.mean_dz[-1] if trace.mean_dz else None,
                "fire_rate": trace.fire_rate[-1] if trace.fire_rate else None,
            })
    finally:
        metrics.close()
    trace.updates = config.total_updates
    trace.final_state = engine.snapshot_dual()
    return engine.params(), trace


def head_masks(topology: Topology):
    """Edge and bias masks trainable for the output head only.

    Trainable edges touch an output neuron on either end; trainable
    biases are the output neurons'.  Everything else stays frozen.
    """
    n = topology.n_total
    is_out = np.zeros(n, dtype=bool)
    is_out[topology.output_idx] = True
    edges = (is_out[:, None] | is_out[None, :]) & topology.mask
    return edges.astype(np.float64), is_out.astype(np.float64)


def run_selfsupervised(config: RunConfig, dataset, mask_side: int = 10,
                       mask_gray: float = 0.5, rows: int = 28, cols: int = 28,
                       head_updates: int = None):
    """In-painting pretraining followed by label-head training.

    Stage one runs on an output-free copy of the topology: a random gray
    square covers part of each image, the uncovered pixels are clamped
    throughout, and the covered pixels join only after the free phase.
    Stage two rebuilds the full topology, copies the pretrained block,
    and trains only the output head on the labels.  Returns
    (params, trace) with stage metrics concatenated.
    """
    from .data import apply_mask  # local import to avoid a module cycle

    config.validate()
    topo, hyper = config.topology, config.hyper
    if mask_side > min(rows, cols):
        raise ValueError(f"mask side {mask_side} exceeds image size {rows}x{cols}")
    n_pix = dataset.images.shape[1]
    if n_pix != topo.n_input:
        raise ValueError("images must span the input layer")

    stage1_topo = build_topology(topo.layer_sizes[:-1] + (0,))
    rng = np.random.default_rng(config.seed)
    params1 = init_params(stage1_topo, rng)
    engine = Engine(
        params1, stage1_topo, hyper, rng,
        batch=hyper.batch, alpha=hyper.alpha,
        fake_targets=config.fake_targets, inertia=config.inertia,
    )
    trace = EpisodeTrace()
    pix_idx = stage1_topo.input_idx
    metrics = _Metrics(config.metrics_path)
    try:
        for update in range(config.total_updates):
            idx = rng.integers(0, dataset.count, size=hyper.batch)
            images = dataset.images[idx]
            uncovered_strength = np.full((hyper.batch, n_pix), 1.0)
            covered_sets = []
            for row in range(hyper.batch):
                _, covered = apply_mask(images[row], mask_side, mask_gray, rng,
                                        rows=rows, cols=cols)
                uncovered_strength[row, covered] = 0.0
                covered_sets.append(covered)

            free = ClampPlan.empty(hyper.batch, stage1_topo.n_total)
            free.target[:, pix_idx] = images
            free.strength_s[:, pix_idx] = hyper.theta_s * uncovered_strength
            free.strength_l[:, pix_idx] = hyper.theta_l * uncovered_strength
            full = clamp_plan(stage1_topo, hyper, images, pix_idx)

            settled = engine.present(
                lambda t: full if t > hyper.free_iters else free, hyper.iters,
                stability_threshold=config.stability_threshold,
                trace=trace, trace_every=config.trace_every,
            )
            trace.steps_to_stability.append(settled)
            covered_err = 0.0
            if mask_side > 0:
                s_pix = engine.dual.s_s[:, pix_idx]
                errs = [
                    float(np.mean((s_pix[r, c] - images[r, c]) ** 2))
                    for r, c in enumerate(covered_sets)
                ]
                covered_err = float(np.mean(errs))
            trace.recon_error.append(covered_err)
            metrics.write({"update": update, "stage": 1,
                           "recon_error": covered_err,
                           "clamp_cost": trace.clamp_cost[-1] if trace.clamp_cost else None})
    finally:
        metrics.close()
    trace.updates = config.total_updates
    params1 = engine.params()

    if dataset.labels is None or topo.n_output == 0:
        trace.final_state = engine.snapshot_dual()
        return params1, trace

    # Stage two: add the output block, freeze everything pretrained.
    params_full = init_params(topo, rng)
    n1 = stage1_topo.n_total
    params_full.W[:n1, :n1] = params1.W
    params_full.b[:n1] = params1.b
    edge_mask, bias_mask = head_masks(topo)
    head_cfg = RunConfig(
        mode="supervised", hyper=hyper, topology=topo,
        total_updates=head_updates if head_updates is not None else config.total_updates,
        seed=config.seed + 1, fake_targets=config.fake_targets,
        momentum=config.momentum,
        stability_threshold=config.stability_threshold,
        trace_every=config.trace_every,
    )
    params2, trace2 = run_supervised(
        head_cfg, dataset, params=params_full,
        engine_kwargs={"update_mask": edge_mask, "bias_mask": bias_mask},
    )
    trace.clamp_cost += trace2.clamp_cost
    trace.mean_dz += trace2.mean_dz
    trace.fire_rate += trace2.fire_rate
    trace.steps_to_stability += trace2.steps_to_stability
    trace.updates += trace2.updates
    trace.final_state = trace2.final_state
    return params2, trace


def run_test(config: RunConfig, params: NetworkParams, dataset, labels=None,
             return_trace: bool = False):
    """Inference: clamp inputs, relax, read the output argmax.

    The learning rate is zero and parameters are never touched; fake
    targets stay active because they are part of the inference dynamics.
    Samples are presented in dataset order and states carry over between
    them.  Returns the accuracy (plus the trace when asked).
    """
    config.validate()
    topo, hyper = config.topology, config.hyper
    if labels is None:
        labels = dataset.labels
    if labels is None:
        raise ValueError("test mode needs labels")
    rng = np.random.default_rng(config.seed)
    engine = Engine(
        params, topo, hyper, rng,
        batch=hyper.batch, alpha=0.0,
        fake_targets=config.fake_targets, inertia=config.inertia,
    )
    trace = EpisodeTrace()
    correct = 0
    count = dataset.count
    out = topo.output_idx
    for start in range(0, count, hyper.batch):
        idx = np.arange(start, min(start + hyper.batch, count))
        rows = len(idx)
        padded = np.concatenate([idx, np.full(hyper.batch - rows, idx[-1])])
        plan = clamp_plan(topo, hyper, dataset.images[padded], topo.input_idx)
        settled = engine.present(
            lambda t: plan, hyper.iters,
            stability_threshold=config.stability_threshold,
            trace=trace, trace_every=config.trace_every,
        )
        trace.steps_to_stability.append(settled)
        pred = np.argmax(activation(engine.dual.s_s[:, out]), axis=1)
        correct += int((pred[:rows] == np.asarray(labels)[idx]).sum())
    accuracy = correct / count
    trace.updates = (count + hyper.batch - 1) // hyper.batch
    trace.final_state = engine.snapshot_dual()
    if config.metrics_path:
        m = _Metrics(config.metrics_path)
        m.write({"accuracy": accuracy, "samples": count})
        m.close()
    if return_trace:
        return accuracy, trace
    return accuracy


def run_generate(config: RunConfig, params: NetworkParams, labels):
    """Clamp the output neurons to one-hot labels and relax from noise.

    Returns the weak replica's firing rates over the input neurons, one
    row per requested label, with values already in the pixel range.
    """
    config.validate()
    topo, hyper = config.topology, config.hyper
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rng = np.random.default_rng(config.seed)
    engine = Engine(
        params, topo, hyper, rng,
        batch=len(labels), alpha=0.0,
        fake_targets=config.fake_targets, inertia=config.inertia,
    )
    plan = clamp_plan(topo, hyper, onehot(labels, topo.n_output), topo.output_idx)
    engine.present(lambda t: plan, hyper.iters,
                   stability_threshold=config.stability_threshold)
    return activation(engine.dual.s_s[:, topo.input_idx])


def steps_to_stability(
    params: NetworkParams,
    dual: DualState,
    plan: ClampPlan,
    topology: Topology,
    hyper: HyperParams,
    rng=None,
    *,
    fake_targets: bool = True,
    inertia: float = 1.0,
    threshold: float = 0.001,
    cap: int = STABILITY_CAP,
):
    """Iterations until the weak replica's per-step motion drops below
    the threshold, starting from the given states.

    Learning is off.  Returns (steps, capped); when the cap is hit the
    count equals the cap and the flag is set.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    rng = np.random.default_rng(rng)
    engine = Engine(
        params, topology, hyper, rng,
        batch=dual.s_s.shape[0], alpha=0.0,
        fake_targets=fake_targets, inertia=inertia, dual=dual,
    )
    for t in range(1, cap + 1):
        stats = engine.step(plan)
        if stats.max_ds < threshold:
            return t, False
    return cap, True
