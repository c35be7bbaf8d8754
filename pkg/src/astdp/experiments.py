"""Scripted small-scale studies: pairing curves, rivalry, adaptation,
and the data-order effect, with CSV and PGM emitters for their traces."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import make_onehot_toy, order_walk
from .net import (
    ClampPlan,
    HyperParams,
    NetworkParams,
    Topology,
    activation,
    build_topology,
    custom_topology,
    relax_step,
)
from .plasticity import DualState, compute_dz, stdp_update
from .training import Engine, RunConfig, clamp_plan, run_supervised, run_test, run_unsupervised


@dataclass
class TraceSeries:
    """Named, equal-length per-iteration series from one experiment."""

    columns: dict

    @property
    def length(self) -> int:
        return 0 if not self.columns else len(next(iter(self.columns.values())))

    def validate(self) -> None:
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"ragged trace columns: {sorted(lengths)}")


# ---------------------------------------------------------------------------
# Pairing-window weight-change curve


@dataclass
class StdpSweepConfig:
    """Sweep of relative pre/post window timings on a two-neuron probe.

    Offsets are pre-window start minus post-window start, in iterations;
    the default sweep covers -3*window .. +3*window symmetrically.
    """

    window: int = 10
    theta_pair: tuple = (0.4, 0.6)
    offsets: Optional[list] = None
    repetitions: int = 1

    def resolved_offsets(self) -> np.ndarray:
        if self.offsets is not None:
            return np.asarray(self.offsets, dtype=np.int64)
        w = self.window
        return np.arange(-3 * w, 3 * w + 1, dtype=np.int64)


@dataclass
class StdpCurve:
    offsets: np.ndarray
    dw: np.ndarray


def _two_neuron_topology() -> Topology:
    mask = np.array([[0, 1], [1, 0]], dtype=bool)
    return custom_topology(mask, input_idx=[0], hidden_idx=[], output_idx=[1])


# Settling margin after the last window closes; decay factors around 0.5
# make the transients negligible well inside this.
_EPISODE_TAIL = 60


def _pairing_episode(hyper: HyperParams, pre_window, post_window, length: int) -> float:
    """Total accumulated input->output weight change over one episode.

    The two neurons stay disconnected (weights pinned at zero) so each
    responds only to its own clamp window; the update increments are
    accumulated as a measurement without feeding back.
    """
    topo = _two_neuron_topology()
    params = NetworkParams(W=np.zeros((2, 2)), b=np.zeros(2))
    s_s = np.zeros((1, 2))
    s_l = np.zeros((1, 2))
    v_s = np.zeros((1, 2))
    v_l = np.zeros((1, 2))
    total = 0.0
    for t in range(length):
        dz = activation(s_l) - activation(s_s)
        target = np.zeros((1, 2))
        strength_s = np.zeros((1, 2))
        strength_l = np.zeros((1, 2))
        for neuron, window in ((0, pre_window), (1, post_window)):
            if window is not None and window[0] <= t < window[1]:
                target[0, neuron] = 1.0
                strength_s[0, neuron] = hyper.theta_s
                strength_l[0, neuron] = hyper.theta_l
        s_s, v_s = relax_step(params, s_s, target, strength_s, hyper.eps_s, v_s)
        s_l, v_l = relax_step(params, s_l, target, strength_l, hyper.eps_l, v_l)
        total += stdp_update(params, topo, s_s, dz, 1.0).W[0, 1]
    return total


def stdp_curve(config: StdpSweepConfig, hyper: HyperParams = None) -> StdpCurve:
    """Weight change of the input->output synapse versus window offset.

    Reported relative to an unpaired control episode (post window alone),
    the same way pairing protocols are scored against unpaired baselines;
    far-apart windows therefore score zero.  Everything is deterministic,
    so repetitions only average identical episodes.
    """
    if config.window < 1:
        raise ValueError("window must be >= 1")
    theta_s, theta_l = config.theta_pair
    hyper = hyper or HyperParams()
    hyper = HyperParams(**{**hyper.__dict__, "theta_s": theta_s, "theta_l": theta_l})
    hyper.validate()
    offsets = config.resolved_offsets()
    w = config.window
    pre_start = 3 * w + 1
    length = pre_start + 4 * w + _EPISODE_TAIL

    # The control episode is position-invariant: the resting state is an
    # exact fixed point until a window opens, so the unpaired total only
    # depends on the window length.  One control serves every offset.
    dw = np.zeros(len(offsets))
    for rep in range(max(config.repetitions, 1)):
        control = _pairing_episode(hyper, None, (pre_start, pre_start + w), length)
        for i, off in enumerate(offsets):
            post_start = pre_start - int(off)
            paired = _pairing_episode(
                hyper, (pre_start, pre_start + w), (post_start, post_start + w), length
            )
            dw[i] += paired - control
    dw /= max(config.repetitions, 1)
    return StdpCurve(offsets=offsets, dw=dw)


def curve_asymmetry(curve: StdpCurve) -> float:
    """|strongest potentiation| minus |strongest depression|."""
    return float(curve.dw.max() - np.abs(curve.dw.min()))


# ---------------------------------------------------------------------------
# Four-item toy network shared by the rivalry and adaptation studies

# Training clamps gently so four distinct attractors form; inference
# clamps the data harder and fires fake targets more eagerly so that an
# ambiguous input can knock the hidden interpretation around without
# destabilizing a clean one.
TOY4_HYPER = HyperParams(
    eps_s=0.4, eps_l=0.5, theta_s=0.25, theta_l=0.5,
    alpha=0.01, k=50.0, m_avg=0.1, t_c=0.25,
    iters=30, free_iters=0, inertia=0.5, batch=4,
)
TOY4_INFER = {"theta_s": 0.5, "theta_l": 1.0, "k": 6.0, "t_c": 0.75, "batch": 1}
TOY4_UPDATES = 400


def train_toy4(seed: int, hyper: HyperParams = None, updates: int = None):
    """Memorize the four one-hot items on a 4-visible/8-hidden net.

    Samples arrive as shuffled whole-set batches so every item gets the
    same pull each update; with replacement sampling the attractor depths
    drift apart and rivalry becomes one-sided.  Returns the trained
    parameters together with the inference-time hyperparameters.
    """
    train_hyper = hyper or TOY4_HYPER
    updates = updates if updates is not None else TOY4_UPDATES
    topo = build_topology((4, 8, 0))
    order_rng = np.random.default_rng(seed + 999)
    order = np.concatenate([order_rng.permutation(4) for _ in range(updates)])
    config = RunConfig(
        mode="unsupervised", hyper=train_hyper, topology=topo,
        total_updates=updates, seed=seed, fake_targets=True, momentum=True,
    )
    params, _ = run_unsupervised(config, make_onehot_toy(4), order=order)
    infer_hyper = HyperParams(**{**train_hyper.__dict__, **TOY4_INFER})
    return params, topo, infer_hyper


def _watched_trace(engine: Engine, plans, watch: dict) -> TraceSeries:
    """Run the prepared plans, recording the watched neurons every step."""
    cols = {f"target_{name}": [] for name in watch}
    for name in watch:
        cols[f"s_s_{name}"] = []
        cols[f"s_l_{name}"] = []
        cols[f"dz_{name}"] = []
    for plan in plans:
        engine.step(plan)
        dz = activation(engine.dual.s_l) - activation(engine.dual.s_s)
        for name, neuron in watch.items():
            cols[f"target_{name}"].append(plan.target[0, neuron])
            cols[f"s_s_{name}"].append(engine.dual.s_s[0, neuron])
            cols[f"s_l_{name}"].append(engine.dual.s_l[0, neuron])
            cols[f"dz_{name}"].append(dz[0, neuron])
    trace = TraceSeries({k: np.asarray(v) for k, v in cols.items()})
    trace.validate()
    return trace


def binocular_rivalry(
    seed: int,
    *,
    pattern=(1.0, 1.0, 0.0, 0.0),
    fake_targets: bool = True,
    iters: int = 2000,
    trained=None,
) -> TraceSeries:
    """Drive the trained four-item net with an ambiguous visible pattern.

    With fake targets on, the superposed input keeps knocking the network
    between the two consistent interpretations; with them off it settles
    into one fixed point and stays.  Learning is off throughout.
    """
    params, topo, hyper = trained if trained is not None else train_toy4(seed)
    rng = np.random.default_rng(seed + 1)
    engine = Engine(
        params, topo, hyper, rng,
        batch=1, alpha=0.0, fake_targets=fake_targets, inertia=hyper.inertia,
    )
    plan = clamp_plan(topo, hyper, np.asarray(pattern, dtype=np.float64), topo.visible_idx)
    watch = {f"v{i}": int(topo.visible_idx[i]) for i in range(len(topo.visible_idx))}
    watch.update({f"h{i}": int(topo.hidden_idx[i]) for i in range(2)})
    return _watched_trace(engine, (plan for _ in range(iters)), watch)


def dominance_fractions(trace: TraceSeries, n_visible: int = 4) -> np.ndarray:
    """Fraction of iterations each visible neuron wins the state argmax."""
    stack = np.stack([trace.columns[f"s_s_v{i}"] for i in range(n_visible)])
    winners = np.argmax(stack, axis=0)
    return np.bincount(winners, minlength=n_visible) / len(winners)


# Adaptation protocol: settle on a baseline item, step the watched
# neuron's target up, then back down.
ADAPT_PHASE = 80


def neural_adaptation(
    seed: int,
    *,
    momentum: bool = True,
    fake_targets: bool = True,
    zero_weights: bool = False,
) -> TraceSeries:
    """Step a visible neuron's clamp target 0 -> 1 -> 0 and record it.

    On the trained net with momentum and fake targets the onset
    transient overshoots its plateau the way adapting neurons spike; the
    zero-weight variant with neither aid is a plain first-order
    relaxation and approaches monotonically.
    """
    if zero_weights:
        topo = build_topology((4, 8, 0))
        hyper = TOY4_HYPER
        params = NetworkParams(W=np.zeros((topo.n_total, topo.n_total)),
                               b=np.zeros(topo.n_total))
    else:
        params, topo, hyper = train_toy4(seed)
    rng = np.random.default_rng(seed + 2)
    engine = Engine(
        params, topo, hyper, rng,
        batch=1, alpha=0.0, fake_targets=fake_targets,
        inertia=hyper.inertia if momentum else 1.0,
    )
    baseline = np.array([0.0, 1.0, 0.0, 0.0])
    active = np.array([1.0, 0.0, 0.0, 0.0])
    plans = []
    for phase_pattern in (baseline, active, baseline):
        plan = clamp_plan(topo, hyper, phase_pattern, topo.visible_idx)
        plans.extend([plan] * ADAPT_PHASE)
    watch = {"n0": int(topo.visible_idx[0])}
    return _watched_trace(engine, plans, watch)


# ---------------------------------------------------------------------------
# Data-order study on the eight-item association task

REL_HIDDEN = 24
REL_TRAIN_UPDATES = 600
REL_TEST_STEPS = 240
REL_HYPER = HyperParams(
    eps_s=0.4, eps_l=0.5, theta_s=0.25, theta_l=0.5,
    alpha=0.01, k=50.0, m_avg=0.1, t_c=0.25,
    iters=160, free_iters=80, inertia=0.5, batch=1,
)


@dataclass
class StateTables:
    """Accuracy of each net under each presentation order.

    Rows index the training order (stride 1, stride 3), columns the test
    order; one table per test-iteration budget.
    """

    acc_full: np.ndarray   # tested at the full iteration budget
    acc_half: np.ndarray   # tested at half the budget
    full_iters: int
    half_iters: int


def _train_ordered_net(seed: int, stride: int, hyper: HyperParams):
    topo = build_topology((8, REL_HIDDEN, 8))
    walk = order_walk(8, stride, REL_TRAIN_UPDATES, np.random.default_rng(seed + 10 * stride))
    config = RunConfig(
        mode="supervised", hyper=hyper, topology=topo,
        total_updates=REL_TRAIN_UPDATES, seed=seed,
        fake_targets=True, momentum=True,
    )
    params, _ = run_supervised(config, make_onehot_toy(8), order=walk)
    return params, topo


def _ordered_accuracy(params, topo, hyper, stride: int, iters: int, seed: int) -> float:
    walk = order_walk(8, stride, REL_TEST_STEPS, np.random.default_rng(seed + 100 * stride))
    test_set = make_onehot_toy(8).subset(walk)
    test_hyper = HyperParams(**{**hyper.__dict__, "iters": iters, "free_iters": 0})
    config = RunConfig(
        mode="test", hyper=test_hyper, topology=topo,
        total_updates=0, seed=seed + 7,
        fake_targets=True, momentum=True,
    )
    return run_test(config, params, test_set)


def state_relationship(seed: int = 0, hyper: HyperParams = None) -> StateTables:
    """Train with stride-1 and stride-3 orders, test under both orders.

    At the full test budget both nets resolve every item; at half budget
    each net is faster in the order it practiced.
    """
    hyper = hyper or REL_HYPER
    nets = {stride: _train_ordered_net(seed, stride, hyper) for stride in (1, 3)}
    full, half = hyper.iters, hyper.iters // 2
    acc_full = np.zeros((2, 2))
    acc_half = np.zeros((2, 2))
    for i, train_stride in enumerate((1, 3)):
        params, topo = nets[train_stride]
        for j, test_stride in enumerate((1, 3)):
            acc_full[i, j] = _ordered_accuracy(params, topo, hyper, test_stride, full, seed)
            acc_half[i, j] = _ordered_accuracy(params, topo, hyper, test_stride, half, seed)
    return StateTables(acc_full=acc_full, acc_half=acc_half,
                       full_iters=full, half_iters=half)


# ---------------------------------------------------------------------------
# Emitters


def emit_csv(trace, path) -> None:
    """Write named series as comma-separated columns with a header row."""
    columns = trace.columns if isinstance(trace, TraceSeries) else dict(trace)
    names = list(columns)
    arrays = [np.asarray(columns[name]) for name in names]
    if arrays and len({len(a) for a in arrays}) > 1:
        raise ValueError("all columns must have equal length")
    with open(path, "w") as f:
        f.write(",".join(names) + "\n")
        for row in range(len(arrays[0]) if arrays else 0):
            f.write(",".join(repr(float(a[row])) for a in arrays) + "\n")


def emit_pgm(image, path, rows: int = 28, cols: int = 28) -> None:
    """Write one grayscale image as binary PGM (P5, maxval 255).

    Values are clamped to [0, 1] and scaled so 1.0 maps to 255, with
    halves rounding up.
    """
    image = np.asarray(image, dtype=np.float64).reshape(rows, cols)
    scaled = np.floor(255.0 * np.clip(image, 0.0, 1.0) + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(scaled.tobytes())
