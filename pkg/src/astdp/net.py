"""Continuous Hopfield network core: topology, parameters, energy, relaxation.

The network is a single pool of N neurons with real-valued internal states.
Neurons are laid out in layer order (input block, hidden blocks, output
block) and connected through a structurally symmetric binary mask; the
weights themselves are directed and generally asymmetric.  State updates
are leaky-integrator steps driven by the recurrent pressure plus optional
per-neuron clamp forces pulling states toward targets.
"""

from dataclasses import dataclass, field

import numpy as np

# Divergence guard: the clamp/decay dynamics keep |s| around O(1), so any
# state this large means the integration blew up.
STATE_BOUND = 10.0


class DivergenceError(RuntimeError):
    """Raised when a relaxation step produces non-finite or runaway states."""


def activation(x):
    """sigmoid(4x), applied elementwise."""
    return 1.0 / (1.0 + np.exp(-4.0 * np.asarray(x, dtype=np.float64)))


def activation_deriv(x):
    """Derivative of sigmoid(4x): 4*a*(1-a)."""
    a = activation(x)
    return 4.0 * a * (1.0 - a)


@dataclass(frozen=True)
class Topology:
    """Connectivity structure shared by all parameter sets of one network.

    layer_sizes orders the neuron blocks as (input, hidden..., output);
    the output block may be empty for purely unsupervised nets.  The mask
    is binary with zero diagonal and mask[i, j] == mask[j, i]; weights on
    masked-out entries are pinned to exactly zero.
    """

    layer_sizes: tuple
    mask: np.ndarray
    input_idx: np.ndarray
    hidden_idx: np.ndarray
    output_idx: np.ndarray

    @property
    def n_total(self) -> int:
        return self.mask.shape[0]

    @property
    def visible_idx(self) -> np.ndarray:
        return np.concatenate([self.input_idx, self.output_idx])

    @property
    def n_input(self) -> int:
        return len(self.input_idx)

    @property
    def n_output(self) -> int:
        return len(self.output_idx)

    def layer_slices(self) -> list:
        """Contiguous index ranges of each layer, in layout order."""
        out = []
        start = 0
        for size in self.layer_sizes:
            out.append(slice(start, start + size))
            start += size
        return out

    def validate(self) -> None:
        n = self.n_total
        if self.mask.shape != (n, n):
            raise ValueError("mask must be square")
        if np.any(np.diag(self.mask)):
            raise ValueError("mask has self-connections")
        if not np.array_equal(self.mask, self.mask.T):
            raise ValueError("mask must be structurally symmetric")
        all_idx = np.concatenate([self.input_idx, self.hidden_idx, self.output_idx])
        if len(np.unique(all_idx)) != n or len(all_idx) != n:
            raise ValueError("index sets must partition the neuron range")


def build_topology(layer_sizes) -> Topology:
    """Build the standard layered connectivity.

    Adjacent layers are fully bidirectionally connected.  With a single
    hidden layer the hidden neurons are additionally all-to-all
    interconnected; deeper stacks have no intra-layer recurrence.  Input
    and output neurons are never directly connected.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 3:
        raise ValueError("layer_sizes needs (input, hidden..., output)")
    if sizes[0] < 1:
        raise ValueError("input layer must be non-empty")
    if any(s < 1 for s in sizes[1:-1]):
        raise ValueError("hidden layers must be non-empty")
    if sizes[-1] < 0:
        raise ValueError("output size must be >= 0")

    n = sum(sizes)
    mask = np.zeros((n, n), dtype=bool)
    slices = []
    start = 0
    for size in sizes:
        slices.append(slice(start, start + size))
        start += size

    for a, b in zip(slices[:-1], slices[1:]):
        mask[a, b] = True
        mask[b, a] = True
    if len(sizes) == 3:
        h = slices[1]
        mask[h, h] = True
    np.fill_diagonal(mask, False)

    idx = np.arange(n)
    topo = Topology(
        layer_sizes=sizes,
        mask=mask,
        input_idx=idx[slices[0]],
        hidden_idx=idx[slices[1].start : slices[-1].start],
        output_idx=idx[slices[-1]],
    )
    topo.validate()
    return topo


def custom_topology(mask, input_idx, hidden_idx, output_idx) -> Topology:
    """Topology from an explicit mask, for small hand-built networks."""
    mask = np.asarray(mask, dtype=bool)
    topo = Topology(
        layer_sizes=(len(input_idx), len(hidden_idx), len(output_idx)),
        mask=mask,
        input_idx=np.asarray(input_idx, dtype=np.intp),
        hidden_idx=np.asarray(hidden_idx, dtype=np.intp),
        output_idx=np.asarray(output_idx, dtype=np.intp),
    )
    topo.validate()
    return topo


@dataclass
class NetworkParams:
    """Learnable state: directed weights and biases.

    W[j, i] is the weight from neuron j into neuron i.  W is not
    constrained to be symmetric; masked-out entries stay exactly zero.
    """

    W: np.ndarray
    b: np.ndarray

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.W.copy(), self.b.copy())


@dataclass
class HyperParams:
    """Scalar knobs for the dual-replica dynamics and learning rule.

    Defaults are the full-scale MNIST settings; toy runs and the desk
    configs override them.
    """

    eps_s: float = 0.4          # step size, weakly clamped replica
    eps_l: float = 0.5          # step size, strongly clamped replica
    theta_s: float = 0.25       # clamp strength, weak replica
    theta_l: float = 0.4        # clamp strength, strong replica
    alpha: float = 0.0001       # learning rate
    k: float = 50.0             # fake-target scale factor
    m_avg: float = 0.1          # moving-average factor for dz_m
    t_c: float = 0.25           # fake-target magnitude
    iters: int = 160            # iterations per relaxation (T)
    free_iters: int = 80        # free-phase iterations (T_f), supervised
    inertia: float = 0.5        # momentum mixing factor for velocities
    batch: int = 128
    smoothing_rate: float = 0.0  # path-smoothing rate, 0 disables
    k_as_multiplier: bool = False  # alternative fake-target probability reading

    def validate(self) -> None:
        if not (0.0 < self.theta_s < self.theta_l):
            raise ValueError("need 0 < theta_s < theta_l")
        if not (0.0 < self.eps_s <= 1.0 and 0.0 < self.eps_l <= 1.0):
            raise ValueError("need 0 < eps <= 1")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 < self.m_avg < 1.0):
            raise ValueError("need 0 < m_avg < 1")
        if not (0 <= self.free_iters < self.iters):
            raise ValueError("need 0 <= free_iters < iters")
        if self.k <= 0.0:
            raise ValueError("k must be > 0")
        if self.t_c <= 0.0:
            raise ValueError("t_c must be > 0")
        if not (0.0 < self.inertia <= 1.0):
            raise ValueError("need 0 < inertia <= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.smoothing_rate < 0.0:
            raise ValueError("smoothing_rate must be >= 0")


@dataclass
class ClampPlan:
    """Per-neuron targets and per-replica clamp strengths for one step.

    Strengths are zero for unclamped neurons.  Data-clamped visible
    neurons carry (theta_s, theta_l); fake-targeted hidden neurons carry
    the same strengths gated by the firing indicator.
    """

    target: np.ndarray      # (B, N)
    strength_s: np.ndarray  # (B, N), >= 0
    strength_l: np.ndarray  # (B, N), >= 0

    @classmethod
    def empty(cls, batch: int, n: int) -> "ClampPlan":
        z = np.zeros((batch, n))
        return cls(z, z.copy(), z.copy())


def pressure(params: NetworkParams, s: np.ndarray) -> np.ndarray:
    """Recurrent drive on each neuron from the rest of the network.

    R_i = rho'(s_i) * (sum_j W[j, i] * rho(s_j) + b_i), per batch row.
    Masked-out edges contribute nothing because their weights are zero.
    """
    s = np.atleast_2d(s)
    if s.shape[1] != params.W.shape[0]:
        raise ValueError(f"state width {s.shape[1]} != network size {params.W.shape[0]}")
    return activation_deriv(s) * (activation(s) @ params.W + params.b)


def energy(params: NetworkParams, s: np.ndarray) -> np.ndarray:
    """Hopfield energy per batch row."""
    s = np.atleast_2d(s)
    z = activation(s)
    quad = 0.5 * np.einsum("bi,ij,bj->b", z, params.W, z)
    return 0.5 * (s * s).sum(axis=1) - quad - z @ params.b


def energy_grad(params: NetworkParams, s: np.ndarray) -> np.ndarray:
    """Exact dE/ds, which couples each pair through (W + W^T)/2.

    The dynamics use the directed column W[:, i] alone, so for asymmetric
    weights the drive only approximates -dE/ds.  Exposed as a diagnostic;
    the two agree exactly when W is symmetric.
    """
    s = np.atleast_2d(s)
    w_sym = 0.5 * (params.W + params.W.T)
    return s - activation_deriv(s) * (activation(s) @ w_sym + params.b)


def clamp_cost(s: np.ndarray, plan: ClampPlan, replica: str = "s") -> np.ndarray:
    """Squared distance to targets over the clamped neurons, per batch row."""
    s = np.atleast_2d(s)
    strength = plan.strength_s if replica == "s" else plan.strength_l
    clamped = strength > 0.0
    diff = np.where(clamped, plan.target - s, 0.0)
    return 0.5 * (diff * diff).sum(axis=1)


def relax_step(
    params: NetworkParams,
    s: np.ndarray,
    target: np.ndarray,
    strength: np.ndarray,
    eps: float,
    velocity: np.ndarray,
    inertia: float = 1.0,
):
    """One leaky-integrator step with clamp forces and momentum.

    drive d = (R(s) - s) + strength * (target - s)
    v' = inertia * d + (1 - inertia) * v
    s' = s + eps * v'

    inertia = 1 recovers the memoryless update.  Returns (s', v').
    """
    s = np.atleast_2d(s)
    drive = (pressure(params, s) - s) + strength * (target - s)
    v_new = inertia * drive + (1.0 - inertia) * velocity
    s_new = s + eps * v_new
    check_states(s_new)
    return s_new, v_new


def check_states(s: np.ndarray) -> None:
    if not np.all(np.isfinite(s)):
        raise DivergenceError("non-finite state encountered")
    peak = np.abs(s).max() if s.size else 0.0
    if peak > STATE_BOUND:
        raise DivergenceError(f"state magnitude {peak:.3g} exceeds bound {STATE_BOUND}")


def fan_in(topology: Topology) -> np.ndarray:
    """Number of masked-in incoming edges per neuron."""
    return topology.mask.sum(axis=0)


def init_params(topology: Topology, seed, inverted_xavier: bool = False) -> NetworkParams:
    """Uniform(-x, x) weight init with x = sqrt(6 / fan_in) per destination.

    inverted_xavier flips the bound to sqrt(fan_in / 6) for comparison
    runs.  Biases start at zero; masked-out entries are exactly zero.
    Deterministic given the seed (or an existing Generator).
    """
    rng = np.random.default_rng(seed)
    n = topology.n_total
    fans = fan_in(topology).astype(np.float64)
    with np.errstate(divide="ignore"):
        if inverted_xavier:
            bound = np.sqrt(fans / 6.0)
        else:
            bound = np.where(fans > 0, np.sqrt(6.0 / np.maximum(fans, 1.0)), 0.0)
    w = rng.uniform(-1.0, 1.0, size=(n, n)) * bound[np.newaxis, :]
    w[~topology.mask] = 0.0
    return NetworkParams(W=w, b=np.zeros(n))


def init_states(topology: Topology, batch: int, rng) -> np.ndarray:
    """Fresh internal states, Uniform(0, 1) per neuron and batch row."""
    rng = np.random.default_rng(rng)
    return rng.uniform(0.0, 1.0, size=(batch, topology.n_total))
