"""Dual-replica derivative estimate and the local weight update rules.

Two replicas share one set of parameters but are clamped at different
strengths.  The difference of their firing rates, dz = rho(s_l) - rho(s_s),
estimates how much harder clamping would move each neuron, and drives both
the weight update (pre activity times post dz) and the stochastic fake
targets that kick hidden neurons out of poor fixed points.
"""

from dataclasses import dataclass

import numpy as np

from .net import HyperParams, NetworkParams, Topology, activation, activation_deriv

# Floor for the dz moving average so the fake-target ratio is defined at init.
DZ_FLOOR = 1e-6

# Cap reported by symmetry_metric when the symmetric part vanishes.
SYMMETRY_CAP = 1e18


@dataclass
class DualState:
    """States and velocities of both replicas plus the dz moving average."""

    s_s: np.ndarray   # (B, N) weakly clamped replica
    s_l: np.ndarray   # (B, N) strongly clamped replica
    v_s: np.ndarray   # (B, N) velocity of s_s
    v_l: np.ndarray   # (B, N) velocity of s_l
    dz_m: np.ndarray  # (N,) moving average of |dz|, floored positive

    def copy(self) -> "DualState":
        return DualState(
            self.s_s.copy(), self.s_l.copy(),
            self.v_s.copy(), self.v_l.copy(), self.dz_m.copy(),
        )


def init_dual(topology: Topology, batch: int, rng) -> DualState:
    """Both replicas start from one shared random state so dz starts at 0."""
    rng = np.random.default_rng(rng)
    s0 = rng.uniform(0.0, 1.0, size=(batch, topology.n_total))
    zeros = np.zeros_like(s0)
    return DualState(
        s_s=s0.copy(), s_l=s0.copy(),
        v_s=zeros.copy(), v_l=zeros.copy(),
        dz_m=np.full(topology.n_total, DZ_FLOOR),
    )


@dataclass
class FakeTargetDraw:
    """One Bernoulli draw of hidden-neuron fake targets.

    indicator is 0 on visible neurons; targets take values in
    {-t_c, 0, +t_c} and are nonzero only where the indicator fired.
    """

    indicator: np.ndarray  # (B, N), 0/1
    target: np.ndarray     # (B, N)


def compute_dz(dual: DualState) -> np.ndarray:
    """dz = rho(s_l) - rho(s_s), elementwise."""
    return activation(dual.s_l) - activation(dual.s_s)


def update_dz_mavg(dz_m: np.ndarray, dz: np.ndarray, m: float) -> np.ndarray:
    """Exponential moving average of the batch-mean |dz|, per neuron."""
    mean_abs = np.abs(np.atleast_2d(dz)).mean(axis=0)
    return np.maximum(m * mean_abs + (1.0 - m) * dz_m, DZ_FLOOR)


def sample_fake_targets(
    dz: np.ndarray,
    dz_m: np.ndarray,
    topology: Topology,
    hyper: HyperParams,
    rng,
) -> FakeTargetDraw:
    """Bernoulli fake targets for hidden neurons.

    Each hidden neuron fires with probability min(1, |dz| / (k * dz_m))
    and receives the target sign(dz) * t_c; sign(0) = 0, so a silent
    neuron gets nothing.  Visible neurons never fire.  With
    k_as_multiplier the probability reads min(1, k * |dz| / dz_m) instead.
    """
    dz = np.atleast_2d(dz)
    batch, n = dz.shape
    indicator = np.zeros((batch, n))
    target = np.zeros((batch, n))
    hid = topology.hidden_idx
    if len(hid) == 0:
        return FakeTargetDraw(indicator, target)

    dz_h = dz[:, hid]
    u = rng.uniform(0.0, 1.0, size=dz_h.shape)
    if hyper.k_as_multiplier:
        threshold = u * dz_m[hid] / hyper.k
    else:
        threshold = u * hyper.k * dz_m[hid]
    fired = (np.abs(dz_h) > threshold).astype(np.float64)
    indicator[:, hid] = fired
    target[:, hid] = np.sign(dz_h) * hyper.t_c * fired
    return FakeTargetDraw(indicator=indicator, target=target)


def stdp_update(
    params: NetworkParams,
    topology: Topology,
    s_s: np.ndarray,
    dz: np.ndarray,
    alpha: float,
    update_mask: np.ndarray = None,
) -> NetworkParams:
    """Local weight update: presynaptic rate times postsynaptic dz.

    W[j, i] += alpha * mean_batch(rho(s_s[j]) * dz[i]) on masked-in edges;
    b[i] += alpha * mean_batch(dz[i]).  The batch reduction is a mean so
    alpha is independent of batch size.  update_mask, when given, further
    restricts which edges may change (used to freeze trained blocks).
    """
    s_s = np.atleast_2d(s_s)
    dz = np.atleast_2d(dz)
    batch = s_s.shape[0]
    dw = (activation(s_s).T @ dz) / batch
    dw[~topology.mask] = 0.0
    db = dz.mean(axis=0)
    if update_mask is not None:
        dw = dw * update_mask
        db = db * update_mask.any(axis=0)
    return NetworkParams(W=params.W + alpha * dw, b=params.b + alpha * db)


def smoothing_update(
    params: NetworkParams,
    topology: Topology,
    s: np.ndarray,
    ds: np.ndarray,
    rate: float,
) -> NetworkParams:
    """Shrink the unclamped drive along the current states.

    Gradient descent on 0.5 * ||ds||^2 with ds = R(s) - s held at the
    given value:  dW[j, i] = mean_batch(ds[i] * rho'(s[i]) * rho(s[j])),
    db[i] = mean_batch(ds[i] * rho'(s[i])).  rate = 0 is the identity.
    """
    if rate == 0.0:
        return params
    s = np.atleast_2d(s)
    ds = np.atleast_2d(ds)
    batch = s.shape[0]
    weighted = ds * activation_deriv(s)
    dw = (activation(s).T @ weighted) / batch
    dw[~topology.mask] = 0.0
    db = weighted.mean(axis=0)
    return NetworkParams(W=params.W - rate * dw, b=params.b - rate * db)


def symmetry_metric(params: NetworkParams) -> float:
    """||W - W^T||_F / ||W + W^T||_F, capped at a large sentinel.

    Zero for symmetric weights; grows toward the cap as the antisymmetric
    part dominates.  Masked-out entries are zero on both sides of the
    ratio, so they never contribute.
    """
    num = np.linalg.norm(params.W - params.W.T)
    den = np.linalg.norm(params.W + params.W.T)
    return float(min(num / max(den, 1e-30), SYMMETRY_CAP))
