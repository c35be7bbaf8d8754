"""Dual-replica STDP-style learning on continuous Hopfield networks."""

import os as _os

# Honor the worker cap before numpy initializes its thread pools.
_threads = _os.environ.get("ASTDP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import data, experiments, net, plasticity, training  # noqa: E402
from .net import (  # noqa: E402
    ClampPlan,
    DivergenceError,
    HyperParams,
    NetworkParams,
    Topology,
    build_topology,
    init_params,
)
from .plasticity import DualState, FakeTargetDraw, init_dual  # noqa: E402
from .training import Engine, EpisodeTrace, RunConfig  # noqa: E402

__version__ = "0.1.0"
