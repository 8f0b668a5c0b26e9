"""Per-input execution shared by the backends: DT-SNN aware runs, activity
counting and order-preserving parallelism."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from .errors import ContractError
from .mitigations import DtSnnPolicy, dt_snn_infer
from .snn import LayerSpec, MvmProvider, SnnModel

T_ = TypeVar("T_")
R_ = TypeVar("R_")

THREADS_ENV = "SPIKEBENCH_THREADS"


@dataclass(frozen=True)
class SimOptions:
    dt_snn_threshold: float | None = None
    nonideal: bool = False
    seed: int = 0
    workers: int | None = None
    entropy_overhead: float = 1e-3   # entropy module energy, fraction of per-timestep compute

    def __post_init__(self):
        if self.dt_snn_threshold is not None and not self.dt_snn_threshold >= 0:
            raise ContractError("dt_snn_threshold must be >= 0")
        if self.entropy_overhead < 0:
            raise ContractError("entropy_overhead must be >= 0")

    @property
    def charges_entropy(self) -> bool:
        return bool(self.dt_snn_threshold)


def worker_count(workers: int | None = None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            workers = int(env)
        except ValueError:
            raise ContractError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if workers is None:
        return 1
    if workers < 1:
        raise ContractError("worker count must be >= 1")
    return workers


def parallel_map(fn: Callable[[T_], R_], items: Sequence[T_], workers: int | None = None) -> list[R_]:
    """``list(map(fn, items))`` with optional threads; result order is the input order."""
    n = worker_count(workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


ActivityFn = Callable[[int, LayerSpec, np.ndarray], float]


@dataclass
class InputTrace:
    prediction: int
    timesteps_used: int
    activity: np.ndarray   # (layers, T) backend-defined activity counts, 0 after exit


def trace_input(model: SnnModel, x: np.ndarray, mvm: MvmProvider, threshold: float | None,
                activity: ActivityFn) -> InputTrace:
    T = model.timesteps
    act = np.zeros((len(model.layers), T))

    def hook(t, step):
        for i, layer in enumerate(model.layers):
            act[i, t - 1] = activity(i, layer, step.inputs[i])

    res = dt_snn_infer(model, x, DtSnnPolicy(threshold or 0.0, T), mvm, on_step=hook)
    return InputTrace(res.prediction, res.timesteps_used, act)


def mean_over_inputs(traces: Sequence[InputTrace], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of inputs alive at each timestep, and mean activity (layers, T)."""
    alive = np.zeros(T)
    act = np.zeros_like(traces[0].activity)
    for tr in traces:   # fixed order keeps sums bit-reproducible
        alive[:tr.timesteps_used] += 1
        act += tr.activity
    return alive / len(traces), act / len(traces)
