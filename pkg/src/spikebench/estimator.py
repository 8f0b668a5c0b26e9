"""Naive FLOPs-based energy estimate, the baseline the backends are compared to.

``E_est = FLOPs * T * (1 - sparsity) * E_AC`` where FLOPs counts synaptic
accumulations (one AC per weight use; no x2 MAC convention).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError
from .snn import SnnModel


@dataclass(frozen=True)
class EstimateInputs:
    flops: float
    timesteps: float
    sparsity: float
    e_ac: float   # pJ per INT8 accumulation

    def __post_init__(self):
        if not self.flops >= 0:
            raise ContractError("flops must be >= 0")
        if not self.timesteps >= 0:
            raise ContractError("timesteps must be >= 0")
        if not 0 <= self.sparsity <= 1:
            raise ContractError("sparsity must lie in [0, 1]")
        if not self.e_ac >= 0:
            raise ContractError("e_ac must be >= 0")


@dataclass
class FlopCount:
    per_layer: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())


def count_flops(model: SnnModel) -> FlopCount:
    """AC count per weighted layer: conv = Cout*P*Cin*k*k, fc = in*out; pools excluded."""
    return FlopCount({i: l.out_channels * l.positions * l.fan_in
                      for i, l in enumerate(model.layers) if l.is_weighted})


def estimate_energy(inputs: EstimateInputs) -> float:
    """Estimated energy in pJ."""
    return inputs.flops * inputs.timesteps * (1 - inputs.sparsity) * inputs.e_ac
