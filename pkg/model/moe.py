"""Python module for the top-k gated Mixture-of-Experts layer.

x -> dense input layer -> h; gate: softmax(dense(h)) gives one probability per
expert; every expert is a dense ReLU layer on h. Each sample's output is the sum
of its k most probable experts' outputs, each scaled by its gating probability.
The selected probabilities are not renormalized unless ``renormalize`` is set.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from autodiff.tensor import Tensor, record
from model import functional as F
from model.layers import Dense, Layer
from utilities.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class MoEConfig:
    input_dim: int
    num_experts: int = 4
    top_k: int = 2
    expert_dim: Optional[int] = None
    renormalize: bool = False

    def __post_init__(self):
        if self.expert_dim is None:
            self.expert_dim = self.input_dim
        if self.input_dim < 1 or self.num_experts < 1 or self.expert_dim < 1:
            raise ConfigError(f"MoE widths and expert count must be >= 1, got {self}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"moe.top_k must be in [1, {self.num_experts}], got {self.top_k}")


@dataclass
class RoutingReport:
    """Routing diagnostics for one batch of gate probabilities."""
    selection_frequency: np.ndarray  # fraction of samples routed to each expert; sums to k
    mean_probability: np.ndarray
    selected_mass: np.ndarray  # per sample, sum of the selected probabilities

    def to_dict(self) -> dict:
        return {
            "selection_frequency": [round(float(v), 4) for v in self.selection_frequency],
            "mean_probability": [round(float(v), 4) for v in self.mean_probability],
            "mean_selected_mass": round(float(self.selected_mass.mean()), 4),
        }


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean N×E mask of the k largest entries per row; lower index wins ties."""
    if not 1 <= k <= probs.shape[-1]:
        raise ValueError(f"k must be in [1, {probs.shape[-1]}], got {k}")
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def top_k_mixture(probs: Tensor, expert_outputs: Sequence[Tensor], k: int, renormalize: bool = False) -> Tensor:
    """
    Combine expert outputs with the gating probabilities of each sample's top-k experts.

    Selection is a hard choice: non-selected experts get exactly zero weight and
    zero gradient, and the gate receives gradient only through the selected
    probabilities.

    Args:
        probs: N×E gating probabilities
        expert_outputs: E tensors of shape N×D
        k: Number of experts kept per sample
        renormalize: Divide the kept probabilities by their sum

    Returns:
        N×D mixture
    """
    n, num_experts = probs.shape
    if len(expert_outputs) != num_experts:
        raise ShapeError(f"{len(expert_outputs)} expert outputs for {num_experts} gate probabilities")
    width = expert_outputs[0].shape
    if any(output.shape != width or output.shape[0] != n for output in expert_outputs):
        raise ShapeError("All expert outputs must share the shape N×D")

    mask = top_k_mask(probs.data, k)
    kept = np.where(mask, probs.data, 0.0).astype(probs.dtype)
    selected_mass = kept.sum(axis=1, keepdims=True)
    weights = kept / selected_mass if renormalize else kept

    out = np.zeros(width, dtype=probs.dtype)
    for e, output in enumerate(expert_outputs):
        out += weights[:, e:e + 1] * output.data

    def backward_fn(grad):
        grad_experts = [weights[:, e:e + 1] * grad for e in range(num_experts)]
        grad_weights = np.stack(
            [(grad * output.data).sum(axis=1) for output in expert_outputs], axis=1
        ) * mask
        if renormalize:
            grad_probs = mask * (
                grad_weights / selected_mass
                - (grad_weights * kept).sum(axis=1, keepdims=True) / selected_mass ** 2
            )
        else:
            grad_probs = grad_weights
        return [grad_probs.astype(probs.dtype)] + grad_experts

    return record("moe_combine", [probs] + list(expert_outputs), Tensor(out), backward_fn)


def routing_stats(probs: np.ndarray, k: int) -> RoutingReport:
    """
    Summarize how a batch was routed.

    Args:
        probs: N×E gating probabilities, rows summing to 1
        k: Experts selected per sample

    Returns:
        RoutingReport with per-expert frequencies/means and per-sample selected mass
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("Gate probabilities must sum to 1 per sample")
    mask = top_k_mask(probs, k)
    return RoutingReport(
        selection_frequency=mask.mean(axis=0),
        mean_probability=probs.mean(axis=0),
        selected_mass=(probs * mask).sum(axis=1),
    )


class MoELayer(Layer):
    """Dense input layer, E dense-ReLU experts, a softmax gate and top-k combination."""

    kind = "moe"

    def __init__(self, name: str, config: MoEConfig, rng: np.random.Generator):
        super().__init__(name)
        self.config = config
        d = config.input_dim
        self.input_dense = Dense("input_dense", d, d, rng, activation="none")
        self.experts: List[Dense] = [
            Dense(f"expert{e}", d, config.expert_dim, rng, activation="relu") for e in range(config.num_experts)
        ]
        self.gate = Dense("gate", d, config.num_experts, rng, activation="none")
        self.last_probabilities: Optional[np.ndarray] = None
        self.last_selection: Optional[np.ndarray] = None

    @property
    def output_dim(self) -> int:
        return self.config.expert_dim

    def __call__(self, x: Tensor, training: bool = False, rng=None, k: Optional[int] = None) -> Tensor:
        k = self.config.top_k if k is None else k
        if not 1 <= k <= self.config.num_experts:
            raise ValueError(f"{self.name}: k must be in [1, {self.config.num_experts}], got {k}")
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(f"{self.name}: expected N×{self.config.input_dim} input, got {x.shape}")
        h = self.input_dense(x)
        probs = F.softmax(self.gate(h))
        outputs = [expert(h) for expert in self.experts]
        self.last_probabilities = probs.data
        self.last_selection = top_k_mask(probs.data, k)
        return top_k_mixture(probs, outputs, k, renormalize=self.config.renormalize)

    def sublayers(self) -> List[Dense]:
        return [self.input_dense] + self.experts + [self.gate]

    def parameters(self):
        return [(f"{layer.name}/{pname}", p) for layer in self.sublayers() for pname, p in layer.parameters()]

    def output_shape(self, input_shape):
        return (input_shape[0], self.config.expert_dim)

    def describe(self):
        c = self.config
        return f"moe {c.num_experts} experts, top-{c.top_k}, width {c.expert_dim}"

    def summary_rows(self, input_shape, prefix: str = ""):
        hidden = (input_shape[0], self.config.input_dim)
        rows = [(f"{prefix}input_dense", self.input_dense.describe(), hidden, self.input_dense.num_parameters())]
        rows += [
            (f"{prefix}{expert.name}", expert.describe(), (input_shape[0], self.config.expert_dim), expert.num_parameters())
            for expert in self.experts
        ]
        rows.append((f"{prefix}gate", "gate dense + softmax", (input_shape[0], self.config.num_experts), self.gate.num_parameters()))
        return rows
