"""Perceptually regularized adversarial perturbation search.

The optimizer walks an image toward a target margin while penalizing both the
pixel-space distance and the distance between intermediate ReLU activations of
the perturbed and clean image (the perceptual penalty).  Reference activations
of the clean image are computed once and treated as constants; with a zero
perceptual weight (or an empty layer set) the objective reduces exactly to the
plain pixel-regularized margin chase, and with a zero pixel weight on top of
that to the bare margin term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .model import LayerSet, Network, SINGLE_LABEL, MULTI_LABEL, forward_arrays, forward_full
from .tensor_core import Tensor


class PerturbError(ValueError):
    """Invalid margin/perturbation request (bad mode, class, or start image)."""


class NonFiniteObjective(RuntimeError):
    """The objective left the finite range during optimization."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"objective became {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class MarginSpec:
    """Which margin to drive: a single-label class-vs-best-competitor margin,
    or a multi-label per-class response (optionally the spatial max over all
    candidate regions, which suppresses every region in turn)."""

    mode: str
    class_index: int
    suppress_all_regions: bool = False

    def __post_init__(self):
        if self.mode not in (SINGLE_LABEL, MULTI_LABEL):
            raise PerturbError(f"unknown margin mode {self.mode!r}")
        if self.class_index < 0:
            raise PerturbError("class index must be non-negative")


@dataclass(frozen=True)
class PerturbConfig:
    target_margin: float = -2.0
    pixel_weight: float = 1.0
    percept_weight: float = 0.0
    layer_set: LayerSet = field(default_factory=LayerSet.empty)
    step_size: float = 0.1
    max_iters: int = 2000
    stop_tol: float = 1e-2
    seed: int = 0
    clamp_result: bool = False

    def __post_init__(self):
        if not self.target_margin < 0:
            raise PerturbError("target margin must be < 0")
        if self.pixel_weight < 0 or self.percept_weight < 0:
            raise PerturbError("weights must be >= 0")
        if self.max_iters < 1:
            raise PerturbError("max_iters must be >= 1")
        if self.step_size <= 0:
            raise PerturbError("step size must be > 0")

    @staticmethod
    def for_localization(layer_set: LayerSet, **kw) -> "PerturbConfig":
        """Margin target -2 with pixel weight 1 and perceptual weight 10000."""
        return PerturbConfig(target_margin=-2.0, pixel_weight=1.0,
                             percept_weight=10000.0, layer_set=layer_set, **kw)

    @staticmethod
    def for_pointing(layer_set: LayerSet, **kw) -> "PerturbConfig":
        """Margin target -10 with pixel weight 1 and perceptual weight 1000."""
        return PerturbConfig(target_margin=-10.0, pixel_weight=1.0,
                             percept_weight=1000.0, layer_set=layer_set, **kw)

    @property
    def perceptual_active(self) -> bool:
        return self.percept_weight != 0.0 and bool(self.layer_set)


@dataclass
class PerturbResult:
    x_prime: Tensor
    final_margin: float
    final_objective: float
    iterations_used: int
    objective_trajectory: list
    converged: bool


# ---------------------------------------------------------------------------
# margins

def _competitor(values: np.ndarray, i: int) -> int:
    """Best competing class; ties resolve to the lowest index."""
    masked = values.copy()
    masked[i] = -np.inf
    return int(np.argmax(masked))


def margin(logits_or_response, spec: MarginSpec) -> float:
    """Scalar decision margin; <= 0 exactly when the classifier no longer
    assigns the class (strict argmax for single-label, positive response for
    multi-label).  Spatial maps contribute their maximal response."""
    arr = logits_or_response.array if isinstance(logits_or_response, Tensor) \
        else np.asarray(logits_or_response, dtype=np.float64)
    i = spec.class_index
    if spec.mode == SINGLE_LABEL:
        if arr.ndim != 1:
            raise PerturbError(f"single-label margin needs a logits vector, got {arr.shape}")
        if arr.shape[0] < 2:
            raise PerturbError("single-label margin needs at least 2 classes")
        if i >= arr.shape[0]:
            raise PerturbError(f"class {i} out of range for {arr.shape[0]} logits")
        return float(arr[i] - arr[_competitor(arr, i)])
    if arr.ndim == 1:
        if i >= arr.shape[0]:
            raise PerturbError(f"class {i} out of range for {arr.shape[0]} responses")
        return float(arr[i])
    if arr.ndim == 2:
        return float(arr.max())
    if arr.ndim == 3:
        if i >= arr.shape[0]:
            raise PerturbError(f"class {i} out of range for {arr.shape[0]} response maps")
        return float(arr[i].max())
    raise PerturbError(f"unsupported response shape {arr.shape}")


def _margin_node(logits: Tensor, spec: MarginSpec) -> Tensor:
    """Graph-attached margin; the subgradient follows the same tie rules as
    ``margin`` (lowest-index competitor, first-occurrence spatial argmax)."""
    arr = logits.array
    i = spec.class_index
    if spec.mode == SINGLE_LABEL:
        if arr.ndim != 1 or arr.shape[0] < 2:
            raise PerturbError(f"single-label margin needs a logits vector, got {arr.shape}")
        if i >= arr.shape[0]:
            raise PerturbError(f"class {i} out of range for {arr.shape[0]} logits")
        return tc.sub(tc.pick(logits, i), tc.pick(logits, _competitor(arr, i)))
    if arr.ndim == 1:
        return tc.pick(logits, i)
    if arr.ndim == 2:
        return tc.max_all(logits)
    if arr.ndim == 3:
        return tc.max_all(tc.channel(logits, i))
    raise PerturbError(f"unsupported response shape {arr.shape}")


# ---------------------------------------------------------------------------
# objective

@dataclass
class ObjectiveEval:
    value: float
    margin: float
    graph: tc.CompGraph
    objective_node: Tensor
    input_node: Tensor


def reference_activations(net: Network, x, layer_set: LayerSet) -> dict:
    """Clean-image activations for the perceptual term, frozen as constants."""
    layer_set.validate_against(net.spec)
    _, acts = forward_arrays(net, x, want_activations=True)
    return {o: acts[o] for o in layer_set}


def objective(x_prime, x, net: Network, spec: MarginSpec, cfg: PerturbConfig,
              refs: dict | None = None) -> ObjectiveEval:
    """Build the differentiable objective at ``x_prime``:

        (margin - target)^2
        + percept_weight * sum over the layer set of ||act'(l) - act(l)||^2
        + pixel_weight * ||x' - x||^2

    Returns the scalar value together with the graph for ``backward``.
    """
    xa = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    xpa = x_prime.array if isinstance(x_prime, Tensor) else np.asarray(x_prime, dtype=np.float64)
    if xa.shape != xpa.shape:
        raise PerturbError(f"x' shape {xpa.shape} does not match x shape {xa.shape}")
    if cfg.perceptual_active and refs is None:
        refs = reference_activations(net, xa, cfg.layer_set)
    fp = forward_full(net, xpa, wrt="input")
    m_node = _margin_node(fp.logits, spec)
    d = tc.sub(m_node, cfg.target_margin)
    total = tc.mul(d, d)
    if cfg.perceptual_active:
        cfg.layer_set.validate_against(net.spec)
        psum = None
        for ordinal in cfg.layer_set:
            diff = tc.sub(fp.activations[ordinal], Tensor._wrap(refs[ordinal]))
            term = tc.tsum(tc.mul(diff, diff))
            psum = term if psum is None else tc.add(psum, term)
        total = tc.add(total, tc.mul(psum, cfg.percept_weight))
    if cfg.pixel_weight != 0.0:
        pdiff = tc.sub(fp.input, Tensor._wrap(xa))
        total = tc.add(total, tc.mul(tc.tsum(tc.mul(pdiff, pdiff)), cfg.pixel_weight))
    return ObjectiveEval(value=total.item(), margin=m_node.item(), graph=fp.graph,
                         objective_node=total, input_node=fp.input)


def _objective_value(xpa: np.ndarray, xa: np.ndarray, net: Network,
                     spec: MarginSpec, cfg: PerturbConfig, refs: dict | None):
    """Value-only evaluation used by the line search (no tape)."""
    if cfg.perceptual_active:
        logits, acts = forward_arrays(net, xpa, want_activations=True)
    else:
        logits = forward_arrays(net, xpa)
    m = margin(logits, spec)
    d = m - cfg.target_margin
    val = d * d
    if cfg.perceptual_active:
        psum = None
        for ordinal in cfg.layer_set:
            term = float(np.sum((acts[ordinal] - refs[ordinal]) ** 2))
            psum = term if psum is None else psum + term
        val = val + cfg.percept_weight * psum
    if cfg.pixel_weight != 0.0:
        val = val + cfg.pixel_weight * float(np.sum((xpa - xa) ** 2))
    return val, m


MAX_HALVINGS = 20


def find_perturbation(x, net: Network, spec: MarginSpec, cfg: PerturbConfig,
                      check_classification: bool = True) -> PerturbResult:
    """Steepest descent on the objective, starting at the clean image.

    Each iteration takes the gradient step with a backtracking line search:
    halve the step until the objective strictly decreases, at most
    ``MAX_HALVINGS`` halvings.  The first search starts at ``cfg.step_size``;
    later searches warm-start at twice the previously accepted step, which
    adapts to the local curvature (a heavily weighted perceptual term makes
    usable steps many orders of magnitude smaller than any fixed default).
    The recorded objective trajectory is therefore non-increasing.  Stops when
    (margin - target)^2 < stop_tol, on ``max_iters``, or when no decreasing
    step exists.  Deterministic given its inputs.
    """
    xa = np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64)
    refs = reference_activations(net, xa, cfg.layer_set) if cfg.perceptual_active else None
    val, m = _objective_value(xa, xa, net, spec, cfg, refs)
    if check_classification and not m > 0:
        raise PerturbError(
            f"class {spec.class_index} is not assigned to the start image "
            f"(margin {m:.4g}); pass check_classification=False to override"
        )
    trajectory: list[float] = []
    cur = xa.copy()
    cur_val, cur_margin = val, m

    def reached(margin_value: float) -> bool:
        gap = margin_value - cfg.target_margin
        return gap * gap < cfg.stop_tol

    converged = reached(cur_margin)
    search_start = cfg.step_size
    while not converged and len(trajectory) < cfg.max_iters:
        ev = objective(cur, xa, net, spec, cfg, refs=refs)
        grads = ev.graph.backward(ev.objective_node)
        grad = grads[ev.input_node.node_id].array
        step = search_start
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = cur - step * grad
            cand_val, cand_margin = _objective_value(cand, xa, net, spec, cfg, refs)
            if not math.isfinite(cand_val):
                raise NonFiniteObjective(len(trajectory), cand_val)
            if cand_val < cur_val:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        search_start = 2.0 * step
        cur, cur_val, cur_margin = cand, cand_val, cand_margin
        trajectory.append(cur_val)
        converged = reached(cur_margin)

    x_out = np.clip(cur, 0.0, 1.0) if cfg.clamp_result else cur
    final_margin = cur_margin
    if cfg.clamp_result:
        final_margin = margin(forward_arrays(net, x_out), spec)
    return PerturbResult(
        x_prime=Tensor._wrap(x_out),
        final_margin=final_margin,
        final_objective=cur_val,
        iterations_used=len(trajectory),
        objective_trajectory=trajectory,
        converged=converged,
    )
