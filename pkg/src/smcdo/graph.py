"""Model representation, backbone/branch split, and the three executors.

A model is an ordered list of layer specs plus a shared weight store keyed by
layer index. Executors:

  run_vanilla    - single pass, dropout sites inactive
  run_mcdo       - M independent stochastic passes, averaged
  run_branched   - deterministic prefix computed once and cached, then all M
                   stochastic suffix replicas in one batched pass

The branched executor replicates the cached backbone state M times along the
batch axis, and every dropout site applies the branch-specific mask to its
replica's rows, so its output matches run_mcdo to within accumulation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .stochastic import (
    DropoutSpec,
    MaskSeed,
    apply_element_dropout,
    fused_dropout_conv,
    sample_spatial_mask,
)

# layer kinds understood by the executors
KIND_CONV = "conv"
KIND_BATCHNORM = "batchnorm"
KIND_RELU = "relu"
KIND_MAXPOOL = "maxpool"
KIND_GLOBAL_AVGPOOL = "global_avgpool"
KIND_DENSE = "dense"
KIND_SOFTMAX = "softmax"
KIND_RESIDUAL_BEGIN = "residual_begin"
KIND_RESIDUAL_END = "residual_end"
KIND_DROPOUT_SITE = "dropout_site"
KIND_UPSAMPLE = "upsample"

PARAM_KINDS = (KIND_CONV, KIND_BATCHNORM, KIND_DENSE)


@dataclass(frozen=True)
class LayerSpec:
    """One layer in execution order; geometry only, parameters live elsewhere."""

    kind: str
    window: int | None = None
    stride: int | None = None
    factor: int | None = None


@dataclass
class ModelGraph:
    """Ordered layers, shared weight store, and the model's dropout contract."""

    layers: list[LayerSpec]
    weights: dict[int, object]
    dropout_spec: DropoutSpec
    first_stochastic_index: int | None = None

    def __post_init__(self):
        validate_graph(self)

    def dropout_sites(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == KIND_DROPOUT_SITE]


def validate_graph(graph: ModelGraph) -> None:
    sites = graph.dropout_sites()
    first = sites[0] if sites else None
    if graph.first_stochastic_index is None:
        graph.first_stochastic_index = first
    if graph.first_stochastic_index != first:
        raise ValueError(
            f"first_stochastic_index {graph.first_stochastic_index} does not match "
            f"earliest dropout site {first}"
        )
    depth = 0
    for i, layer in enumerate(graph.layers):
        if layer.kind == KIND_DROPOUT_SITE:
            if i + 1 >= len(graph.layers) or graph.layers[i + 1].kind != KIND_CONV:
                raise ValueError(f"dropout site at layer {i} must immediately precede a conv")
        elif layer.kind == KIND_RESIDUAL_BEGIN:
            depth += 1
        elif layer.kind == KIND_RESIDUAL_END:
            depth -= 1
            if depth < 0:
                raise ValueError(f"residual_end at layer {i} without matching begin")
        if layer.kind in PARAM_KINDS and i not in graph.weights:
            raise ValueError(f"layer {i} ({layer.kind}) has no parameters in the store")
    if depth != 0:
        raise ValueError("unbalanced residual begin/end markers")


@dataclass
class BranchedModel:
    """Deterministic backbone plus M weight-sharing stochastic branch replicas."""

    backbone: list[LayerSpec]
    branch_template: list[LayerSpec]
    num_branches: int
    weights: dict[int, object]
    dropout_spec: DropoutSpec

    def __post_init__(self):
        if self.num_branches < 1:
            raise ValueError("num_branches must be >= 1")
        if any(l.kind == KIND_DROPOUT_SITE for l in self.backbone):
            raise ValueError("backbone must not contain dropout sites")


@dataclass
class EnsembleOutput:
    """Per-sample probabilities and their aggregate statistics."""

    per_sample_probs: list[np.ndarray]
    mean_probs: np.ndarray
    predictive_entropy: np.ndarray
    per_class_variance: np.ndarray


class ExecutionCounter:
    """Counts per-replica layer applications, keyed by global layer index.

    A batched branch pass carrying M replicas counts M per branch layer;
    the backbone always counts 1 per layer regardless of M.
    """

    def __init__(self):
        self.per_layer: dict[int, int] = {}

    def add(self, layer_index: int, n: int) -> None:
        self.per_layer[layer_index] = self.per_layer.get(layer_index, 0) + n

    def total(self) -> int:
        return sum(self.per_layer.values())

    def total_for(self, indices) -> int:
        return sum(self.per_layer.get(i, 0) for i in indices)


def split_at(graph: ModelGraph, num_branches: int) -> BranchedModel:
    """Split at the first dropout site; backbone + branch re-concatenates to the graph."""
    if graph.first_stochastic_index is None:
        raise ValueError("split_at: graph has no dropout site")
    idx = graph.first_stochastic_index
    return BranchedModel(
        backbone=list(graph.layers[:idx]),
        branch_template=list(graph.layers[idx:]),
        num_branches=num_branches,
        weights=graph.weights,
        dropout_spec=graph.dropout_spec,
    )


def merge_branched(branched: BranchedModel) -> ModelGraph:
    """Reassemble the source graph from a branched model (round-trip check)."""
    return ModelGraph(
        layers=list(branched.backbone) + list(branched.branch_template),
        weights=branched.weights,
        dropout_spec=branched.dropout_spec,
    )


@dataclass
class _SitePolicy:
    """How dropout sites behave during one walk."""

    spec: DropoutSpec
    seed: int
    branch_ids: tuple[int, ...]
    fused: bool = False


def _wrap_layer_error(idx: int, layer: LayerSpec, err: Exception):
    raise ShapeError(f"layer {idx} ({layer.kind}): {err}") from err


def _walk(layers, weights, x, base_index, stack, policy, counter, replicas):
    """Run a span of layers in inference mode. Returns (activation, stack).

    ``replicas`` is the per-replica execution weight recorded into the
    counter; the batched branch pass passes M, everything else 1.
    """
    i = 0
    while i < len(layers):
        layer = layers[i]
        gidx = base_index + i
        if counter is not None:
            counter.add(gidx, replicas)
        try:
            if layer.kind == KIND_DROPOUT_SITE:
                if policy is None:
                    i += 1
                    continue
                x, consumed = _apply_site(layers, weights, x, base_index, i, policy, counter,
                                          replicas)
                i += 1 + consumed
                continue
            if layer.kind == KIND_CONV:
                x = ops.conv2d(x, weights[gidx])
            elif layer.kind == KIND_BATCHNORM:
                x = ops.batchnorm_inference(x, weights[gidx])
            elif layer.kind == KIND_RELU:
                x = ops.relu(x)
            elif layer.kind == KIND_MAXPOOL:
                x = ops.maxpool2d(x, layer.window, layer.stride)
            elif layer.kind == KIND_GLOBAL_AVGPOOL:
                x = ops.global_avgpool(x)
            elif layer.kind == KIND_DENSE:
                x = ops.dense(x, weights[gidx])
            elif layer.kind == KIND_SOFTMAX:
                x = ops.softmax(x)
            elif layer.kind == KIND_RESIDUAL_BEGIN:
                stack.append(x)
            elif layer.kind == KIND_RESIDUAL_END:
                x = ops.residual_add(stack.pop(), x)
            elif layer.kind == KIND_UPSAMPLE:
                x = ops.upsample_nearest(x, layer.factor)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        except (ShapeError, KeyError) as err:
            _wrap_layer_error(gidx, layer, err)
        i += 1
    return x, stack


def _apply_site(layers, weights, x, base_index, i, policy, counter, replicas):
    """Apply one dropout site, optionally fusing with the following conv.

    Returns (activation, consumed) where consumed is 1 when the next conv
    layer was folded into a fused dropout-convolution.
    """
    gidx = base_index + i
    rate = policy.spec.rate_inf
    groups = len(policy.branch_ids)
    if x.shape[0] % groups:
        raise ShapeError(
            f"batch axis {x.shape[0]} is not divisible into {groups} branch replicas"
        )
    per = x.shape[0] // groups
    channels = x.shape[1]

    if policy.spec.mode == "element":
        parts = []
        for r, branch in enumerate(policy.branch_ids):
            sl = x[r * per : (r + 1) * per]
            parts.append(apply_element_dropout(sl, rate, MaskSeed(policy.seed, branch, gidx)))
        return np.concatenate(parts, axis=0), 0

    masks = [sample_spatial_mask(channels, rate, MaskSeed(policy.seed, b, gidx))
             for b in policy.branch_ids]
    if not policy.fused:
        scale = 1.0 / (1.0 - rate)
        factors = np.zeros((x.shape[0], channels))
        for r, m in enumerate(masks):
            factors[r * per : (r + 1) * per] = np.where(m.kept, scale, 0.0)
        return x * factors[:, :, None, None], 0

    conv_idx = gidx + 1
    conv_layer = layers[i + 1]
    if conv_layer.kind != KIND_CONV:
        raise ValueError(f"dropout site at layer {gidx} not followed by conv")
    if counter is not None:
        counter.add(conv_idx, replicas)
    params = weights[conv_idx]
    parts = []
    for r, m in enumerate(masks):
        sl = x[r * per : (r + 1) * per]
        parts.append(fused_dropout_conv(sl, params, m, rate))
    return np.concatenate(parts, axis=0), 1


def run_vanilla(graph: ModelGraph, x: np.ndarray,
                counter: ExecutionCounter | None = None) -> np.ndarray:
    """Single deterministic pass; all dropout sites are identity."""
    out, stack = _walk(graph.layers, graph.weights, ops.check_nchw(x), 0, [], None,
                       counter, 1)
    if stack:
        raise ShapeError("dangling residual state after forward pass")
    return out


def run_mcdo(graph: ModelGraph, x: np.ndarray, num_samples: int, seed: int,
             fused: bool = False,
             counter: ExecutionCounter | None = None) -> EnsembleOutput:
    """M independent stochastic passes; branch i draws masks from (seed, i, layer)."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if fused and graph.dropout_spec.mode != "spatial":
        raise ValueError("fused execution requires spatial dropout")
    x = ops.check_nchw(x)
    per_sample = []
    for i in range(num_samples):
        policy = _SitePolicy(graph.dropout_spec, seed, (i,), fused)
        probs, _ = _walk(graph.layers, graph.weights, x, 0, [], policy, counter, 1)
        per_sample.append(probs)
    mean, entropy, variance = aggregate(per_sample)
    return EnsembleOutput(per_sample, mean, entropy, variance)


def run_branched(branched: BranchedModel, x: np.ndarray, seed: int,
                 fused: bool = False,
                 counter: ExecutionCounter | None = None) -> EnsembleOutput:
    """Backbone once, cached; all branches in one batched stochastic pass."""
    if fused and branched.dropout_spec.mode != "spatial":
        raise ValueError("fused execution requires spatial dropout")
    x = ops.check_nchw(x)
    n = x.shape[0]
    m = branched.num_branches
    act, stack = _walk(branched.backbone, branched.weights, x, 0, [], None, counter, 1)
    # replicate the cached state (activation and any open residual skips)
    act = np.concatenate([act] * m, axis=0)
    stack = [np.concatenate([s] * m, axis=0) for s in stack]
    policy = _SitePolicy(branched.dropout_spec, seed, tuple(range(m)), fused)
    out, stack = _walk(branched.branch_template, branched.weights, act,
                       len(branched.backbone), stack, policy, counter, m)
    if stack:
        raise ShapeError("dangling residual state after forward pass")
    per_sample = [out[i * n : (i + 1) * n] for i in range(m)]
    mean, entropy, variance = aggregate(per_sample)
    return EnsembleOutput(per_sample, mean, entropy, variance)


def run_deep_ensemble(graphs: list[ModelGraph], x: np.ndarray,
                      counter: ExecutionCounter | None = None) -> EnsembleOutput:
    """Mean over independently trained members; architecture must match."""
    if not graphs:
        raise ValueError("deep ensemble requires at least one member")
    arch = graphs[0].layers
    for k, g in enumerate(graphs[1:], start=1):
        if g.layers != arch:
            raise ValueError(f"ensemble member {k} architecture differs from member 0")
    per_sample = [run_vanilla(g, x, counter) for g in graphs]
    mean, entropy, variance = aggregate(per_sample)
    return EnsembleOutput(per_sample, mean, entropy, variance)


def aggregate(per_sample_probs: list[np.ndarray]):
    """Mean probs, predictive entropy of the mean, per-class sample variance."""
    if not per_sample_probs:
        raise ValueError("aggregate: need at least one probability tensor")
    shape = per_sample_probs[0].shape
    for p in per_sample_probs:
        if p.shape != shape:
            raise ShapeError(f"aggregate: shape mismatch {p.shape} vs {shape}")
    stacked = np.stack(per_sample_probs, axis=0)
    mean = stacked.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(mean > 0, mean * np.log(mean), 0.0)
    entropy = -plogp.sum(axis=1)
    if len(per_sample_probs) >= 2:
        variance = stacked.var(axis=0, ddof=1)
    else:
        variance = np.zeros_like(mean)
    return mean, entropy, variance
