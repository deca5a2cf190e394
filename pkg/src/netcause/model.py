"""Disentangled graph network for potential-outcome prediction.

The network splits each unit's features into an adjustment part and a
confounder part with an instance-conditioned sigmoid mask, aggregates the
adjustment part over full neighborhoods with attention, aggregates the
confounder part separately over same-treatment and opposite-treatment
neighbors (reusing the adjustment attention logits), learns a mapping from
(own confounder, aggregated adjustment) to the opposite-treatment
aggregate, and predicts outcomes with one regression head per treatment
arm.  Forward evaluation is a pure function of (inputs, parameters);
gradients are computed by the hand-derived reverse pass in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import Graph, ObservationalDataset, TreatmentSubgraphs, treatment_subgraphs
from .errors import ValidationError

NONLINEARITIES = ("elu", "relu", "tanh", "sigmoid")
VARIANTS = ("full", "no_disentangle", "adjustment_only")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 256
    mask_hidden: int = 64
    adjustment_layers: int = 2
    nonlinearity: str = "elu"
    head_hidden: int = 64
    attention_leak: float = 0.2
    tie_cf_weights: bool = True

    def __post_init__(self):
        for name in ("hidden_dim", "mask_hidden", "adjustment_layers", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValidationError(
                f"nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}"
            )
        if not (0.0 < self.attention_leak < 1.0):
            raise ValidationError("attention_leak must lie in (0, 1)")


@dataclass
class MaskParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class AggregatorParams:
    layer_weights: list[np.ndarray]
    attention_weights: list[np.ndarray]
    confounder_weight: np.ndarray
    residual_projection: np.ndarray
    cf_weight: np.ndarray | None = None  # None = tied to confounder_weight


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class HeadParams:
    treated: MlpParams
    control: MlpParams
    classifier: MlpParams
    mapper: MlpParams


class ModelParams(NamedTuple):
    mask: MaskParams
    aggregator: AggregatorParams
    heads: HeadParams


@dataclass(frozen=True)
class DisentangledFeatures:
    x_adjustment: np.ndarray
    x_confounder: np.ndarray
    mask_c: np.ndarray


@dataclass(frozen=True)
class ForwardOutputs:
    e_adjustment: np.ndarray
    e_confounder: np.ndarray
    e_counterfactual: np.ndarray
    has_opp: np.ndarray
    e_cf_mapped: np.ndarray
    h_factual: np.ndarray
    h_counterfactual: np.ndarray
    y_factual: np.ndarray
    y_counterfactual: np.ndarray
    t_prob: np.ndarray


# ---------------------------------------------------------------------------
# Initialization and parameter bookkeeping


def _uniform(rng, fan_in, shape):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def _init_mlp(rng, d_in, d_hidden, d_out) -> MlpParams:
    w1 = _uniform(rng, d_in, (d_in, d_hidden))
    b1 = np.zeros(d_hidden)
    if d_out == 1:
        w2 = _uniform(rng, d_hidden, (d_hidden,))
        b2 = np.zeros(1)
    else:
        w2 = _uniform(rng, d_hidden, (d_hidden, d_out))
        b2 = np.zeros(d_out)
    return MlpParams(w1=w1, b1=b1, w2=w2, b2=b2)


def init_params(config: ModelConfig, num_features: int, seed: int) -> ModelParams:
    """Draw all parameters from symmetric uniform ranges scaled by 1/sqrt(fan_in)."""
    if num_features < 1:
        raise ValidationError("num_features must be >= 1")
    rng = np.random.default_rng(seed)
    k, d, dm, dh = num_features, config.hidden_dim, config.mask_hidden, config.head_hidden

    mask = MaskParams(
        w1=_uniform(rng, k, (k, dm)),
        b1=np.zeros(dm),
        w2=_uniform(rng, dm, (dm, k)),
        b2=np.zeros(k),
    )

    layer_weights, attention_weights = [], []
    d_in = k
    for _ in range(config.adjustment_layers):
        layer_weights.append(_uniform(rng, d_in, (d_in, d)))
        attention_weights.append(_uniform(rng, 2 * d, (2 * d,)))
        d_in = d
    aggregator = AggregatorParams(
        layer_weights=layer_weights,
        attention_weights=attention_weights,
        confounder_weight=_uniform(rng, k, (k, d)),
        residual_projection=_uniform(rng, k, (k, d)),
        cf_weight=None if config.tie_cf_weights else _uniform(rng, k, (k, d)),
    )

    heads = HeadParams(
        treated=_init_mlp(rng, d, dh, 1),
        control=_init_mlp(rng, d, dh, 1),
        classifier=_init_mlp(rng, d, dh, 1),
        mapper=_init_mlp(rng, k + d, dh, d),
    )
    return ModelParams(mask=mask, aggregator=aggregator, heads=heads)


def named_parameters(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Stable (name, array) listing; the order defines checkpoint layout."""
    out = [
        ("mask.w1", params.mask.w1),
        ("mask.b1", params.mask.b1),
        ("mask.w2", params.mask.w2),
        ("mask.b2", params.mask.b2),
    ]
    for l, (w, a) in enumerate(
        zip(params.aggregator.layer_weights, params.aggregator.attention_weights)
    ):
        out.append((f"adjustment.{l}.weight", w))
        out.append((f"adjustment.{l}.attention", a))
    out.append(("confounder.weight", params.aggregator.confounder_weight))
    if params.aggregator.cf_weight is not None:
        out.append(("confounder.cf_weight", params.aggregator.cf_weight))
    out.append(("residual.projection", params.aggregator.residual_projection))
    for prefix, mlp in (
        ("head_treated", params.heads.treated),
        ("head_control", params.heads.control),
        ("classifier", params.heads.classifier),
        ("mapper", params.heads.mapper),
    ):
        out.extend(
            [
                (f"{prefix}.w1", mlp.w1),
                (f"{prefix}.b1", mlp.b1),
                (f"{prefix}.w2", mlp.w2),
                (f"{prefix}.b2", mlp.b2),
            ]
        )
    return out


def zero_gradients(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in named_parameters(params)}


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("b1", "b2")


# ---------------------------------------------------------------------------
# Neighborhood indexing (self-first CSR over neighborhoods)


class GraphIndex:
    """Flattened neighborhoods: slots for node i are [i] + sorted neighbors."""

    def __init__(self, graph: Graph):
        n = graph.num_nodes
        counts = np.array([1 + graph.degree(i) for i in range(n)], dtype=np.int64)
        self.ptr = np.concatenate([[0], np.cumsum(counts)])
        self.rows = np.repeat(np.arange(n, dtype=np.int64), counts)
        cols = np.empty(self.ptr[-1], dtype=np.int64)
        for i in range(n):
            s = self.ptr[i]
            cols[s] = i
            cols[s + 1 : self.ptr[i + 1]] = graph.neighbor_lists[i]
        self.cols = cols
        self.num_nodes = n
        # column-sorted view for fast scatter-add in the reverse pass
        self.col_order = np.argsort(cols, kind="stable")
        sorted_cols = cols[self.col_order]
        col_counts = np.bincount(sorted_cols, minlength=n)
        self.col_ptr = np.concatenate([[0], np.cumsum(col_counts)])[:-1]

    def scatter_to_cols(self, slot_values: np.ndarray) -> np.ndarray:
        """Sum per-slot rows of a (slots, d) array into their column nodes."""
        ordered = slot_values[self.col_order]
        return np.add.reduceat(ordered, self.col_ptr, axis=0)


class RestrictedIndex:
    """Slot subsets of a GraphIndex for treatment-restricted aggregation."""

    def __init__(self, index: GraphIndex, treatments: np.ndarray):
        t = np.asarray(treatments, dtype=np.int64).reshape(-1)
        same_mask = t[index.cols] == t[index.rows]  # self slots always qualify
        self.same_slots = np.flatnonzero(same_mask)
        same_counts = np.bincount(index.rows[self.same_slots], minlength=index.num_nodes)
        self.same_ptr = np.concatenate([[0], np.cumsum(same_counts)])

        opp_slots = np.flatnonzero(~same_mask)
        opp_counts = np.bincount(index.rows[opp_slots], minlength=index.num_nodes)
        self.has_opp = opp_counts > 0
        self.opp_nodes = np.flatnonzero(self.has_opp)
        self.opp_slots = opp_slots
        self.opp_ptr = np.concatenate([[0], np.cumsum(opp_counts[self.opp_nodes])])

        for name, slots in (("same", self.same_slots), ("opp", self.opp_slots)):
            cols = index.cols[slots]
            order = np.argsort(cols, kind="stable")
            counts = np.bincount(cols[order], minlength=index.num_nodes)
            keep = np.flatnonzero(counts)
            ptr = np.concatenate([[0], np.cumsum(counts)])[:-1][keep]
            setattr(self, f"_{name}_col_order", order)
            setattr(self, f"_{name}_col_ptr", ptr)
            setattr(self, f"_{name}_col_nodes", keep)

    def scatter_same_to_cols(self, slot_values, out):
        ordered = slot_values[self._same_col_order]
        out[self._same_col_nodes] += np.add.reduceat(ordered, self._same_col_ptr, axis=0)

    def scatter_opp_to_cols(self, slot_values, out):
        ordered = slot_values[self._opp_col_order]
        out[self._opp_col_nodes] += np.add.reduceat(ordered, self._opp_col_ptr, axis=0)


def _segment_softmax(values: np.ndarray, ptr: np.ndarray):
    """Softmax within contiguous non-empty segments delimited by ptr."""
    sizes = np.diff(ptr)
    seg_max = np.maximum.reduceat(values, ptr[:-1])
    z = np.exp(values - np.repeat(seg_max, sizes))
    seg_sum = np.add.reduceat(z, ptr[:-1])
    return z / np.repeat(seg_sum, sizes)


def _segment_softmax_backward(weights, d_weights, ptr):
    sizes = np.diff(ptr)
    dot = np.add.reduceat(weights * d_weights, ptr[:-1])
    return weights * (d_weights - np.repeat(dot, sizes))


def _segment_sum(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, ptr[:-1], axis=0)


# ---------------------------------------------------------------------------
# Nonlinearities


def _phi(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    return 1.0 / (1.0 + np.exp(-x))  # sigmoid


def _phi_prime(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "elu":
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "tanh":
        th = np.tanh(x)
        return 1.0 - th * th
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 - s)


def _leaky(x: np.ndarray, leak: float) -> np.ndarray:
    return np.where(x > 0, x, leak * x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Forward operations


def disentangle(features: np.ndarray, params: MaskParams) -> DisentangledFeatures:
    """Split X into complementary adjustment and confounder parts."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ValidationError(
            f"features shape {x.shape} incompatible with mask input dim {params.w1.shape[0]}"
        )
    pre = x @ params.w1 + params.b1
    hidden = np.maximum(pre, 0.0)
    z = hidden @ params.w2 + params.b2
    mask_c = _sigmoid(z)
    x_c = mask_c * x
    x_a = (1.0 - mask_c) * x
    return DisentangledFeatures(x_adjustment=x_a, x_confounder=x_c, mask_c=mask_c)


@dataclass(frozen=True)
class AttentionScores:
    """Per-slot logits and softmax weights over self-inclusive neighborhoods."""

    index: GraphIndex = field(repr=False)
    logits: np.ndarray
    weights: np.ndarray


def attention_scores(
    transformed: np.ndarray, graph: Graph, att_weights: np.ndarray, leak: float
) -> AttentionScores:
    """Attention over each node's self-inclusive neighborhood.

    ``transformed`` is the linearly transformed adjustment channel of the
    current layer; logits are LeakyReLU of the concatenation score and
    weights are the per-neighborhood softmax.
    """
    index = GraphIndex(graph)
    d = transformed.shape[1]
    left = transformed @ att_weights[:d]
    right = transformed @ att_weights[d:]
    raw = left[index.rows] + right[index.cols]
    logits = _leaky(raw, leak)
    weights = _segment_softmax(logits, index.ptr)
    return AttentionScores(index=index, logits=logits, weights=weights)


def aggregate_adjustment(
    x_adjustment: np.ndarray,
    graph: Graph,
    params: AggregatorParams,
    config: ModelConfig,
):
    """Stacked attention aggregation of the adjustment channel.

    Returns (E_a, cache); the cache keeps each layer's intermediates and the
    final layer's attention logits for reuse by the confounder aggregators.
    """
    index = GraphIndex(graph)
    return _aggregate_adjustment_indexed(x_adjustment, index, params, config)


def _aggregate_adjustment_indexed(x_adjustment, index, params, config):
    h = np.asarray(x_adjustment, dtype=np.float64)
    layers = []
    for w, att in zip(params.layer_weights, params.attention_weights):
        s = h @ w
        d = s.shape[1]
        left = s @ att[:d]
        right = s @ att[d:]
        raw = left[index.rows] + right[index.cols]
        logits = _leaky(raw, config.attention_leak)
        alpha = _segment_softmax(logits, index.ptr)
        agg = _segment_sum(alpha[:, None] * s[index.cols], index.ptr)
        out = _phi(agg, config.nonlinearity)
        layers.append(
            {"h_in": h, "s": s, "raw": raw, "logits": logits, "alpha": alpha,
             "agg": agg, "out": out}
        )
        h = out
    cache = {"index": index, "layers": layers}
    return h, cache


def aggregate_confounder(
    x_confounder: np.ndarray,
    subgraphs: TreatmentSubgraphs,
    final_logits: np.ndarray,
    confounder_weight: np.ndarray,
    config: ModelConfig,
    cf_weight: np.ndarray | None = None,
):
    """Aggregate the confounder channel over treatment-restricted neighborhoods.

    Same-treatment neighborhoods include the node itself; opposite-treatment
    neighborhoods exclude it by definition.  ``final_logits`` are the retained
    pre-softmax attention logits of the last adjustment layer, renormalized
    here over each restricted set.  Rows without opposite-treatment neighbors
    come back as exact zeros with has_opp False.
    """
    n = len(subgraphs.same_neighbors)
    # Rebuild the full neighborhood index the logits are aligned to.
    edges = []
    for i in range(n):
        for j in subgraphs.same_neighbors[i]:
            if i < j:
                edges.append((i, j))
        for j in subgraphs.opp_neighbors[i]:
            if i < j:
                edges.append((i, j))
    graph = Graph.from_edges(n, edges)
    index = GraphIndex(graph)
    if final_logits.shape[0] != index.cols.shape[0]:
        raise ValidationError(
            f"final_logits has {final_logits.shape[0]} slots, expected {index.cols.shape[0]}"
        )
    treatments = np.zeros(n, dtype=np.int64)
    for i in range(n):
        treatments[subgraphs.opp_neighbors[i]] = 1 - treatments[i] if False else treatments[i]
    # Treatment values themselves are not recoverable from subgraphs (only the
    # partition is), so restrict by membership instead.
    restricted = _restricted_from_subgraphs(index, subgraphs)
    e_c, e_cf, _, _ = _confounder_core(
        np.asarray(x_confounder, dtype=np.float64),
        final_logits,
        index,
        restricted,
        confounder_weight,
        cf_weight,
        config,
    )
    return e_c, e_cf, restricted.has_opp


def _restricted_from_subgraphs(index: GraphIndex, subgraphs: TreatmentSubgraphs):
    """Build a RestrictedIndex from an explicit neighbor partition."""
    same_mask = np.zeros(index.cols.shape[0], dtype=bool)
    for i in range(index.num_nodes):
        s, e = index.ptr[i], index.ptr[i + 1]
        cols = index.cols[s:e]
        same_mask[s] = True  # self slot
        member = np.isin(cols[1:], subgraphs.same_neighbors[i], assume_unique=True)
        same_mask[s + 1 : e] = member
    fake = _RestrictedFromMask(index, same_mask)
    return fake


class _RestrictedFromMask(RestrictedIndex):
    def __init__(self, index: GraphIndex, same_mask: np.ndarray):  # noqa: super
        self.same_slots = np.flatnonzero(same_mask)
        same_counts = np.bincount(index.rows[self.same_slots], minlength=index.num_nodes)
        self.same_ptr = np.concatenate([[0], np.cumsum(same_counts)])
        opp_slots = np.flatnonzero(~same_mask)
        opp_counts = np.bincount(index.rows[opp_slots], minlength=index.num_nodes)
        self.has_opp = opp_counts > 0
        self.opp_nodes = np.flatnonzero(self.has_opp)
        self.opp_slots = opp_slots
        self.opp_ptr = np.concatenate([[0], np.cumsum(opp_counts[self.opp_nodes])])
        for name, slots in (("same", self.same_slots), ("opp", self.opp_slots)):
            cols = index.cols[slots]
            order = np.argsort(cols, kind="stable")
            counts = np.bincount(cols[order], minlength=index.num_nodes)
            keep = np.flatnonzero(counts)
            ptr = np.concatenate([[0], np.cumsum(counts)])[:-1][keep]
            setattr(self, f"_{name}_col_order", order)
            setattr(self, f"_{name}_col_ptr", ptr)
            setattr(self, f"_{name}_col_nodes", keep)


def _confounder_core(x_c, final_logits, index, restricted, w_c, w_cf, config):
    c_same = x_c @ w_c
    c_opp = c_same if w_cf is None else x_c @ w_cf

    same_w = _segment_softmax(final_logits[restricted.same_slots], restricted.same_ptr)
    same_cols = index.cols[restricted.same_slots]
    agg_c = _segment_sum(same_w[:, None] * c_same[same_cols], restricted.same_ptr)
    e_c = _phi(agg_c, config.nonlinearity)

    d = c_same.shape[1]
    e_cf = np.zeros((index.num_nodes, d))
    agg_cf = None
    opp_w = None
    if restricted.opp_nodes.size:
        opp_w = _segment_softmax(final_logits[restricted.opp_slots], restricted.opp_ptr)
        opp_cols = index.cols[restricted.opp_slots]
        agg_cf = _segment_sum(opp_w[:, None] * c_opp[opp_cols], restricted.opp_ptr)
        e_cf[restricted.opp_nodes] = _phi(agg_cf, config.nonlinearity)

    cache = {
        "c_same": c_same, "c_opp": c_opp, "same_w": same_w, "agg_c": agg_c,
        "opp_w": opp_w, "agg_cf": agg_cf, "e_c": e_c, "e_cf": e_cf,
    }
    return e_c, e_cf, restricted.has_opp, cache


def map_counterfactual(
    x_confounder: np.ndarray, e_adjustment: np.ndarray, mapper: MlpParams
) -> np.ndarray:
    """Map (own confounder, aggregated adjustment) to a counterfactual
    confounder estimate; defined for every unit."""
    u = np.concatenate([x_confounder, e_adjustment], axis=1)
    hidden = np.maximum(u @ mapper.w1 + mapper.b1, 0.0)
    return hidden @ mapper.w2 + mapper.b2


def _mlp_scalar(h, mlp: MlpParams):
    pre = h @ mlp.w1 + mlp.b1
    act = np.maximum(pre, 0.0)
    return act @ mlp.w2 + mlp.b2[0], pre, act


# ---------------------------------------------------------------------------
# Full forward pass


def forward(
    dataset: ObservationalDataset,
    params: ModelParams,
    config: ModelConfig,
    variant: str = "full",
) -> ForwardOutputs:
    """Run the network on a dataset (full batch, transductive)."""
    outputs, _ = forward_with_cache(
        dataset.features,
        dataset.treatments,
        GraphIndex(dataset.graph),
        None,
        params,
        config,
        variant,
    )
    return outputs


def forward_with_cache(
    features: np.ndarray,
    treatments: np.ndarray,
    index: GraphIndex,
    restricted: RestrictedIndex | None,
    params: ModelParams,
    config: ModelConfig,
    variant: str = "full",
):
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    x = np.asarray(features, dtype=np.float64)
    t = np.asarray(treatments, dtype=np.int64).reshape(-1)
    if restricted is None:
        restricted = RestrictedIndex(index, t)

    if variant == "no_disentangle":
        disent = None
        x_a = x
        x_c = x
        mask_cache = None
    else:
        pre = x @ params.mask.w1 + params.mask.b1
        hidden = np.maximum(pre, 0.0)
        z = hidden @ params.mask.w2 + params.mask.b2
        mask_c = _sigmoid(z)
        x_c = mask_c * x
        x_a = (1.0 - mask_c) * x
        disent = DisentangledFeatures(x_adjustment=x_a, x_confounder=x_c, mask_c=mask_c)
        mask_cache = {"pre": pre, "hidden": hidden, "z": z, "mask_c": mask_c}

    e_a, adj_cache = _aggregate_adjustment_indexed(x_a, index, params.aggregator, config)
    final_logits = adj_cache["layers"][-1]["logits"]

    e_c, e_cf, has_opp, conf_cache = _confounder_core(
        x_c, final_logits, index, restricted,
        params.aggregator.confounder_weight, params.aggregator.cf_weight, config,
    )

    u = np.concatenate([x_c, e_a], axis=1)
    map_pre = u @ params.heads.mapper.w1 + params.heads.mapper.b1
    map_hidden = np.maximum(map_pre, 0.0)
    mapped = map_hidden @ params.heads.mapper.w2 + params.heads.mapper.b2

    if variant == "adjustment_only":
        residual = np.zeros_like(e_a)
        h_f = e_a
        h_cf = e_a
    else:
        residual = x_c @ params.aggregator.residual_projection
        h_f = e_a + e_c + residual
        h_cf = e_a + mapped + residual

    out1_f, pre1_f, act1_f = _mlp_scalar(h_f, params.heads.treated)
    out0_f, pre0_f, act0_f = _mlp_scalar(h_f, params.heads.control)
    out1_cf, pre1_cf, act1_cf = _mlp_scalar(h_cf, params.heads.treated)
    out0_cf, pre0_cf, act0_cf = _mlp_scalar(h_cf, params.heads.control)
    treated_rows = t == 1
    y_f = np.where(treated_rows, out1_f, out0_f)
    y_cf = np.where(treated_rows, out0_cf, out1_cf)

    logit, pre_clf, act_clf = _mlp_scalar(e_c, params.heads.classifier)
    t_prob = _sigmoid(logit)

    outputs = ForwardOutputs(
        e_adjustment=e_a,
        e_confounder=e_c,
        e_counterfactual=e_cf,
        has_opp=has_opp.copy(),
        e_cf_mapped=mapped,
        h_factual=h_f,
        h_counterfactual=h_cf,
        y_factual=y_f,
        y_counterfactual=y_cf,
        t_prob=t_prob,
    )
    cache = {
        "x": x, "t": t, "variant": variant, "index": index, "restricted": restricted,
        "mask": mask_cache, "disent": disent, "x_a": x_a, "x_c": x_c,
        "adj": adj_cache, "conf": conf_cache,
        "mapper": {"u": u, "pre": map_pre, "hidden": map_hidden, "mapped": mapped},
        "residual": residual, "h_f": h_f, "h_cf": h_cf,
        "heads_f": {"pre1": pre1_f, "act1": act1_f, "pre0": pre0_f, "act0": act0_f},
        "clf": {"pre": pre_clf, "act": act_clf, "logit": logit, "prob": t_prob},
        "treated_rows": treated_rows,
    }
    return outputs, cache


def predict_ite(outputs: ForwardOutputs, treatments) -> np.ndarray:
    """Per-unit effect estimate from factual/counterfactual predictions."""
    t = np.asarray(treatments, dtype=np.int64).reshape(-1)
    return np.where(t == 1,
                    outputs.y_factual - outputs.y_counterfactual,
                    outputs.y_counterfactual - outputs.y_factual)


# ---------------------------------------------------------------------------
# Reverse pass


def _mlp_scalar_backward(dout, rows, h, pre, act, mlp, grads, prefix, dh):
    """Backprop a scalar two-layer head on the given rows; accumulates into
    grads[prefix.*] and dh."""
    if rows.size == 0:
        return
    d_out = dout[rows]
    grads[f"{prefix}.w2"] += act[rows].T @ d_out
    grads[f"{prefix}.b2"][0] += d_out.sum()
    d_act = d_out[:, None] * mlp.w2[None, :]
    d_pre = d_act * (pre[rows] > 0)
    grads[f"{prefix}.w1"] += h[rows].T @ d_pre
    grads[f"{prefix}.b1"] += d_pre.sum(axis=0)
    dh[rows] += d_pre @ mlp.w1.T


def backward(
    cache: dict,
    params: ModelParams,
    config: ModelConfig,
    d_y_factual: np.ndarray,
    d_t_logit: np.ndarray,
    d_mapped: np.ndarray | None,
    d_e_cf: np.ndarray | None,
    d_e_adj_extra: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients at the network outputs.

    d_y_factual: grad on factual predictions (counterfactual predictions do
    not feed the objective).  d_t_logit: grad on the classifier logit.
    d_mapped: grad on the mapper output.  d_e_cf: grad on the aggregated
    counterfactual confounder (None under the stop-gradient convention).
    d_e_adj_extra: grad on E_a from the balancing term.
    """
    grads = zero_gradients(params)
    variant = cache["variant"]
    index: GraphIndex = cache["index"]
    restricted: RestrictedIndex = cache["restricted"]
    x_c = cache["x_c"]
    n, d = cache["h_f"].shape

    # Outcome heads (factual routing only).
    dh_f = np.zeros((n, d))
    t_rows = np.flatnonzero(cache["treated_rows"])
    c_rows = np.flatnonzero(~cache["treated_rows"])
    hf = cache["heads_f"]
    _mlp_scalar_backward(d_y_factual, t_rows, cache["h_f"], hf["pre1"], hf["act1"],
                         params.heads.treated, grads, "head_treated", dh_f)
    _mlp_scalar_backward(d_y_factual, c_rows, cache["h_f"], hf["pre0"], hf["act0"],
                         params.heads.control, grads, "head_control", dh_f)

    # Classifier on E_c.
    d_e_c = np.zeros((n, d))
    clf = cache["clf"]
    _mlp_scalar_backward(d_t_logit, np.arange(n), cache["conf"]["e_c"], clf["pre"],
                         clf["act"], params.heads.classifier, grads, "classifier", d_e_c)

    # Mapper.
    d_e_a = np.zeros((n, d))
    d_x_c = np.zeros_like(x_c)
    if d_mapped is not None and np.any(d_mapped):
        m = cache["mapper"]
        mp = params.heads.mapper
        grads["mapper.w2"] += m["hidden"].T @ d_mapped
        grads["mapper.b2"] += d_mapped.sum(axis=0)
        d_hidden = d_mapped @ mp.w2.T
        d_pre = d_hidden * (m["pre"] > 0)
        grads["mapper.w1"] += m["u"].T @ d_pre
        grads["mapper.b1"] += d_pre.sum(axis=0)
        d_u = d_pre @ mp.w1.T
        k = x_c.shape[1]
        d_x_c += d_u[:, :k]
        d_e_a += d_u[:, k:]

    # H composition.
    if variant == "adjustment_only":
        d_e_a += dh_f
    else:
        d_e_a += dh_f
        d_e_c += dh_f
        d_r = dh_f
        grads["residual.projection"] += x_c.T @ d_r
        d_x_c += d_r @ params.aggregator.residual_projection.T

    if d_e_adj_extra is not None:
        d_e_a += d_e_adj_extra

    # Confounder aggregation backward.
    conf = cache["conf"]
    d_logits_extra = np.zeros_like(cache["adj"]["layers"][-1]["logits"])
    d_c_same = np.zeros_like(conf["c_same"])
    if np.any(d_e_c):
        d_agg_c = d_e_c * _phi_prime(conf["agg_c"], config.nonlinearity)
        same_cols = index.cols[restricted.same_slots]
        same_rows = index.rows[restricted.same_slots]
        slot_vals = conf["same_w"][:, None] * d_agg_c[same_rows]
        restricted.scatter_same_to_cols(slot_vals, d_c_same)
        d_w_same = np.sum(d_agg_c[same_rows] * conf["c_same"][same_cols], axis=1)
        d_log_same = _segment_softmax_backward(conf["same_w"], d_w_same, restricted.same_ptr)
        np.add.at(d_logits_extra, restricted.same_slots, d_log_same)

    d_c_opp = None
    if d_e_cf is not None and restricted.opp_nodes.size and np.any(d_e_cf):
        d_e_cf_compact = d_e_cf[restricted.opp_nodes]
        d_agg_cf = d_e_cf_compact * _phi_prime(conf["agg_cf"], config.nonlinearity)
        opp_cols = index.cols[restricted.opp_slots]
        opp_rows = index.rows[restricted.opp_slots]
        # opp_rows within compact numbering for segment ops
        compact_row = np.repeat(np.arange(restricted.opp_nodes.size),
                                np.diff(restricted.opp_ptr))
        d_c_opp = np.zeros_like(conf["c_opp"])
        slot_vals = conf["opp_w"][:, None] * d_agg_cf[compact_row]
        restricted.scatter_opp_to_cols(slot_vals, d_c_opp)
        d_w_opp = np.sum(d_agg_cf[compact_row] * conf["c_opp"][opp_cols], axis=1)
        d_log_opp = _segment_softmax_backward(conf["opp_w"], d_w_opp, restricted.opp_ptr)
        np.add.at(d_logits_extra, restricted.opp_slots, d_log_opp)

    if params.aggregator.cf_weight is None:
        if d_c_opp is not None:
            d_c_same += d_c_opp
        grads["confounder.weight"] += x_c.T @ d_c_same
        d_x_c += d_c_same @ params.aggregator.confounder_weight.T
    else:
        grads["confounder.weight"] += x_c.T @ d_c_same
        d_x_c += d_c_same @ params.aggregator.confounder_weight.T
        if d_c_opp is not None:
            grads["confounder.cf_weight"] += x_c.T @ d_c_opp
            d_x_c += d_c_opp @ params.aggregator.cf_weight.T

    # Adjustment stack backward (inject reused-logit grads at the top layer).
    dh = d_e_a
    layers = cache["adj"]["layers"]
    leak = config.attention_leak
    for l in range(len(layers) - 1, -1, -1):
        lay = layers[l]
        w = params.aggregator.layer_weights[l]
        att = params.aggregator.attention_weights[l]
        dd = lay["s"].shape[1]
        d_agg = dh * _phi_prime(lay["agg"], config.nonlinearity)
        d_s = index.scatter_to_cols(lay["alpha"][:, None] * d_agg[index.rows])
        d_alpha = np.sum(d_agg[index.rows] * lay["s"][index.cols], axis=1)
        d_log = _segment_softmax_backward(lay["alpha"], d_alpha, index.ptr)
        if l == len(layers) - 1:
            d_log = d_log + d_logits_extra
        d_raw = d_log * np.where(lay["raw"] > 0, 1.0, leak)
        d_left = _segment_sum(d_raw, index.ptr)
        d_right = np.bincount(index.cols, weights=d_raw, minlength=n)
        d_s += d_left[:, None] * att[None, :dd] + d_right[:, None] * att[None, dd:]
        grads[f"adjustment.{l}.attention"] += np.concatenate(
            [lay["s"].T @ d_left, lay["s"].T @ d_right]
        )
        grads[f"adjustment.{l}.weight"] += lay["h_in"].T @ d_s
        dh = d_s @ w.T

    d_x_a = dh

    # Mask backward.
    if variant != "no_disentangle":
        mk = cache["mask"]
        x = cache["x"]
        d_mask = (d_x_c - d_x_a) * x
        d_z = d_mask * mk["mask_c"] * (1.0 - mk["mask_c"])
        grads["mask.w2"] += mk["hidden"].T @ d_z
        grads["mask.b2"] += d_z.sum(axis=0)
        d_hidden = d_z @ params.mask.w2.T
        d_pre = d_hidden * (mk["pre"] > 0)
        grads["mask.w1"] += cache["x"].T @ d_pre
        grads["mask.b1"] += d_pre.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints


def _as_matrix(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a


def save_checkpoint(path: str, matrices: list[tuple[str, np.ndarray]]) -> None:
    """Write named matrices as text; %.17g keeps float64 bit-stable."""
    with open(path, "w") as fh:
        fh.write("netcause-checkpoint 1\n")
        fh.write(f"{len(matrices)}\n")
        for name, arr in matrices:
            mat = _as_matrix(arr)
            fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path) as fh:
        magic = fh.readline().split()
        if magic[:1] != ["netcause-checkpoint"]:
            raise ValidationError(f"{path}: not a checkpoint file")
        count = int(fh.readline())
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, rows, cols = fh.readline().split()
            rows, cols = int(rows), int(cols)
            mat = np.empty((rows, cols))
            for r in range(rows):
                mat[r] = np.fromstring(fh.readline(), sep=" ")
            out[name] = mat
    return out


def set_parameters(params: ModelParams, values: dict[str, np.ndarray]) -> None:
    """Overwrite parameter arrays in place from checkpoint matrices."""
    for name, arr in named_parameters(params):
        if name not in values:
            raise ValidationError(f"checkpoint is missing parameter {name!r}")
        mat = values[name]
        if mat.size != arr.size:
            raise ValidationError(
                f"checkpoint parameter {name!r} has {mat.size} values, expected {arr.size}"
            )
        arr[...] = mat.reshape(arr.shape)
