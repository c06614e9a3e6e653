"""Interpretability statistics: neuron activation profiles and routing graphs.

Activation of neuron i at token t is the mean absolute entry of its hidden
vector after the final layer. Connectivity statistics come from the averaged
routing maps: in-degree of neuron j is the j-th column sum (mean in-degree is
exactly 1 because rows are stochastic), hubs receive more than 1.5x the mean,
specialists less than 0.6x, and a soft edge exists where a routing weight
exceeds the uniform value 1/N.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import batchify
from .errors import ContractError
from .graph import AttentionMap, export_attention_map
from .model import InnModel, inn_forward

HUB_FACTOR = 1.5
SPECIALIST_FACTOR = 0.6
SPARSITY_THRESHOLD = 0.1


@dataclass
class ActivationStats:
    mean: np.ndarray        # (N,) mean activation per neuron
    variance: np.ndarray    # (N,) variance of activation per neuron
    sparsity: np.ndarray    # (N,) fraction of tokens with activation < 0.1
    overall_sparsity: float  # fraction over all (neuron, token) pairs


@dataclass
class ConnectivityStats:
    in_degree: np.ndarray           # (N,) column sums of the averaged map
    hubs: list[int]                 # in_degree > 1.5 * mean
    specialists: list[int]          # in_degree < 0.6 * mean
    avg_degree_per_layer: list[float]  # edges with weight > 1/N, per layer / N
    layer_maps: list[np.ndarray]


def neuron_activations(model: InnModel, ids: np.ndarray, batch_size: int,
                       window: int, max_batches: int | None = None
                       ) -> tuple[np.ndarray, list[AttentionMap]]:
    """Per-(neuron, token) activation scalars over a corpus slice, plus the
    routing maps averaged over everything evaluated."""
    batches = batchify(ids, batch_size, window)
    if max_batches is not None:
        batches = batches[:max_batches]
    acts = []
    map_sums: list[np.ndarray] | None = None
    for batch in batches:
        _, maps, hidden = inn_forward(batch.inputs, model, training=False,
                                      return_hidden=True)
        # (b, N, l, d) -> (N, b*l) mean |.| over the feature axis
        a = np.abs(hidden.data).mean(axis=3)
        acts.append(a.transpose(1, 0, 2).reshape(a.shape[1], -1))
        if map_sums is None:
            map_sums = [m.weights.copy() for m in maps]
        else:
            for acc, m in zip(map_sums, maps):
                acc += m.weights
    if not acts:
        raise ContractError("no full batch fits the provided ids")
    averaged = [AttentionMap(s / len(batches)) for s in map_sums]
    return np.concatenate(acts, axis=1), averaged


def activation_stats_from_values(values: np.ndarray,
                                 threshold: float = SPARSITY_THRESHOLD
                                 ) -> ActivationStats:
    """Reduce per-(neuron, token) activations, shape (N, T), to statistics."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    below = values < threshold
    return ActivationStats(
        mean=values.mean(axis=1),
        variance=values.var(axis=1),
        sparsity=below.mean(axis=1),
        overall_sparsity=float(below.mean()),
    )


def activation_stats(model: InnModel, ids: np.ndarray, batch_size: int = 8,
                     window: int = 64, max_batches: int | None = None
                     ) -> ActivationStats:
    values, _ = neuron_activations(model, ids, batch_size, window, max_batches)
    return activation_stats_from_values(values)


def connectivity_stats(maps: list[AttentionMap],
                       edge_threshold: float | None = None) -> ConnectivityStats:
    """Degree statistics over per-layer routing maps.

    Hub/in-degree statistics use the across-layer average map; per-layer soft
    degrees count entries strictly above the uniform weight 1/N (or an
    explicit threshold).
    """
    if not maps:
        raise ContractError("connectivity_stats needs at least one map")
    n = maps[0].n
    for m in maps:
        w = np.asarray(m.weights, dtype=np.float64)
        if w.shape != (n, n):
            raise ContractError(f"map shape {w.shape} inconsistent with N={n}")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-5):
            raise ContractError("attention map rows must sum to 1")
        if (w < -1e-9).any():
            raise ContractError("attention map entries must be non-negative")
    mean_map = np.mean([m.weights for m in maps], axis=0)
    in_degree = mean_map.sum(axis=0)
    mean_deg = in_degree.mean()  # equals 1 for row-stochastic maps
    thr = (1.0 / n) if edge_threshold is None else edge_threshold
    per_layer = [float((np.asarray(m.weights) > thr).sum() / n) for m in maps]
    return ConnectivityStats(
        in_degree=in_degree,
        hubs=[int(i) for i in np.flatnonzero(in_degree > HUB_FACTOR * mean_deg)],
        specialists=[int(i) for i in
                     np.flatnonzero(in_degree < SPECIALIST_FACTOR * mean_deg)],
        avg_degree_per_layer=per_layer,
        layer_maps=[np.asarray(m.weights) for m in maps],
    )


def export_report(act: ActivationStats, conn: ConnectivityStats,
                  out_dir: str) -> None:
    """Write attention matrices (CSV), per-neuron stats (CSV), and a JSON
    summary into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    for i, w in enumerate(conn.layer_maps):
        export_attention_map(AttentionMap(w), os.path.join(out_dir, f"attention_layer{i}.csv"))
    n = len(act.mean)
    with open(os.path.join(out_dir, "neuron_stats.csv"), "w") as fh:
        fh.write("neuron,mean_activation,variance,sparsity,in_degree\n")
        for i in range(n):
            fh.write(f"{i},{act.mean[i]:.9g},{act.variance[i]:.9g},"
                     f"{act.sparsity[i]:.9g},{conn.in_degree[i]:.9g}\n")
    summary = {
        "hubs": conn.hubs,
        "specialists": conn.specialists,
        "avg_degree_per_layer": conn.avg_degree_per_layer,
        "sparsity": act.overall_sparsity,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
