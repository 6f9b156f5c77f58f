"""Exact log-space evaluation and differentiation of sum-product graphs.

Every pass is a single sweep over the cached topological order, so cost is
linear in nodes + edges.  Evidence is vectorized: the kernels operate on a
batch of evidence rows at once, which is what makes training and scoring
whole datasets cheap in Python.

Log 0 is represented by ``-inf``, which is absorbing under addition and
ignored by log-sum-exp; the product-node backward rule is written to keep
that representation NaN-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .graph import InvalidGraph, NodeKind, SpnGraph, check_validity

LOG_ZERO = -np.inf
MARGINALIZED = -1


class ZeroEvidence(ValueError):
    """Conditioning event has probability zero under the model."""


class DisjointnessError(ValueError):
    """Query and conditioning evidence assign the same variable."""


class Evidence:
    """Per-variable assignment: an observed value or marginalized (-1)."""

    def __init__(self, values: np.ndarray, arities: tuple[int, ...] | None = None):
        self.values = np.asarray(values, dtype=np.int64)
        if arities is not None:
            bad = (self.values >= np.asarray(arities)) | (self.values < MARGINALIZED)
            if bad.any():
                v = int(np.argmax(bad))
                raise ValueError(f"evidence value {self.values[v]} out of range for var {v}")

    @classmethod
    def marginalized(cls, n_vars: int) -> "Evidence":
        return cls(np.full(n_vars, MARGINALIZED))

    @classmethod
    def observing(cls, n_vars: int, assignments: dict[int, int]) -> "Evidence":
        vals = np.full(n_vars, MARGINALIZED)
        for v, x in assignments.items():
            vals[v] = x
        return cls(vals)

    def observed_vars(self) -> list[int]:
        return [int(v) for v in np.nonzero(self.values != MARGINALIZED)[0]]

    def merge(self, other: "Evidence") -> "Evidence":
        both = (self.values != MARGINALIZED) & (other.values != MARGINALIZED)
        if both.any():
            raise DisjointnessError(
                f"variables {np.nonzero(both)[0].tolist()} assigned by both evidence sets")
        return Evidence(np.where(self.values != MARGINALIZED, self.values, other.values))


def forward(g: SpnGraph, ev: np.ndarray,
            input_logs: np.ndarray | None = None,
            profile: dict | None = None) -> np.ndarray:
    """Bottom-up pass. ``ev`` is (batch, n_vars) with -1 for marginalized;
    ``input_logs`` is (n_slots, batch).  Returns (n_nodes, batch) log-values."""
    ev = np.atleast_2d(np.asarray(ev, dtype=np.int64))
    batch = ev.shape[0]
    if g.n_interface_inputs and input_logs is None:
        raise ValueError("graph has interface inputs but no input values were given")
    values = np.empty((len(g.nodes), batch))
    visits = 0
    for i in g.topo_order:
        nd = g.nodes[i]
        visits += 1
        if nd.kind == NodeKind.INDICATOR:
            col = ev[:, nd.var]
            values[i] = np.where((col == MARGINALIZED) | (col == nd.value), 0.0, LOG_ZERO)
        elif nd.kind == NodeKind.INPUT:
            values[i] = input_logs[nd.slot]
        elif nd.kind == NodeKind.PRODUCT:
            acc = values[nd.children[0]].copy()
            for c in nd.children[1:]:
                acc += values[c]
            values[i] = acc
        else:  # SUM
            shifted = values[list(nd.children)] + g.log_weights(i)[:, None]
            values[i] = logsumexp(shifted, axis=0)
    if profile is not None:
        profile["visits"] = visits
    return values


def evaluate(g: SpnGraph, evidence: Evidence,
             interface_log_values: dict[int, float] | None = None,
             strict: bool = False) -> np.ndarray:
    """Log-value of every root for one evidence vector."""
    if strict:
        report = check_validity(g)
        if not report.ok:
            raise InvalidGraph(report.summary())
    input_logs = None
    if g.n_interface_inputs:
        interface_log_values = interface_log_values or {}
        input_logs = np.empty((g.n_interface_inputs, 1))
        for s in range(g.n_interface_inputs):
            if s not in interface_log_values:
                raise ValueError(f"no value for interface slot {s}")
            input_logs[s, 0] = interface_log_values[s]
    values = forward(g, evidence.values[None, :], input_logs)
    return values[g.roots, 0]


def evaluate_batch(g: SpnGraph, ev: np.ndarray,
                   input_logs: np.ndarray | None = None) -> np.ndarray:
    """(n_roots, batch) log-values for a batch of evidence rows."""
    values = forward(g, ev, input_logs)
    return values[g.roots]


def log_likelihood(g: SpnGraph, evidence: Evidence) -> float:
    """Root log-value of a single-root, self-contained graph."""
    if len(g.roots) != 1:
        raise ValueError("log_likelihood requires a single-root graph")
    return float(evaluate(g, evidence)[0])


def conditional_query(g: SpnGraph, query: Evidence, given: Evidence) -> float:
    """Pr(query | given) as the ratio of two bottom-up passes."""
    if g.n_interface_inputs:
        raise ValueError("conditional queries require a self-contained graph")
    if len(g.roots) != 1:
        raise ValueError("conditional queries require a single-root graph")
    joint = query.merge(given)  # raises DisjointnessError on overlap
    log_den = float(evaluate(g, given)[0])
    if log_den == LOG_ZERO:
        raise ZeroEvidence("conditioning evidence has probability zero")
    log_num = float(evaluate(g, joint)[0])
    return float(np.exp(log_num - log_den))


def backward(g: SpnGraph, values: np.ndarray,
             root_log_grads: np.ndarray | None = None) -> np.ndarray:
    """Top-down pass computing log d(root value)/d(node value).

    ``root_log_grads`` seeds the roots (shape (n_roots, batch)); by default a
    single root is seeded with log 1 = 0.  Product nodes distribute their
    derivative times the product of the *other* children's values; the
    other-product is recovered from the full product except where -inf
    children force an explicit recount, so no NaN can arise.
    """
    batch = values.shape[1]
    if root_log_grads is None:
        if len(g.roots) != 1:
            raise ValueError("multi-root graphs need explicit root gradients")
        root_log_grads = np.zeros((1, batch))
    derivs = np.full((len(g.nodes), batch), LOG_ZERO)
    for r, seed in zip(g.roots, root_log_grads):
        derivs[r] = np.logaddexp(derivs[r], seed)
    for i in reversed(g.topo_order):
        nd = g.nodes[i]
        if nd.is_leaf():
            continue
        d_i = derivs[i]
        if nd.kind == NodeKind.SUM:
            lw = g.log_weights(i)
            for idx, c in enumerate(nd.children):
                derivs[c] = np.logaddexp(derivs[c], lw[idx] + d_i)
        else:  # PRODUCT
            child_vals = values[list(nd.children)]
            neg = np.isneginf(child_vals)
            n_neg = neg.sum(axis=0)
            finite_total = np.where(neg, 0.0, child_vals).sum(axis=0)
            for idx, c in enumerate(nd.children):
                others_neg = n_neg - neg[idx]
                own = np.where(neg[idx], 0.0, child_vals[idx])
                others = np.where(others_neg == 0, finite_total - own, LOG_ZERO)
                derivs[c] = np.logaddexp(derivs[c], d_i + others)
    return derivs


def sum_edge_statistics(g: SpnGraph, values: np.ndarray, derivs: np.ndarray,
                        log_norm: np.ndarray) -> dict[int, np.ndarray]:
    """Expected edge counts w_ij * d_i * v_j / S summed over the batch.

    These are both the EM sufficient statistics and (divided by w_ij) the
    log-likelihood gradients of the sum weights.
    """
    # Zero-probability batch elements carry no counts; +inf normalizer makes
    # their contributions vanish instead of producing -inf minus -inf.
    safe_norm = np.where(np.isneginf(log_norm), np.inf, log_norm)
    stats: dict[int, np.ndarray] = {}
    for i in g.sum_ids():
        nd = g.nodes[i]
        lw = g.log_weights(i)
        contrib = lw[:, None] + derivs[i][None, :] + values[list(nd.children)] - safe_norm[None, :]
        stats[i] = np.exp(contrib).sum(axis=1)
    return stats


@dataclass
class BackpropResult:
    log_values: np.ndarray            # (n_nodes,) forward log-values
    log_derivs: np.ndarray            # (n_nodes,) log d(root)/d(node)
    edge_stats: dict[int, np.ndarray]  # sum node -> per-child expected counts


def backprop(g: SpnGraph, evidence: Evidence,
             interface_log_values: dict[int, float] | None = None) -> BackpropResult:
    """Forward + backward for one evidence vector on a single-root graph."""
    input_logs = None
    if g.n_interface_inputs:
        interface_log_values = interface_log_values or {}
        input_logs = np.array(
            [[interface_log_values[s]] for s in range(g.n_interface_inputs)])
    values = forward(g, evidence.values[None, :], input_logs)
    derivs = backward(g, values)
    log_norm = values[g.roots[0]]
    stats = sum_edge_statistics(g, values, derivs, log_norm)
    return BackpropResult(values[:, 0], derivs[:, 0], stats)


def weight_gradients(g: SpnGraph, values: np.ndarray,
                     derivs: np.ndarray) -> dict[int, np.ndarray]:
    """Linear-domain d(root value)/d(w_ij) = d_i * v_j per sum edge."""
    grads: dict[int, np.ndarray] = {}
    for i in g.sum_ids():
        nd = g.nodes[i]
        grads[i] = np.exp(derivs[i][None, :] + values[list(nd.children)]).sum(axis=1)
    return grads
