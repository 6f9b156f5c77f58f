"""Discrete hidden Markov baseline: sampling, exact likelihood, Baum-Welch.

Serves as the synthetic data generator and as an exactness oracle for the
sequence models.  States emit each observed variable independently
(per-state product of categoricals).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dynamic import BottomNetwork, DspnModel, TemplateNetwork, TopNetwork
from .graph import GraphBuilder

PROB_TOL = 1e-12


@dataclass
class DiscreteHmm:
    initial: np.ndarray      # (n_states,)
    transition: np.ndarray   # (n_states, n_states), rows sum to 1
    emissions: np.ndarray    # (n_states, n_vars, max_arity); rows sum to 1
    arities: tuple[int, ...]

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        self.emissions = np.asarray(self.emissions, dtype=float)
        self.arities = tuple(int(a) for a in self.arities)
        s = self.n_states
        if self.transition.shape != (s, s):
            raise ValueError("transition matrix shape mismatch")
        if self.emissions.shape[:2] != (s, len(self.arities)):
            raise ValueError("emission tensor shape mismatch")
        self._check_stochastic()

    def _check_stochastic(self):
        if (self.initial < 0).any() or abs(self.initial.sum() - 1) > PROB_TOL:
            raise ValueError("initial distribution is not stochastic")
        if (self.transition < 0).any() or \
                np.abs(self.transition.sum(axis=1) - 1).max() > PROB_TOL:
            raise ValueError("transition matrix is not row-stochastic")
        for v, a in enumerate(self.arities):
            em = self.emissions[:, v, :a]
            if (em < 0).any() or np.abs(em.sum(axis=1) - 1).max() > PROB_TOL:
                raise ValueError(f"emission rows for variable {v} are not stochastic")

    @property
    def n_states(self) -> int:
        return len(self.initial)

    @property
    def n_vars(self) -> int:
        return len(self.arities)

    def stationary_distribution(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transition.T)
        idx = int(np.argmin(np.abs(vals - 1.0)))
        pi = np.real(vecs[:, idx])
        pi = np.abs(pi)
        return pi / pi.sum()

    def to_dict(self) -> dict:
        return {"initial": self.initial.tolist(),
                "transition": self.transition.tolist(),
                "emissions": self.emissions.tolist(),
                "arities": list(self.arities)}

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscreteHmm":
        return cls(np.asarray(doc["initial"]), np.asarray(doc["transition"]),
                   np.asarray(doc["emissions"]), tuple(doc["arities"]))


def random_hmm(n_states: int, arities, rng: np.random.Generator,
               concentration: float = 1.0,
               stationary_initial: bool = True) -> DiscreteHmm:
    """Dirichlet-row generator.  By default the initial distribution is the
    transition matrix's stationary distribution, which makes the generated
    process time-homogeneous from the first slice on."""
    arities = tuple(arities)
    trans = rng.dirichlet(np.full(n_states, concentration), size=n_states)
    max_a = max(arities)
    emis = np.zeros((n_states, len(arities), max_a))
    for v, a in enumerate(arities):
        emis[:, v, :a] = rng.dirichlet(np.full(a, concentration), size=n_states)
    placeholder = np.full(n_states, 1.0 / n_states)
    h = DiscreteHmm(placeholder, trans, emis, arities)
    if stationary_initial:
        h = DiscreteHmm(h.stationary_distribution(), trans, emis, arities)
    return h


def hmm_sample(h: DiscreteHmm, T: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral draw of a (T, n_vars) observation sequence."""
    out = np.empty((T, h.n_vars), dtype=np.int64)
    state = int(rng.choice(h.n_states, p=h.initial))
    for t in range(T):
        if t > 0:
            state = int(rng.choice(h.n_states, p=h.transition[state]))
        for v, a in enumerate(h.arities):
            out[t, v] = int(rng.choice(a, p=h.emissions[state, v, :a]))
    return out


def hmm_dataset(h: DiscreteHmm, count: int, length: int,
                rng: np.random.Generator) -> list[np.ndarray]:
    return [hmm_sample(h, length, rng) for _ in range(count)]


def _log_emission(h: DiscreteHmm, obs: np.ndarray) -> np.ndarray:
    """(n_states,) log-probability of one slice, marginalizing -1 entries."""
    with np.errstate(divide="ignore"):
        log_e = np.zeros(h.n_states)
        for v in range(h.n_vars):
            if obs[v] >= 0:
                log_e += np.log(h.emissions[:, v, obs[v]])
    return log_e


def hmm_loglik(h: DiscreteHmm, seq) -> float:
    """Exact sequence log-likelihood by the forward recursion in log space."""
    seq = np.asarray(seq, dtype=np.int64)
    with np.errstate(divide="ignore"):
        log_init = np.log(h.initial)
        log_trans = np.log(h.transition)
    alpha = log_init + _log_emission(h, seq[0])
    for t in range(1, len(seq)):
        alpha = logsumexp(alpha[:, None] + log_trans, axis=0) + _log_emission(h, seq[t])
    return float(logsumexp(alpha))


def hmm_dataset_loglik(h: DiscreteHmm, sequences) -> np.ndarray:
    return np.array([hmm_loglik(h, s) for s in sequences])


def _batched_log_emission(h: DiscreteHmm, block: np.ndarray) -> np.ndarray:
    """(B, T, n_states) slice log-probabilities for a (B, T, n_vars) block."""
    B, T, _ = block.shape
    with np.errstate(divide="ignore"):
        log_emit = np.log(h.emissions)  # (S, n_vars, max_a)
    out = np.zeros((B, T, h.n_states))
    for v in range(h.n_vars):
        obs = block[:, :, v]
        vals = log_emit[:, v, np.where(obs >= 0, obs, 0)]  # (S, B, T)
        vals = np.where(obs[None, :, :] >= 0, vals, 0.0)
        out += np.moveaxis(vals, 0, 2)
    return out


def baum_welch(sequences, n_states: int, arities, iterations: int = 100,
               alpha: float = 0.0, tol: float = 1e-7,
               seed: int = 0) -> tuple[DiscreteHmm, list[float]]:
    """EM for the discrete HMM with additive smoothing.  Returns the fitted
    model and the per-iteration train log-likelihood trace (each value is
    computed before the corresponding update).

    Sequences of equal length are processed as one vectorized batch.
    """
    arities = tuple(arities)
    rng = np.random.default_rng(seed)
    max_a = max(arities)
    h = random_hmm(n_states, arities, rng, stationary_initial=False)
    groups: dict[int, np.ndarray] = {}
    by_len: dict[int, list] = {}
    for s in sequences:
        by_len.setdefault(len(s), []).append(np.asarray(s, dtype=np.int64))
    for T, seqs in by_len.items():
        groups[T] = np.stack(seqs)
    trace: list[float] = []
    previous = None
    for _ in range(iterations):
        with np.errstate(divide="ignore"):
            log_init = np.log(h.initial)
            log_trans = np.log(h.transition)
        init_acc = np.zeros(n_states)
        trans_acc = np.zeros((n_states, n_states))
        emit_acc = np.zeros((n_states, len(arities), max_a))
        total_ll = 0.0
        for T, block in sorted(groups.items()):
            B = block.shape[0]
            log_e = _batched_log_emission(h, block)  # (B, T, S)
            fwd = np.empty((T, B, n_states))
            fwd[0] = log_init[None, :] + log_e[:, 0]
            for t in range(1, T):
                fwd[t] = logsumexp(fwd[t - 1][:, :, None] + log_trans[None, :, :],
                                   axis=1) + log_e[:, t]
            bwd = np.zeros((T, B, n_states))
            for t in range(T - 2, -1, -1):
                bwd[t] = logsumexp(log_trans[None, :, :]
                                   + (log_e[:, t + 1] + bwd[t + 1])[:, None, :],
                                   axis=2)
            ll = logsumexp(fwd[-1], axis=1)  # (B,)
            total_ll += float(ll.sum())
            gamma = np.exp(fwd + bwd - ll[None, :, None])  # (T, B, S)
            init_acc += gamma[0].sum(axis=0)
            for t in range(T - 1):
                xi = np.exp(fwd[t][:, :, None] + log_trans[None, :, :]
                            + (log_e[:, t + 1] + bwd[t + 1])[:, None, :]
                            - ll[:, None, None])
                trans_acc += xi.sum(axis=0)
            for v, a in enumerate(arities):
                obs = block[:, :, v].T  # (T, B)
                for c in range(a):
                    emit_acc[:, v, c] += gamma[(obs == c)].sum(axis=0)
        trace.append(total_ll)
        init = init_acc + alpha
        trans = trans_acc + alpha
        emit = emit_acc.copy()
        for v, a in enumerate(arities):
            emit[:, v, :a] += alpha
        init /= init.sum()
        trans /= trans.sum(axis=1, keepdims=True)
        for v, a in enumerate(arities):
            emit[:, v, :a] /= emit[:, v, :a].sum(axis=1, keepdims=True)
        h = DiscreteHmm(init, trans, emit, arities)
        if previous is not None and abs(total_ll - previous) <= tol * abs(previous):
            break
        previous = total_ll
    return h, trace


def hmm_to_model(h: DiscreteHmm, tol: float = 1e-9) -> DspnModel:
    """Exact sequence-model encoding of a stationary-initial HMM with one
    interface slot per state.

    The template root for state s is a product of per-variable emission
    mixtures and a transition mixture over the input slots whose weights are
    the time-reversed kernel; the capping sum carries the stationary
    distribution.  The per-path weights then telescope to initial *
    transitions exactly.  A non-stationary initial distribution cannot be
    folded into weight-normalized tied slices, so it is rejected.
    """
    pi = h.stationary_distribution()
    if np.abs(pi - h.initial).max() > max(tol, 1e-6):
        raise ValueError("exact encoding requires the initial distribution "
                         "to equal the stationary distribution")
    k = h.n_states
    n = h.n_vars

    def emission_sums(b: GraphBuilder, state: int) -> list[int]:
        out = []
        for v, a in enumerate(h.arities):
            inds = [b.indicator(v, c) for c in range(a)]
            out.append(b.sum(inds, h.emissions[state, v, :a]))
        return out

    # reversed kernel: weight of lower-state s_prev inside the mixture of
    # upper-state s is P(s | s_prev) pi(s_prev) / pi(s)
    reversed_kernel = (h.transition * pi[:, None]) / pi[None, :]

    tb = GraphBuilder(n, h.arities, k)
    inputs = [tb.interface_input(s) for s in range(k)]
    troots = []
    for s in range(k):
        mix = tb.sum(inputs, reversed_kernel[:, s])
        troots.append(tb.product(emission_sums(tb, s) + [mix]))
    template = TemplateNetwork(tb.build(troots))

    bb = GraphBuilder(n, h.arities, 0)
    broots = [bb.product(emission_sums(bb, s)) for s in range(k)]
    bottom = BottomNetwork(bb.build(broots))

    ob = GraphBuilder(n, h.arities, k)
    root = ob.sum([ob.interface_input(s) for s in range(k)], pi)
    top = TopNetwork(ob.build([root]))
    return DspnModel(bottom, template, top)
