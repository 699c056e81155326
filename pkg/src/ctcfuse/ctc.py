"""CTC loss (log-space forward-backward), decoding, and brute-force oracles.

The loss accepts raw logits and normalizes internally; its gradient is defined
with respect to the logits, which keeps the fused-training gradient path
unambiguous. Decode functions consume only row-normalized log-posterior grids
and never look at decoder-side outputs. All functions are pure.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleTargetError
from .numerics import NEG_INF, log_add, row_log_softmax, row_softmax

LabelSequence = tuple[int, ...]


def collapse(path: LabelSequence | list[int], blank_id: int) -> LabelSequence:
    """Standard CTC collapse: drop consecutive duplicates, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank_id:
            out.append(tok)
        prev = tok
    return tuple(out)


def min_frames(labels: LabelSequence) -> int:
    """Shortest path length that can collapse to ``labels``."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def extended_labels(labels: LabelSequence, blank_id: int) -> np.ndarray:
    """Blank-interleaved state sequence of length 2*len(labels)+1."""
    ext = np.full(2 * len(labels) + 1, blank_id, dtype=np.int64)
    ext[1::2] = labels
    return ext


@dataclass
class CtcLossResult:
    loss: float
    grad_logits: np.ndarray  # (T, V), rows sum to 0


@dataclass
class _ForwardBackward:
    """DP byproducts shared by the plain and fused loss paths."""

    nll: float
    occupancy: np.ndarray  # gamma[t, v]: posterior mass of emitting v at t
    occupancy_over_prob: np.ndarray  # gamma[t, v] / p[t, v], computed stably


def _forward_backward(log_probs: np.ndarray, labels: LabelSequence, blank_id: int) -> _ForwardBackward:
    """Forward-backward over the extended label sequence of a log-prob grid."""
    T, V = log_probs.shape
    labels = tuple(labels)
    if any(t == blank_id for t in labels):
        raise ValueError("labels must not contain the blank token")
    if any(not 0 <= t < V for t in labels):
        raise ValueError("label token out of range")
    if T < min_frames(labels):
        raise InfeasibleTargetError(
            f"{len(labels)} labels need at least {min_frames(labels)} frames, got {T}"
        )
    ext = extended_labels(labels, blank_id)
    S = len(ext)
    # skip transition s-2 -> s allowed into non-blank states that differ from
    # the state two back
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = (ext[2:] != blank_id) & (ext[2:] != ext[:-2])

    emit = log_probs[:, ext]  # (T, S)

    # alpha_pre excludes the emission at t so the fused path can recover
    # gamma / p without dividing by a possibly tiny probability
    alpha_pre = np.full((T, S), NEG_INF)
    alpha = np.full((T, S), NEG_INF)
    alpha_pre[0, 0] = 0.0
    if S > 1:
        alpha_pre[0, 1] = 0.0
    alpha[0] = alpha_pre[0] + emit[0]
    for t in range(1, T):
        prev = alpha[t - 1]
        move = np.empty(S)
        move[0] = prev[0]
        np.logaddexp(prev[1:], prev[:-1], out=move[1:])
        if S > 2:
            skip = np.logaddexp(move[2:], prev[:-2])
            move[2:] = np.where(skip_ok[2:], skip, move[2:])
        alpha_pre[t] = move
        alpha[t] = move + emit[t]

    beta = np.full((T, S), NEG_INF)  # excludes the emission at t
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        move = np.empty(S)
        move[-1] = nxt[-1]
        np.logaddexp(nxt[:-1], nxt[1:], out=move[:-1])
        if S > 2:
            skip = np.logaddexp(move[:-2], nxt[2:])
            move[:-2] = np.where(skip_ok[2:], skip, move[:-2])
        beta[t] = move

    if S > 1:
        log_p = log_add(float(alpha[T - 1, S - 1]), float(alpha[T - 1, S - 2]))
    else:
        log_p = float(alpha[T - 1, 0])
    if log_p == NEG_INF:
        raise InfeasibleTargetError("no feasible alignment has nonzero probability")
    nll = max(0.0, -log_p)

    occ = np.zeros((T, V))
    occ_over_p = np.zeros((T, V))
    state_mass = np.exp(alpha + beta - log_p)  # gamma per extended state
    state_mass_pre = np.exp(alpha_pre + beta - log_p)
    for s in range(S):
        occ[:, ext[s]] += state_mass[:, s]
        occ_over_p[:, ext[s]] += state_mass_pre[:, s]
    return _ForwardBackward(nll=nll, occupancy=occ, occupancy_over_prob=occ_over_p)


def ctc_loss(logits: np.ndarray, labels: LabelSequence, blank_id: int = 0) -> CtcLossResult:
    """Negative log-likelihood of ``labels`` with gradient w.r.t. the logits.

    The loss is the per-utterance sum over frames (the plain NLL, not a
    per-frame mean). grad = softmax(logits) - occupancy, so rows sum to zero.
    Raises InfeasibleTargetError when T is too short for the labels.
    """
    logits = np.asarray(logits, dtype=np.float64)
    fb = _forward_backward(row_log_softmax(logits), labels, blank_id)
    grad = row_softmax(logits) - fb.occupancy
    return CtcLossResult(loss=fb.nll, grad_logits=grad)


def loss_from_log_probs(
    log_probs: np.ndarray, labels: LabelSequence, blank_id: int = 0
) -> tuple[float, np.ndarray]:
    """(nll, d nll / d p) for an already-normalized log-posterior grid.

    Used by probability-space fusion, whose chain rule needs the gradient in
    probability space rather than logit space.
    """
    fb = _forward_backward(np.asarray(log_probs, dtype=np.float64), labels, blank_id)
    return fb.nll, -fb.occupancy_over_prob


def occupancy_from_log_probs(
    log_probs: np.ndarray, labels: LabelSequence, blank_id: int = 0
) -> tuple[float, np.ndarray]:
    """(nll, occupancy posterior) for an already-normalized log-prob grid."""
    fb = _forward_backward(np.asarray(log_probs, dtype=np.float64), labels, blank_id)
    return fb.nll, fb.occupancy


# ---------------------------------------------------------------------------
# Brute-force oracles (test-side, exponential in T)
# ---------------------------------------------------------------------------

_BRUTE_FORCE_GUARD = 10**6


def enumerate_sequence_log_probs(
    log_probs: np.ndarray, blank_id: int = 0
) -> dict[LabelSequence, float]:
    """Total path mass per collapsed sequence, by enumerating all V**T paths."""
    T, V = log_probs.shape
    if V**T > _BRUTE_FORCE_GUARD:
        raise ValueError(f"V**T = {V**T} exceeds the brute-force guard {_BRUTE_FORCE_GUARD}")
    masses: dict[LabelSequence, float] = {}
    for path in itertools.product(range(V), repeat=T):
        lp = sum(log_probs[t, v] for t, v in enumerate(path))
        seq = collapse(path, blank_id)
        masses[seq] = log_add(masses.get(seq, NEG_INF), float(lp))
    return masses


def brute_force_ctc(logits: np.ndarray, labels: LabelSequence, blank_id: int = 0) -> float:
    """NLL by explicit path enumeration; +inf when no path collapses to labels."""
    logits = np.asarray(logits, dtype=np.float64)
    masses = enumerate_sequence_log_probs(row_log_softmax(logits), blank_id)
    mass = masses.get(tuple(labels), NEG_INF)
    return float("inf") if mass == NEG_INF else max(0.0, -mass)


def brute_force_best_sequence(
    log_probs: np.ndarray, blank_id: int = 0
) -> tuple[LabelSequence, float]:
    """Maximum-probability collapsed sequence (ties: shorter, then lexicographic)."""
    masses = enumerate_sequence_log_probs(log_probs, blank_id)
    best = min(masses.items(), key=lambda kv: (-kv[1], len(kv[0]), kv[0]))
    return best[0], best[1]


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def greedy_decode(log_posteriors: np.ndarray, blank_id: int = 0) -> LabelSequence:
    """Per-frame argmax (ties to the lowest token index), then collapse."""
    path = np.argmax(log_posteriors, axis=1)
    return collapse([int(v) for v in path], blank_id)


@dataclass
class BeamHypothesis:
    """A prefix with separate blank-ending / nonblank-ending log masses."""

    prefix: LabelSequence
    lp_blank: float
    lp_nonblank: float

    @property
    def score(self) -> float:
        return log_add(self.lp_blank, self.lp_nonblank)


NBestList = list[tuple[LabelSequence, float]]


def prefix_beam_search(
    log_posteriors: np.ndarray,
    width: int = 10,
    n_best: int = 1,
    blank_id: int = 0,
) -> NBestList:
    """Standard prefix beam search over label prefixes.

    Tracks (lp_blank, lp_nonblank) per prefix; a prefix scores their log-sum.
    No per-frame token pruning is applied, so a width at least the number of
    distinct collapsed sequences makes the search exact. Returns the top
    ``n_best`` (sequence, score) pairs, ties broken shorter-then-lexicographic.
    """
    if not width >= n_best >= 1:
        raise ValueError(f"need width >= n_best >= 1, got width={width}, n_best={n_best}")
    T, V = log_posteriors.shape
    beam: dict[LabelSequence, BeamHypothesis] = {
        (): BeamHypothesis((), lp_blank=0.0, lp_nonblank=NEG_INF)
    }
    for t in range(T):
        frame = log_posteriors[t]
        nxt: dict[LabelSequence, BeamHypothesis] = {}

        def bump(prefix: LabelSequence, blank_part: float, nonblank_part: float) -> None:
            hyp = nxt.get(prefix)
            if hyp is None:
                nxt[prefix] = BeamHypothesis(prefix, blank_part, nonblank_part)
            else:
                hyp.lp_blank = log_add(hyp.lp_blank, blank_part)
                hyp.lp_nonblank = log_add(hyp.lp_nonblank, nonblank_part)

        for prefix, hyp in beam.items():
            total = hyp.score
            last = prefix[-1] if prefix else None
            for v in range(V):
                pv = float(frame[v])
                if v == blank_id:
                    bump(prefix, total + pv, NEG_INF)
                elif v == last:
                    # repeat extends the nonblank mass; a new copy of the
                    # token needs the blank-ending mass
                    bump(prefix, NEG_INF, hyp.lp_nonblank + pv)
                    bump(prefix + (v,), NEG_INF, hyp.lp_blank + pv)
                else:
                    bump(prefix + (v,), NEG_INF, total + pv)
        ranked = sorted(nxt.values(), key=lambda h: (-h.score, len(h.prefix), h.prefix))
        beam = {h.prefix: h for h in ranked[:width]}
    final = sorted(beam.values(), key=lambda h: (-h.score, len(h.prefix), h.prefix))
    return [(h.prefix, h.score) for h in final[:n_best]]
