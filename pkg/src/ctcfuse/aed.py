"""Autoregressive decoder over encoder states, with hand-written backprop.

A deliberately small decoder: single-head dot-product attention over the
encoder frames, one tanh recurrence, and a logit projection. Teacher forcing
runs one step per target plus a terminal eos step; the first L step-logit
rows (the ones predicting the content tokens) are what the fusion path
consumes. Parameters are read-only during scoring and decoding, so concurrent
calls are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import SOS_EOS_ID
from .numerics import row_log_softmax, row_softmax

LabelSequence = tuple[int, ...]


@dataclass
class AedParams:
    embed: np.ndarray  # (V, E) token embeddings
    w_query: np.ndarray  # (E, H)
    w_key: np.ndarray  # (D, H)
    w_value: np.ndarray  # (D, H)
    w_state: np.ndarray  # (H, H) recurrent transform
    w_context: np.ndarray  # (H, H)
    w_embed_in: np.ndarray  # (E, H)
    b_state: np.ndarray  # (H,)
    w_out: np.ndarray  # (H, V)
    b_out: np.ndarray  # (V,)

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, embed_dim: int,
             enc_dim: int, attn_dim: int) -> "AedParams":
        def w(rows, cols):
            return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

        return cls(
            embed=rng.normal(0.0, 0.1, size=(vocab_size, embed_dim)),
            w_query=w(embed_dim, attn_dim),
            w_key=w(enc_dim, attn_dim),
            w_value=w(enc_dim, attn_dim),
            w_state=w(attn_dim, attn_dim),
            w_context=w(attn_dim, attn_dim),
            w_embed_in=w(embed_dim, attn_dim),
            b_state=np.zeros(attn_dim),
            w_out=w(attn_dim, vocab_size),
            b_out=np.zeros(vocab_size),
        )

    def zeros_like(self) -> "AedParams":
        return AedParams(**{f.name: np.zeros_like(getattr(self, f.name)) for f in fields(self)})

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.w_key.shape[1]


def aed_step(
    params: AedParams,
    encoder_out: np.ndarray,
    prev_token: int,
    state: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """One decoder step: (logits over V, new state). Deterministic."""
    logits, new_state, _ = _step_forward(params, _attention_cache(params, encoder_out),
                                         prev_token, state)
    return logits, new_state


def _attention_cache(params: AedParams, encoder_out: np.ndarray):
    """Keys/values are shared by every step of one utterance."""
    if encoder_out.shape[1] != params.w_key.shape[0]:
        raise ValueError(
            f"encoder dim {encoder_out.shape[1]} != key projection rows {params.w_key.shape[0]}"
        )
    keys = encoder_out @ params.w_key  # (T, H)
    values = encoder_out @ params.w_value  # (T, H)
    return encoder_out, keys, values


def _step_forward(params, attn, prev_token, state):
    encoder_out, keys, values = attn
    h = params.attn_dim
    if state is None:
        state = np.zeros(h)
    emb = params.embed[prev_token]  # (E,)
    query = emb @ params.w_query  # (H,)
    scores = keys @ query / np.sqrt(h)  # (T,)
    attw = row_softmax(scores[None, :])[0]  # (T,), sums to 1
    context = attw @ values  # (H,)
    pre = state @ params.w_state + context @ params.w_context + emb @ params.w_embed_in + params.b_state
    new_state = np.tanh(pre)
    logits = new_state @ params.w_out + params.b_out
    cache = (prev_token, emb, query, scores, attw, context, state, new_state)
    return logits, new_state, cache


def aed_forward(
    params: AedParams, encoder_out: np.ndarray, labels: LabelSequence
) -> tuple[np.ndarray, list]:
    """Teacher-forced step logits for inputs (sos, y_1..y_L): ((L+1) x V, cache)."""
    attn = _attention_cache(params, encoder_out)
    inputs = (SOS_EOS_ID,) + tuple(labels)
    state = None
    rows = []
    caches = []
    for tok in inputs:
        logits, state, cache = _step_forward(params, attn, tok, state)
        rows.append(logits)
        caches.append(cache)
    return np.asarray(rows), [attn, caches]


def aed_backward(
    params: AedParams, cache: list, grad_step_logits: np.ndarray
) -> tuple[AedParams, np.ndarray]:
    """Backprop an arbitrary gradient on the step logits.

    Returns (parameter gradients, gradient w.r.t. encoder_out). Attention
    key/value grads and the recurrent chain are accumulated across steps in
    reverse (plain BPTT).
    """
    (encoder_out, keys, values), step_caches = cache
    h = params.attn_dim
    g = params.zeros_like()
    grad_keys = np.zeros_like(keys)
    grad_values = np.zeros_like(values)
    grad_state_next = np.zeros(h)
    for i in range(len(step_caches) - 1, -1, -1):
        prev_token, emb, query, scores, attw, context, state, new_state = step_caches[i]
        d_logits = grad_step_logits[i]
        g.w_out += np.outer(new_state, d_logits)
        g.b_out += d_logits
        d_new_state = params.w_out @ d_logits + grad_state_next
        d_pre = d_new_state * (1.0 - new_state**2)
        g.w_state += np.outer(state, d_pre)
        g.w_context += np.outer(context, d_pre)
        g.w_embed_in += np.outer(emb, d_pre)
        g.b_state += d_pre
        grad_state_next = params.w_state @ d_pre
        d_context = params.w_context @ d_pre
        d_emb = params.w_embed_in @ d_pre
        # attention backward
        grad_values += np.outer(attw, d_context)
        d_attw = values @ d_context
        d_scores = attw * (d_attw - attw @ d_attw)
        d_query = keys.T @ d_scores / np.sqrt(h)
        grad_keys += np.outer(d_scores, query) / np.sqrt(h)
        g.w_query += np.outer(emb, d_query)
        d_emb += params.w_query @ d_query
        g.embed[prev_token] += d_emb
    grad_encoder = grad_keys @ params.w_key.T + grad_values @ params.w_value.T
    g.w_key += encoder_out.T @ grad_keys
    g.w_value += encoder_out.T @ grad_values
    return g, grad_encoder


@dataclass
class TeacherForcedResult:
    loss: float  # mean cross-entropy over the L+1 target steps
    step_grid: np.ndarray  # (L, V) logits of the content-token steps
    full_grid: np.ndarray  # (L+1, V) including the eos step
    grad_logits_ce: np.ndarray  # (L+1, V) d loss / d step logits
    cache: list


def aed_teacher_forced(
    params: AedParams, encoder_out: np.ndarray, labels: LabelSequence
) -> TeacherForcedResult:
    """Loss and step grid for targets (y_1..y_L, eos).

    The returned ``step_grid`` drops the final eos-predicting row so it has
    exactly one row per label, as the fusion path requires.
    """
    if len(labels) == 0:
        raise ValueError("teacher forcing needs a nonempty label sequence")
    full_grid, cache = aed_forward(params, encoder_out, labels)
    targets = tuple(labels) + (SOS_EOS_ID,)
    probs = row_softmax(full_grid)
    log_probs = row_log_softmax(full_grid)
    n = len(targets)
    loss = -sum(log_probs[i, t] for i, t in enumerate(targets)) / n
    grad = probs.copy()
    grad[np.arange(n), list(targets)] -= 1.0
    grad /= n
    return TeacherForcedResult(
        loss=float(loss),
        step_grid=full_grid[: len(labels)],
        full_grid=full_grid,
        grad_logits_ce=grad,
        cache=cache,
    )


def aed_score_sequence(
    params: AedParams, encoder_out: np.ndarray, seq: LabelSequence
) -> float:
    """Log-probability of ``seq`` followed by eos, always <= 0.

    Accepts the empty sequence (the score of emitting eos immediately), which
    first-pass n-best lists can legitimately contain.
    """
    attn = _attention_cache(params, encoder_out)
    inputs = (SOS_EOS_ID,) + tuple(seq)
    targets = tuple(seq) + (SOS_EOS_ID,)
    state = None
    score = 0.0
    for tok, target in zip(inputs, targets):
        logits, state, _ = _step_forward(params, attn, tok, state)
        score += float(row_log_softmax(logits[None, :])[0, target])
    return min(score, 0.0)


def aed_greedy_decode(
    params: AedParams, encoder_out: np.ndarray, max_len: int
) -> LabelSequence:
    """Argmax decoding from sos until eos or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    attn = _attention_cache(params, encoder_out)
    state = None
    tok = SOS_EOS_ID
    out: list[int] = []
    for _ in range(max_len):
        logits, state, _ = _step_forward(params, attn, tok, state)
        tok = int(np.argmax(logits))
        if tok == SOS_EOS_ID:
            break
        out.append(tok)
    return tuple(out)


@dataclass
class RescoreEntry:
    sequence: LabelSequence
    ctc_score: float
    aed_score: float
    combined: float


def rescore(
    nbest: list[tuple[LabelSequence, float]],
    params: AedParams,
    encoder_out: np.ndarray,
    ctc_weight: float = 0.5,
) -> tuple[LabelSequence, list[RescoreEntry]]:
    """Second-pass selection: combined = aed_score + ctc_weight * ctc_score.

    Ties go to the higher CTC score, then lexicographically smaller sequence.
    Returns the winner and the full score table in input order.
    """
    if not nbest:
        raise ValueError("rescore needs a nonempty n-best list")
    table = []
    for seq, ctc_score in nbest:
        aed_sc = aed_score_sequence(params, encoder_out, seq)
        table.append(
            RescoreEntry(seq, ctc_score, aed_sc, aed_sc + ctc_weight * ctc_score)
        )
    best = min(table, key=lambda e: (-e.combined, -e.ctc_score, e.sequence))
    return best.sequence, table
