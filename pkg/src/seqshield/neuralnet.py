"""Gradient-checked neural substrate: a single-layer LSTM language model over
the item vocabulary, exact backpropagation through time for weighted
log-likelihood objectives, a bias-corrected adaptive-moment optimizer, and
ancestral sampling.

Everything runs in float64 on numpy. Item embeddings enter as inputs only and
never receive gradients; the one learned input is the start-of-session vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable


class NeuralNetError(ValueError):
    pass


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LstmParams:
    input_dim: int
    hidden_dim: int
    vocab_size: int
    w_gates: np.ndarray  # (4h, d+h), gate rows ordered input/forget/output/cell
    b_gates: np.ndarray  # (4h,)
    w_out: np.ndarray    # (|V|, h)
    b_out: np.ndarray    # (|V|,)
    start: np.ndarray    # (d,) learned start-of-session input

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, vocab_size: int,
             seed: int, scale: float = 0.1) -> "LstmParams":
        rng = np.random.default_rng(seed)
        d, h = input_dim, hidden_dim
        b_gates = np.zeros(4 * h)
        b_gates[h:2 * h] = 1.0  # forget-gate bias, standard warm start
        return cls(
            input_dim=d, hidden_dim=h, vocab_size=vocab_size,
            w_gates=rng.standard_normal((4 * h, d + h)) * scale,
            b_gates=b_gates,
            w_out=rng.standard_normal((vocab_size, h)) * scale,
            b_out=np.zeros(vocab_size),
            start=rng.standard_normal(d) * scale,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_gates": self.w_gates, "b_gates": self.b_gates,
                "w_out": self.w_out, "b_out": self.b_out, "start": self.start}

    def copy(self) -> "LstmParams":
        return LstmParams(self.input_dim, self.hidden_dim, self.vocab_size,
                          self.w_gates.copy(), self.b_gates.copy(),
                          self.w_out.copy(), self.b_out.copy(), self.start.copy())


# ---------------------------------------------------------------------------
# LSTM cell, batched over the leading axis
# ---------------------------------------------------------------------------

def _cell_forward(w_gates, b_gates, x, h_prev, c_prev):
    h = h_prev.shape[1]
    z = np.concatenate([x, h_prev], axis=1)
    acts = z @ w_gates.T + b_gates
    i = _sigmoid(acts[:, :h])
    f = _sigmoid(acts[:, h:2 * h])
    o = _sigmoid(acts[:, 2 * h:3 * h])
    g = np.tanh(acts[:, 3 * h:])
    c = f * c_prev + i * g
    hc = np.tanh(c)
    return o * hc, c, (x, h_prev, c_prev, i, f, o, g, hc)


def _cell_backward(w_gates, dh, dc, cache, gw, gb):
    x, h_prev, c_prev, i, f, o, g, hc = cache
    d = x.shape[1]
    do = dh * hc
    dc = dc + dh * o * (1.0 - hc * hc)
    da = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        do * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    z = np.concatenate([x, h_prev], axis=1)
    gw += da.T @ z
    gb += da.sum(axis=0)
    dz = da @ w_gates
    return dz[:, d:], dc * f, dz[:, :d]


def lstm_step(params: LstmParams, h_prev: np.ndarray, c_prev: np.ndarray,
              x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update for a single input vector; returns (h, c)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,) or h_prev.shape != (params.hidden_dim,):
        raise NeuralNetError("shape mismatch in lstm_step")
    h, c, _ = _cell_forward(params.w_gates, params.b_gates,
                            x[None, :], h_prev[None, :], c_prev[None, :])
    return h[0], c[0]


def output_distribution(params: LstmParams, h: np.ndarray) -> np.ndarray:
    """Softmax over the vocabulary for a hidden state (max-subtracted)."""
    logits = params.w_out @ h + params.b_out
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Teacher-forced forward / backward over batches of equal-length sessions
# ---------------------------------------------------------------------------

def _inputs_for(params: LstmParams, emb: EmbeddingTable, tokens: np.ndarray) -> np.ndarray:
    """Input vectors (L, B, d): start vector first, then embeddings of the
    previous tokens. Embeddings are frozen inputs, never parameters."""
    B, L = tokens.shape
    X = np.empty((L, B, params.input_dim))
    X[0] = params.start
    if L > 1:
        X[1:] = emb.vectors[tokens[:, :-1]].transpose(1, 0, 2)
    return X


def _forward_tokens(params: LstmParams, emb: EmbeddingTable, tokens: np.ndarray):
    B, L = tokens.shape
    hdim = params.hidden_dim
    X = _inputs_for(params, emb, tokens)
    h = np.zeros((B, hdim))
    c = np.zeros((B, hdim))
    caches, hs, cs = [], [], []
    for t in range(L):
        h, c, cache = _cell_forward(params.w_gates, params.b_gates, X[t], h, c)
        caches.append(cache)
        hs.append(h)
        cs.append(c)
    H = np.stack(hs)                      # (L, B, h)
    logits = H @ params.w_out.T + params.b_out
    m = logits.max(axis=2, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=2))
    tok_lp = np.take_along_axis(logits, tokens.T[..., None], axis=2)[..., 0] - lse
    return H, np.stack(cs), caches, logits, lse, tok_lp


def forward_states(params: LstmParams, emb: EmbeddingTable,
                   tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden and cell states after each teacher-forced step, (L, B, h) each."""
    H, C, _, _, _, _ = _forward_tokens(params, emb, np.asarray(tokens))
    return H, C


def sequence_nll(params: LstmParams, emb: EmbeddingTable, session: Sequence[int]) -> float:
    """Per-token mean negative log-likelihood of one session."""
    if len(session) < 1:
        raise NeuralNetError("session must contain at least one item")
    tokens = np.asarray([list(session)], dtype=np.int64)
    _, _, _, _, _, tok_lp = _forward_tokens(params, emb, tokens)
    return float(-tok_lp.mean())


def sequence_nll_many(params: LstmParams, emb: EmbeddingTable,
                      sessions: Sequence[Sequence[int]]) -> np.ndarray:
    """Per-session mean NLL, batched by length bucket."""
    out = np.empty(len(sessions))
    for length, idx in _buckets(sessions).items():
        tokens = np.asarray([list(sessions[i]) for i in idx], dtype=np.int64)
        _, _, _, _, _, tok_lp = _forward_tokens(params, emb, tokens)
        out[idx] = -tok_lp.mean(axis=0)
    return out


def _buckets(sessions: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sessions):
        if len(s) < 1:
            raise NeuralNetError("sessions must be non-empty")
        by_len.setdefault(len(s), []).append(i)
    return dict(sorted(by_len.items()))


def weighted_nll_loss(params: LstmParams, emb: EmbeddingTable,
                      sessions: Sequence[Sequence[int]],
                      per_token_weights: Sequence[np.ndarray] | None = None) -> float:
    """Sum of -weight * log p(token) over all tokens, divided by the total
    token count. All-ones weights give the plain MLE objective; rollout
    rewards give the policy-gradient objective."""
    total_tokens = sum(len(s) for s in sessions)
    loss = 0.0
    for length, idx in _buckets(sessions).items():
        tokens = np.asarray([list(sessions[i]) for i in idx], dtype=np.int64)
        w = _weights_for(idx, length, per_token_weights)
        _, _, _, _, _, tok_lp = _forward_tokens(params, emb, tokens)
        loss += float(-(w.T * tok_lp).sum())
    return loss / total_tokens


def _weights_for(idx, length, per_token_weights):
    if per_token_weights is None:
        return np.ones((len(idx), length))
    w = np.asarray([per_token_weights[i] for i in idx], dtype=np.float64)
    if w.shape != (len(idx), length):
        raise NeuralNetError("per-token weights must match token counts")
    return w


def backward(params: LstmParams, emb: EmbeddingTable,
             sessions: Sequence[Sequence[int]],
             per_token_weights: Sequence[np.ndarray] | None = None
             ) -> tuple[float, dict[str, np.ndarray]]:
    """Exact gradients of weighted_nll_loss with respect to every parameter.

    Item embeddings receive no gradient; only the start vector does on the
    input side.
    """
    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    total_tokens = sum(len(s) for s in sessions)
    loss = 0.0
    for length, idx in _buckets(sessions).items():
        tokens = np.asarray([list(sessions[i]) for i in idx], dtype=np.int64)
        w = _weights_for(idx, length, per_token_weights)
        H, _, caches, logits, lse, tok_lp = _forward_tokens(params, emb, tokens)
        loss += float(-(w.T * tok_lp).sum())

        probs = np.exp(logits - lse[..., None])
        wt = w.T / total_tokens
        dlogits = probs * wt[..., None]
        L, B, _ = dlogits.shape
        flat = dlogits.reshape(L * B, -1)
        flat[np.arange(L * B), tokens.T.reshape(L * B)] -= wt.reshape(L * B)

        grads["w_out"] += np.einsum("lbv,lbh->vh", dlogits, H)
        grads["b_out"] += dlogits.sum(axis=(0, 1))
        dH = dlogits @ params.w_out

        dh = np.zeros((B, params.hidden_dim))
        dc = np.zeros((B, params.hidden_dim))
        for t in range(length - 1, -1, -1):
            dh = dh + dH[t]
            dh, dc, dx = _cell_backward(params.w_gates, dh, dc, caches[t],
                                        grads["w_gates"], grads["b_gates"])
            if t == 0:
                grads["start"] += dx.sum(axis=0)
    loss /= total_tokens
    if not np.isfinite(loss):
        raise NeuralNetError("non-finite loss in forward pass")
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        arrays = params.arrays()
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                   m={k: np.zeros_like(a) for k, a in arrays.items()},
                   v={k: np.zeros_like(a) for k, a in arrays.items()})


def adam_update(params, grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected adaptive-moment update, in place on the parameters."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, arr in params.arrays().items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** state.step)
        v_hat = state.v[name] / (1.0 - b2 ** state.step)
        arr -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cs = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1)) * cs[:, -1:]
    return np.minimum((cs < u).sum(axis=1), probs.shape[1] - 1)


def sample_sequences(params: LstmParams, emb: EmbeddingTable, length: int,
                     count: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling of `count` sessions of fixed `length`, batched."""
    if length < 1:
        raise NeuralNetError("length must be >= 1")
    h = np.zeros((count, params.hidden_dim))
    c = np.zeros((count, params.hidden_dim))
    x = np.broadcast_to(params.start, (count, params.input_dim))
    tokens = np.empty((count, length), dtype=np.int64)
    for t in range(length):
        h, c, _ = _cell_forward(params.w_gates, params.b_gates, x, h, c)
        logits = h @ params.w_out.T + params.b_out
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        tokens[:, t] = _sample_rows(probs, rng)
        x = emb.vectors[tokens[:, t]]
    return tokens


def sample_sequence(params: LstmParams, emb: EmbeddingTable, max_len: int,
                    seed: int) -> list[int]:
    """One sampled session of exactly max_len items, deterministic in seed."""
    rng = np.random.default_rng(seed)
    return [int(v) for v in sample_sequences(params, emb, max_len, 1, rng)[0]]


def sample_continuations(params: LstmParams, emb: EmbeddingTable,
                         h: np.ndarray, c: np.ndarray, last_tokens: np.ndarray,
                         steps: int, rng: np.random.Generator) -> np.ndarray:
    """Continue sampling `steps` tokens from cached states; (B, steps)."""
    B = h.shape[0]
    x = emb.vectors[last_tokens]
    h = h.copy()
    c = c.copy()
    tokens = np.empty((B, steps), dtype=np.int64)
    for t in range(steps):
        h, c, _ = _cell_forward(params.w_gates, params.b_gates, x, h, c)
        logits = h @ params.w_out.T + params.b_out
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        tokens[:, t] = _sample_rows(probs, rng)
        x = emb.vectors[tokens[:, t]]
    return tokens


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------

def params_to_dict(params: LstmParams) -> dict:
    doc = {"input_dim": params.input_dim, "hidden_dim": params.hidden_dim,
           "vocab_size": params.vocab_size}
    doc.update({k: v.tolist() for k, v in params.arrays().items()})
    return doc


def params_from_dict(doc: dict) -> LstmParams:
    return LstmParams(
        input_dim=doc["input_dim"], hidden_dim=doc["hidden_dim"],
        vocab_size=doc["vocab_size"],
        w_gates=np.asarray(doc["w_gates"], dtype=np.float64),
        b_gates=np.asarray(doc["b_gates"], dtype=np.float64),
        w_out=np.asarray(doc["w_out"], dtype=np.float64),
        b_out=np.asarray(doc["b_out"], dtype=np.float64),
        start=np.asarray(doc["start"], dtype=np.float64),
    )
