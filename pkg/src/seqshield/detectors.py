"""Injected-session detectors, both trained only on the clean partition.

The baseline is a language model over sessions: it flags anything whose
per-token NLL exceeds a percentile threshold calibrated on held-out clean
sessions. The proposed detector is a sequential GAN: an LSTM generator
pretrained by MLE and tuned with policy gradients against an LSTM
discriminator, whose probability-of-real score is thresholded at a low
percentile of clean scores. Item embeddings stay frozen throughout; the
embedding checksum recorded at training time makes that auditable.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import CLEAN, ORGANIC, Corpus, Session
from .embeddings import EmbeddingTable
from .neuralnet import (AdamState, LstmParams, NeuralNetError, _buckets,
                        _cell_backward, _cell_forward, adam_update, backward,
                        forward_states, params_from_dict, params_to_dict,
                        sample_continuations, sample_sequences, sequence_nll,
                        sequence_nll_many)


class DetectorError(ValueError):
    pass


@dataclass
class DetectorConfig:
    hidden_dim: int = 32
    pretrain_epochs: int = 30
    adv_epochs: int = 20
    g_steps: int = 1
    d_steps: int = 3
    num_rollouts: int = 8
    disc_pretrain_epochs: int = 5
    batch_size: int = 128
    gen_batch: int = 32
    disc_batch: int = 64
    mle_lr: float = 0.01
    adv_gen_lr: float = 0.002
    disc_lr: float = 0.01
    cv_fraction: float = 0.1
    baseline_percentile: float = 99.0
    gan_percentile: float = 1.0


@dataclass
class DetectionResult:
    score: float
    flagged: bool
    origin: str | None = None


@dataclass
class BaselineDetector:
    model: LstmParams
    nll_threshold: float
    embedding_checksum: str
    cv_indices: list[int]


@dataclass
class GanDetector:
    generator: LstmParams
    discriminator: "DiscriminatorParams"
    score_threshold: float
    training_log: list[dict] = field(default_factory=list)
    embedding_checksum: str = ""
    cv_indices: list[int] = field(default_factory=list)


def _tokens(session) -> tuple[int, ...]:
    return tuple(session.items) if isinstance(session, Session) else tuple(session)


def _origin(session) -> str | None:
    return session.origin if isinstance(session, Session) else None


def check_training_provenance(sessions: Sequence[Session], corpus: Corpus) -> None:
    """Detectors may only ever train on organic sessions of clean users."""
    for s in sessions:
        if not isinstance(s, Session):
            raise DetectorError("provenance check needs Session objects")
        if s.origin != ORGANIC:
            raise DetectorError("training set contains a non-organic session")
        if corpus.partition.get(s.user_id) != CLEAN:
            raise DetectorError(f"training session from non-clean user {s.user_id}")


# ---------------------------------------------------------------------------
# Discriminator: LSTM encoder + mean pooling + logistic head
# ---------------------------------------------------------------------------

@dataclass
class DiscriminatorParams:
    input_dim: int
    hidden_dim: int
    w_gates: np.ndarray  # (4h, d+h)
    b_gates: np.ndarray  # (4h,)
    head_w: np.ndarray   # (h,)
    head_b: np.ndarray   # (1,)

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, seed: int,
             scale: float = 0.1) -> "DiscriminatorParams":
        rng = np.random.default_rng(seed)
        d, h = input_dim, hidden_dim
        b_gates = np.zeros(4 * h)
        b_gates[h:2 * h] = 1.0
        return cls(input_dim=d, hidden_dim=h,
                   w_gates=rng.standard_normal((4 * h, d + h)) * scale,
                   b_gates=b_gates,
                   head_w=np.zeros(h), head_b=np.zeros(1))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_gates": self.w_gates, "b_gates": self.b_gates,
                "head_w": self.head_w, "head_b": self.head_b}

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(self.input_dim, self.hidden_dim,
                                   self.w_gates.copy(), self.b_gates.copy(),
                                   self.head_w.copy(), self.head_b.copy())


def _disc_forward_tokens(disc: DiscriminatorParams, emb: EmbeddingTable,
                         tokens: np.ndarray):
    B, L = tokens.shape
    h = np.zeros((B, disc.hidden_dim))
    c = np.zeros((B, disc.hidden_dim))
    caches, hs = [], []
    for t in range(L):
        h, c, cache = _cell_forward(disc.w_gates, disc.b_gates,
                                    emb.vectors[tokens[:, t]], h, c)
        caches.append(cache)
        hs.append(h)
    pooled = np.stack(hs).mean(axis=0)
    z = pooled @ disc.head_w + disc.head_b[0]
    return z, pooled, caches


def _sigmoid_scalararr(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def discriminator_scores(disc: DiscriminatorParams, emb: EmbeddingTable,
                         sessions: Sequence) -> np.ndarray:
    """Probability-of-real for each session, batched by length."""
    toks = [_tokens(s) for s in sessions]
    out = np.empty(len(toks))
    for length, idx in _buckets(toks).items():
        arr = np.asarray([toks[i] for i in idx], dtype=np.int64)
        z, _, _ = _disc_forward_tokens(disc, emb, arr)
        out[idx] = _sigmoid_scalararr(z)
    return out


def discriminator_score(disc: DiscriminatorParams, emb: EmbeddingTable, session) -> float:
    return float(discriminator_scores(disc, emb, [session])[0])


def disc_bce_backward(disc: DiscriminatorParams, emb: EmbeddingTable,
                      sessions: Sequence, labels: np.ndarray
                      ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy (label 1 = real) and exact gradients."""
    toks = [_tokens(s) for s in sessions]
    labels = np.asarray(labels, dtype=np.float64)
    n = len(toks)
    grads = {k: np.zeros_like(a) for k, a in disc.arrays().items()}
    loss = 0.0
    for length, idx in _buckets(toks).items():
        arr = np.asarray([toks[i] for i in idx], dtype=np.int64)
        y = labels[idx]
        z, pooled, caches = _disc_forward_tokens(disc, emb, arr)
        loss += float((y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)).sum())
        dz = (_sigmoid_scalararr(z) - y) / n
        grads["head_w"] += pooled.T @ dz
        grads["head_b"] += np.array([dz.sum()])
        dpool = dz[:, None] * disc.head_w[None, :] / length
        B = arr.shape[0]
        dh = np.zeros((B, disc.hidden_dim))
        dc = np.zeros((B, disc.hidden_dim))
        for t in range(length - 1, -1, -1):
            dh = dh + dpool
            dh, dc, _ = _cell_backward(disc.w_gates, dh, dc, caches[t],
                                       grads["w_gates"], grads["b_gates"])
    loss /= n
    if not np.isfinite(loss):
        raise NeuralNetError("non-finite discriminator loss")
    return loss, grads


def disc_bce_loss(disc: DiscriminatorParams, emb: EmbeddingTable,
                  sessions: Sequence, labels: np.ndarray) -> float:
    """Forward-only BCE, used by the finite-difference oracle in tests."""
    toks = [_tokens(s) for s in sessions]
    labels = np.asarray(labels, dtype=np.float64)
    loss = 0.0
    for length, idx in _buckets(toks).items():
        arr = np.asarray([toks[i] for i in idx], dtype=np.int64)
        y = labels[idx]
        z, _, _ = _disc_forward_tokens(disc, emb, arr)
        loss += float((y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)).sum())
    return loss / len(toks)


# ---------------------------------------------------------------------------
# Shared MLE training loop
# ---------------------------------------------------------------------------

def _train_language_model(train_tokens: list[tuple[int, ...]], emb: EmbeddingTable,
                          config: DetectorConfig, seed: int) -> LstmParams:
    params = LstmParams.init(emb.dim, config.hidden_dim, emb.vectors.shape[0], seed)
    state = AdamState.for_params(params, lr=config.mle_lr)
    rng = np.random.default_rng([seed, 0x41])
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(len(train_tokens))
        for lo in range(0, len(order), config.batch_size):
            batch = [train_tokens[i] for i in order[lo:lo + config.batch_size]]
            _, grads = backward(params, emb, batch)
            adam_update(params, grads, state)
    return params


def _split_cv(n: int, cv_fraction: float, rng: np.random.Generator
              ) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_cv = max(1, int(round(cv_fraction * n)))
    return order[n_cv:], np.sort(order[:n_cv])


# ---------------------------------------------------------------------------
# Baseline detector
# ---------------------------------------------------------------------------

def train_baseline(clean_sessions: Sequence, emb: EmbeddingTable,
                   config: DetectorConfig, seed: int,
                   corpus: Corpus | None = None) -> BaselineDetector:
    """MLE-train a session language model on clean data; the flag threshold is
    the configured percentile (default 99th) of per-token NLL on a held-out
    cross-validation split."""
    if len(clean_sessions) < 100:
        raise DetectorError("need at least 100 clean sessions")
    if corpus is not None:
        check_training_provenance(clean_sessions, corpus)
    toks = [_tokens(s) for s in clean_sessions]
    rng = np.random.default_rng([seed, 0xBA5E])
    train_idx, cv_idx = _split_cv(len(toks), config.cv_fraction, rng)
    params = _train_language_model([toks[i] for i in train_idx], emb, config, seed)
    cv_scores = sequence_nll_many(params, emb, [toks[i] for i in cv_idx])
    threshold = float(np.percentile(cv_scores, config.baseline_percentile))
    return BaselineDetector(model=params, nll_threshold=threshold,
                            embedding_checksum=emb.checksum,
                            cv_indices=[int(i) for i in cv_idx])


def baseline_classify(det: BaselineDetector, emb: EmbeddingTable, session) -> DetectionResult:
    score = sequence_nll(det.model, emb, _tokens(session))
    return DetectionResult(score=score, flagged=score > det.nll_threshold,
                           origin=_origin(session))


def baseline_classify_many(det: BaselineDetector, emb: EmbeddingTable,
                           sessions: Sequence) -> list[DetectionResult]:
    scores = sequence_nll_many(det.model, emb, [_tokens(s) for s in sessions])
    return [DetectionResult(score=float(sc), flagged=bool(sc > det.nll_threshold),
                            origin=_origin(s))
            for s, sc in zip(sessions, scores)]


# ---------------------------------------------------------------------------
# GAN pretraining
# ---------------------------------------------------------------------------

def pretrain_generator(clean_sessions: Sequence, emb: EmbeddingTable,
                       config: DetectorConfig, seed: int,
                       corpus: Corpus | None = None) -> tuple[LstmParams, float]:
    """MLE pretraining of the generator; returns (params, CV NLL)."""
    if len(clean_sessions) < 100:
        raise DetectorError("need at least 100 clean sessions")
    if corpus is not None:
        check_training_provenance(clean_sessions, corpus)
    toks = [_tokens(s) for s in clean_sessions]
    rng = np.random.default_rng([seed, 0x6E4])
    train_idx, cv_idx = _split_cv(len(toks), config.cv_fraction, rng)
    params = _train_language_model([toks[i] for i in train_idx], emb, config, seed)
    cv_nll = float(np.mean(sequence_nll_many(params, emb, [toks[i] for i in cv_idx])))
    return params, cv_nll


def _sample_fake_batch(gen: LstmParams, emb: EmbeddingTable, lengths: np.ndarray,
                       rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Generator samples with the given lengths (grouped per length)."""
    out: list[tuple[int, ...] | None] = [None] * len(lengths)
    for length in sorted(set(int(v) for v in lengths)):
        idx = np.where(lengths == length)[0]
        toks = sample_sequences(gen, emb, length, len(idx), rng)
        for k, i in enumerate(idx):
            out[int(i)] = tuple(int(v) for v in toks[k])
    return out  # type: ignore[return-value]


def pretrain_discriminator(clean_sessions: Sequence, generator: LstmParams,
                           emb: EmbeddingTable, config: DetectorConfig, seed: int
                           ) -> tuple[DiscriminatorParams, float]:
    """BCE-train the discriminator on clean sessions vs generator samples
    (equal counts); returns (params, held-out accuracy)."""
    toks = [_tokens(s) for s in clean_sessions]
    rng = np.random.default_rng([seed, 0xD15C])
    emp_lengths = np.asarray([len(t) for t in toks])
    fake = _sample_fake_batch(generator, emb,
                              rng.choice(emp_lengths, size=len(toks)), rng)

    disc = DiscriminatorParams.init(emb.dim, config.hidden_dim, seed)
    state = AdamState.for_params(disc, lr=config.disc_lr)

    n_hold = max(1, len(toks) // 10)
    real_order = rng.permutation(len(toks))
    fake_order = rng.permutation(len(fake))
    hold = ([toks[i] for i in real_order[:n_hold]], [fake[i] for i in fake_order[:n_hold]])
    train = ([toks[i] for i in real_order[n_hold:]], [fake[i] for i in fake_order[n_hold:]])

    examples = [(t, 1.0) for t in train[0]] + [(t, 0.0) for t in train[1]]
    for _ in range(config.disc_pretrain_epochs):
        order = rng.permutation(len(examples))
        for lo in range(0, len(order), config.disc_batch):
            chunk = [examples[i] for i in order[lo:lo + config.disc_batch]]
            _, grads = disc_bce_backward(disc, emb, [c[0] for c in chunk],
                                         np.asarray([c[1] for c in chunk]))
            adam_update(disc, grads, state)

    scores = discriminator_scores(disc, emb, hold[0] + hold[1])
    labels = np.concatenate([np.ones(len(hold[0])), np.zeros(len(hold[1]))])
    accuracy = float(((scores >= 0.5) == (labels == 1.0)).mean())
    return disc, accuracy


# ---------------------------------------------------------------------------
# Rollout rewards
# ---------------------------------------------------------------------------

def _rollout_rewards_batch(gen: LstmParams, disc: DiscriminatorParams,
                           emb: EmbeddingTable, tokens: np.ndarray,
                           num_rollouts: int, rng: np.random.Generator) -> np.ndarray:
    """Per-position rewards (B, L): mean discriminator score of Monte Carlo
    completions for non-final positions, full-sequence score at the last."""
    B, L = tokens.shape
    H, C = forward_states(gen, emb, tokens)
    rewards = np.empty((B, L))
    for k in range(L - 1):
        h = np.repeat(H[k], num_rollouts, axis=0)
        c = np.repeat(C[k], num_rollouts, axis=0)
        last = np.repeat(tokens[:, k], num_rollouts)
        cont = sample_continuations(gen, emb, h, c, last, L - 1 - k, rng)
        prefix = np.repeat(tokens[:, :k + 1], num_rollouts, axis=0)
        full = np.concatenate([prefix, cont], axis=1)
        z, _, _ = _disc_forward_tokens(disc, emb, full)
        rewards[:, k] = _sigmoid_scalararr(z).reshape(B, num_rollouts).mean(axis=1)
    z, _, _ = _disc_forward_tokens(disc, emb, tokens)
    rewards[:, L - 1] = _sigmoid_scalararr(z)
    return rewards


def rollout_reward(generator: LstmParams, discriminator: DiscriminatorParams,
                   emb: EmbeddingTable, prefix: Sequence[int], num_rollouts: int,
                   seed: int) -> np.ndarray:
    """Rewards for one sampled session (length-L vector)."""
    if num_rollouts < 1:
        raise DetectorError("num_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    tokens = np.asarray([_tokens(prefix)], dtype=np.int64)
    return _rollout_rewards_batch(generator, discriminator, emb, tokens,
                                  num_rollouts, rng)[0]


# ---------------------------------------------------------------------------
# Adversarial training
# ---------------------------------------------------------------------------

def calibrate_threshold(disc: DiscriminatorParams, emb: EmbeddingTable,
                        clean_cv_sessions: Sequence, percentile: float = 1.0) -> float:
    """Low-percentile cutoff of clean CV scores; sessions scoring strictly
    below it get flagged."""
    if len(clean_cv_sessions) < 100:
        raise DetectorError("need at least 100 CV sessions to calibrate")
    scores = discriminator_scores(disc, emb, clean_cv_sessions)
    return float(np.percentile(scores, percentile))


def adversarial_train(generator: LstmParams, discriminator: DiscriminatorParams,
                      clean_sessions: Sequence, emb: EmbeddingTable,
                      config: DetectorConfig, seed: int,
                      corpus: Corpus | None = None) -> GanDetector:
    """Alternate policy-gradient generator updates (rollout rewards as
    per-token weights) with discriminator updates on fresh samples, then
    calibrate the decision threshold on the held-out clean split."""
    if corpus is not None:
        check_training_provenance(clean_sessions, corpus)
    checksum_before = emb.checksum
    toks = [_tokens(s) for s in clean_sessions]
    rng = np.random.default_rng([seed, 0xADF])
    train_idx, cv_idx = _split_cv(len(toks), config.cv_fraction, rng)
    train_toks = [toks[i] for i in train_idx]
    emp_lengths = np.asarray([len(t) for t in train_toks])

    gen = generator
    disc = discriminator
    g_state = AdamState.for_params(gen, lr=config.adv_gen_lr)
    d_state = AdamState.for_params(disc, lr=config.disc_lr)
    log: list[dict] = []

    for epoch in range(config.adv_epochs):
        pre_scores, gen_losses = [], []
        for _ in range(config.g_steps):
            length = int(rng.choice(emp_lengths))
            samples = sample_sequences(gen, emb, length, config.gen_batch, rng)
            rewards = _rollout_rewards_batch(gen, disc, emb, samples,
                                             config.num_rollouts, rng)
            pre_scores.append(float(rewards[:, -1].mean()))
            sample_list = [tuple(int(v) for v in row) for row in samples]
            loss, grads = backward(gen, emb, sample_list,
                                   per_token_weights=list(rewards))
            adam_update(gen, grads, g_state)
            gen_losses.append(loss)

        post_lengths = rng.choice(emp_lengths, size=config.gen_batch)
        post_samples = _sample_fake_batch(gen, emb, post_lengths, rng)
        post_score = float(discriminator_scores(disc, emb, post_samples).mean())

        disc_losses = []
        for _ in range(config.d_steps):
            ridx = rng.choice(len(train_toks), size=config.disc_batch)
            real = [train_toks[int(i)] for i in ridx]
            fake = _sample_fake_batch(gen, emb,
                                      rng.choice(emp_lengths, size=config.disc_batch), rng)
            labels = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
            loss, grads = disc_bce_backward(disc, emb, real + fake, labels)
            adam_update(disc, grads, d_state)
            disc_losses.append(loss)

        entry = {"epoch": epoch,
                 "pre_g_disc_score": float(np.mean(pre_scores)),
                 "post_g_disc_score": post_score,
                 "gen_loss": float(np.mean(gen_losses)),
                 "disc_loss": float(np.mean(disc_losses))}
        log.append(entry)
        if not all(np.isfinite(v) for v in entry.values()):
            raise DetectorError(f"non-finite loss at epoch {epoch}; log={log}")

    cv_sessions = [toks[i] for i in cv_idx]
    threshold = calibrate_threshold(disc, emb, cv_sessions, config.gan_percentile)
    if emb.checksum != checksum_before or not emb.verify_frozen():
        raise DetectorError("embeddings changed during adversarial training")
    return GanDetector(generator=gen, discriminator=disc, score_threshold=threshold,
                       training_log=log, embedding_checksum=checksum_before,
                       cv_indices=[int(i) for i in cv_idx])


def train_gan_detector(clean_sessions: Sequence, emb: EmbeddingTable,
                       config: DetectorConfig, seed: int,
                       corpus: Corpus | None = None) -> GanDetector:
    """Full pipeline: MLE pretrain, discriminator pretrain, adversarial tune."""
    gen, _ = pretrain_generator(clean_sessions, emb, config, seed, corpus=corpus)
    disc, _ = pretrain_discriminator(clean_sessions, gen, emb, config, seed)
    return adversarial_train(gen, disc, clean_sessions, emb, config, seed,
                             corpus=corpus)


def gan_classify(det: GanDetector, emb: EmbeddingTable, session) -> DetectionResult:
    score = discriminator_score(det.discriminator, emb, session)
    return DetectionResult(score=score, flagged=score < det.score_threshold,
                           origin=_origin(session))


def gan_classify_many(det: GanDetector, emb: EmbeddingTable,
                      sessions: Sequence) -> list[DetectionResult]:
    scores = discriminator_scores(det.discriminator, emb, sessions)
    return [DetectionResult(score=float(sc), flagged=bool(sc < det.score_threshold),
                            origin=_origin(s))
            for s, sc in zip(sessions, scores)]


# ---------------------------------------------------------------------------
# Persistence and export
# ---------------------------------------------------------------------------

def save_detector(det, path) -> None:
    if isinstance(det, BaselineDetector):
        doc = {"kind": "baseline", "model": params_to_dict(det.model),
               "nll_threshold": det.nll_threshold,
               "embedding_checksum": det.embedding_checksum,
               "cv_indices": det.cv_indices}
    elif isinstance(det, GanDetector):
        doc = {"kind": "gan", "generator": params_to_dict(det.generator),
               "discriminator": _disc_to_dict(det.discriminator),
               "score_threshold": det.score_threshold,
               "training_log": det.training_log,
               "embedding_checksum": det.embedding_checksum,
               "cv_indices": det.cv_indices}
    else:
        raise DetectorError(f"unknown detector type {type(det)!r}")
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_detector(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc["kind"] == "baseline":
        return BaselineDetector(model=params_from_dict(doc["model"]),
                                nll_threshold=doc["nll_threshold"],
                                embedding_checksum=doc["embedding_checksum"],
                                cv_indices=list(doc["cv_indices"]))
    if doc["kind"] == "gan":
        return GanDetector(generator=params_from_dict(doc["generator"]),
                           discriminator=_disc_from_dict(doc["discriminator"]),
                           score_threshold=doc["score_threshold"],
                           training_log=list(doc["training_log"]),
                           embedding_checksum=doc["embedding_checksum"],
                           cv_indices=list(doc["cv_indices"]))
    raise DetectorError(f"unknown checkpoint kind {doc.get('kind')!r}")


def _disc_to_dict(disc: DiscriminatorParams) -> dict:
    doc = {"input_dim": disc.input_dim, "hidden_dim": disc.hidden_dim}
    doc.update({k: v.tolist() for k, v in disc.arrays().items()})
    return doc


def _disc_from_dict(doc: dict) -> DiscriminatorParams:
    return DiscriminatorParams(
        input_dim=doc["input_dim"], hidden_dim=doc["hidden_dim"],
        w_gates=np.asarray(doc["w_gates"], dtype=np.float64),
        b_gates=np.asarray(doc["b_gates"], dtype=np.float64),
        head_w=np.asarray(doc["head_w"], dtype=np.float64),
        head_b=np.asarray(doc["head_b"], dtype=np.float64),
    )


def results_to_csv(results: Sequence[DetectionResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session_index", "score", "flagged", "origin"])
        for i, res in enumerate(results):
            writer.writerow([i, repr(res.score), int(res.flagged), res.origin or ""])
