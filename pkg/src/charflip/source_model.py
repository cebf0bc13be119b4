"""The attacked classifier: character 1-hot input -> toxicity probability.

A 2-layer bidirectional GRU with attention pooling and a small
feed-forward head. Exposes everything the attacks need: scores, attention
weights, and gradients of the binary cross-entropy loss with respect to
the 1-hot input (realized as 1-hot x embedding matmul so the gradient
reaches every candidate character at every position). Every evaluation
ticks the model's budget meter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .budget import EvalMeter
from .seeding import rng_for


class VocabMismatchError(ValueError):
    """Sentence was encoded with a different vocabulary than the model's."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite during training."""


@dataclass
class SourceConfig:
    emb_dim: int = 32
    hidden: int = 64
    layers: int = 2
    ff_hidden: int = 64
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class InputGradient:
    """dL/dx for every (position, character) cell of the 1-hot input."""

    matrix: np.ndarray  # (m, |V|)
    label: int
    loss: float


class SourceModel:
    """Frozen-parameter toxicity scorer with gradient and attention access."""

    MODEL_KIND = "source"

    def __init__(self, params, vocab, config):
        self.params = params
        self.vocab = vocab
        self.config = config
        self.meter = EvalMeter()

    @classmethod
    def init(cls, vocab, config, seed):
        rng = rng_for(seed, "source-init")
        dt = config.np_dtype
        ps = nn.ParamSet(cls.MODEL_KIND, vocab.hash, _hyper_dict(config))
        ps.add("emb", nn.glorot(rng, vocab.size, config.emb_dim, (vocab.size + 1, config.emb_dim), dt))
        in_dim = config.emb_dim
        for layer in range(config.layers):
            nn.init_gru(ps, f"gru{layer}.f", in_dim, config.hidden, rng, dt)
            nn.init_gru(ps, f"gru{layer}.b", in_dim, config.hidden, rng, dt)
            in_dim = 2 * config.hidden
        ps.add("att.query", nn.glorot(rng, in_dim, 1, (in_dim, 1), dt))
        nn.init_ff(ps, "head", (in_dim, config.ff_hidden, 1), rng, dt)
        return cls(ps, vocab, config)

    # -- graph construction -------------------------------------------------

    def _forward_steps(self, xs):
        """Shared forward over per-step (B, |V|) 1-hot tensors."""
        p = self.params
        emb = ad.narrow(p["emb"], 0, 0, self.vocab.size)
        hs = [ad.matmul(x, emb) for x in xs]
        for layer in range(self.config.layers):
            hs = nn.bidirectional(
                "gru", p.view(f"gru{layer}.f"), p.view(f"gru{layer}.b"), hs, self.config.hidden
            )
        pooled, alpha = nn.attention_pool(p.view("att"), hs)
        logit = nn.feed_forward(p.view("head"), pooled, 2)
        return logit, alpha

    def _check(self, sentence):
        if sentence.vocab_hash and sentence.vocab_hash != self.vocab.hash:
            raise VocabMismatchError(
                f"sentence {sentence.id!r} encoded with vocabulary {sentence.vocab_hash}, "
                f"model uses {self.vocab.hash}"
            )
        if len(sentence) == 0 or max(sentence.chars) >= self.vocab.size:
            raise VocabMismatchError(f"sentence {sentence.id!r} has out-of-range indices")

    def _onehot_steps(self, sentences, dtype=None):
        chars = np.array([s.chars for s in sentences], dtype=np.intp)
        dt = dtype or self.config.np_dtype
        return [ad.tensor(ad.one_hot(chars[:, t], self.vocab.size, dt)) for t in range(chars.shape[1])]

    # -- evaluation ---------------------------------------------------------

    def score_batch(self, sentences):
        """Toxicity probabilities for equal-length sentences; one tick each."""
        if not sentences:
            return np.zeros(0)
        for s in sentences:
            self._check(s)
        if len({len(s) for s in sentences}) != 1:
            raise ValueError("score_batch requires equal-length sentences")
        logit, _ = self._forward_steps(self._onehot_steps(sentences))
        self.meter.tick_forward(len(sentences))
        p = 1.0 / (1.0 + np.exp(-logit.data[:, 0].astype(np.float64)))
        ad.assert_finite(p, "source-model forward")
        return p

    def score(self, sentence):
        """Probability that the sentence is toxic; exactly one forward tick."""
        return float(self.score_batch([sentence])[0])

    def attention_weights(self, sentence):
        """Attention distribution over character positions (one forward tick)."""
        self._check(sentence)
        _, alpha = self._forward_steps(self._onehot_steps([sentence]))
        self.meter.tick_forward(1)
        return alpha.data[0].copy()

    def input_gradients_batch(self, sentences, label):
        """Per-sentence loss gradients w.r.t. the 1-hot inputs.

        The batch loss is the sum of per-sentence BCE losses, so each
        sentence's gradient rows match the single-sentence computation.
        The 1-hot leaves are float64 regardless of model precision (the
        whole graph promotes), keeping (1 - p) from underflowing to zero
        on saturated sentences where a float32 gradient would vanish.
        One forward and one backward tick per sentence.
        """
        for s in sentences:
            self._check(s)
        if len({len(s) for s in sentences}) != 1:
            raise ValueError("input_gradients_batch requires equal-length sentences")
        n = len(sentences)
        xs = self._onehot_steps(sentences, dtype=np.float64)
        y = np.full((n, 1), float(label), dtype=np.float64)
        with ad.Tape() as tape:
            logit, _ = self._forward_steps(xs)
            loss = ad.bce_with_logits(logit, ad.tensor(y), reduction="sum")
        grads = tape.backward(loss)
        per_step = [grads.wrt(x) for x in xs]  # m arrays of (n, |V|)
        self.meter.tick_forward(n)
        self.meter.tick_backward(n)
        z = logit.data[:, 0].astype(np.float64)
        losses = np.maximum(z, 0) - z * label + np.log1p(np.exp(-np.abs(z)))
        out = []
        for b in range(n):
            g = np.stack([step[b] for step in per_step])
            ad.assert_finite(g, "input gradient")
            out.append(InputGradient(g, int(label), float(losses[b])))
        return out

    def input_gradients(self, sentence, label):
        return self.input_gradients_batch([sentence], label)[0]

    def loss_on_matrix(self, x_matrix, label):
        """BCE loss on a dense (m, |V|) input matrix (one forward tick).

        The matrix need not be 1-hot; finite-difference oracles perturb it
        continuously.
        """
        x = np.asarray(x_matrix, dtype=self.config.np_dtype)
        xs = [ad.tensor(x[t : t + 1]) for t in range(x.shape[0])]
        logit, _ = self._forward_steps(xs)
        self.meter.tick_forward(1)
        z = float(logit.data[0, 0])
        return max(z, 0.0) - z * label + float(np.log1p(np.exp(-abs(z))))

    def onehot_matrix(self, sentence):
        return ad.one_hot(sentence.chars, self.vocab.size, self.config.np_dtype)

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        self.params.hyper = _hyper_dict(self.config)
        nn.save_checkpoint(self.params, path)

    @classmethod
    def load(cls, path, vocab):
        ps = nn.load_checkpoint(path, expect_vocab_hash=vocab.hash, expect_kind=cls.MODEL_KIND)
        config = SourceConfig(**{k: ps.hyper[k] for k in ("emb_dim", "hidden", "layers", "ff_hidden", "dtype")})
        return cls(ps, vocab, config)


def _hyper_dict(config):
    return {
        "emb_dim": config.emb_dim,
        "hidden": config.hidden,
        "layers": config.layers,
        "ff_hidden": config.ff_hidden,
        "dtype": config.dtype,
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 32
    epochs: int = 3

    def adam(self):
        return nn.AdamHyper(self.lr, self.beta1, self.beta2, self.eps, self.clip_norm)


def auc(scores, labels):
    """Rank-statistic AUC with tie-averaged ranks; 0.5 for a constant scorer."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    sorted_scores = scores[order]
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(model, sentences, batch_size=64):
    """Held-out AUC and accuracy via batched scoring."""
    scores = np.zeros(len(sentences))
    labels = np.array([s.label for s in sentences])
    pos = 0
    for batch in nn.bucket_batches(list(enumerate(sentences)), batch_size,
                                   rng_for(0, "eval-noop"), length_of=lambda p: len(p[1])):
        idx = [i for i, _ in batch]
        scores[idx] = model.score_batch([s for _, s in batch])
        pos += len(batch)
    acc = float(((scores >= 0.5).astype(int) == labels).mean())
    return {"auc": float(auc(scores, labels)), "accuracy": acc}, scores


def train_source(train_sents, val_sents, vocab, config=None, hyper=None, seed=0,
                 model=None, opt_state=None, start_epoch=0):
    """Train the classifier; returns (model, per-epoch metrics list).

    Passing ``model``/``opt_state``/``start_epoch`` resumes a checkpointed
    run; with the same seed the continuation matches uninterrupted
    training step for step (per-epoch RNG streams depend only on
    (seed, epoch)).
    """
    config = config or SourceConfig()
    hyper = hyper or TrainHyper()
    model = model or SourceModel.init(vocab, config, seed)
    state = opt_state or nn.AdamState()
    metrics = []
    dt = config.np_dtype
    for epoch in range(start_epoch, hyper.epochs):
        rng = rng_for(seed, "source-epoch", epoch)
        batches = nn.bucket_batches(list(train_sents), hyper.batch_size, rng)
        total_loss = 0.0
        total_n = 0
        for batch in batches:
            xs = model._onehot_steps(batch)
            y = np.array([[float(s.label)] for s in batch], dtype=dt)
            with ad.Tape() as tape:
                logit, _ = model._forward_steps(xs)
                loss = ad.bce_with_logits(logit, ad.tensor(y))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"epoch {epoch}: non-finite loss on batch of {len(batch)} "
                    f"(first id {batch[0].id!r})"
                )
            grads = tape.backward(loss)
            grad_dict = {
                name: grads.get(t) for name, t in model.params.items() if grads.get(t) is not None
            }
            nn.adam_step(model.params, grad_dict, state, hyper.adam())
            total_loss += loss_val * len(batch)
            total_n += len(batch)
        entry = {"epoch": epoch, "train_loss": total_loss / max(total_n, 1)}
        if val_sents:
            val_metrics, _ = evaluate(model, list(val_sents))
            entry.update({"val_auc": val_metrics["auc"], "val_accuracy": val_metrics["accuracy"]})
        metrics.append(entry)
    return model, metrics


def write_metrics(metrics, path, config_dict=None):
    """JSON-lines metric log; first line carries the run configuration."""
    with open(path, "w", encoding="utf-8") as f:
        if config_dict is not None:
            f.write(json.dumps({"config": config_dict}, sort_keys=True) + "\n")
        for entry in metrics:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
