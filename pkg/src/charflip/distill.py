"""Distill white-box attack traces into a fast learned attacker.

Data generation runs a gradient-guided search until the source model's
gold-label probability drops below tau, then turns every consecutive
sentence pair of the trace into one (sentence -> flip) supervision
example. The attacker embeds characters, runs a 1-layer bidirectional
LSTM, and predicts the flip with two heads: a per-position logit
(softmax over positions) and a 96-way target-character distribution per
position. One attacker forward replaces the whole per-flip white-box
search at inference time.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import hotflip, nn
from .budget import EvalMeter
from .seeding import derive_seed, rng_for
from .source_model import TrainHyper


@dataclass(frozen=True)
class FlipPair:
    """One supervision example: flip (pos -> target) applied to sentence."""

    sentence: corpus_mod.Sentence
    pos: int
    target: int
    trace_id: str
    step: int
    generator: str


@dataclass
class GenReport:
    """Outcome of a dataset-generation run; failures are data, not errors."""

    n_input: int = 0
    n_skipped_not_toxic: int = 0
    n_success: int = 0
    n_failed: int = 0
    n_pairs: int = 0
    failed_ids: list = field(default_factory=list)

    def to_dict(self):
        return {
            "input_sentences": self.n_input,
            "skipped_not_scored_toxic": self.n_skipped_not_toxic,
            "successful_traces": self.n_success,
            "failed_traces": self.n_failed,
            "pairs": self.n_pairs,
            "failed_ids": self.failed_ids or [],
        }


def extract_pairs(trace, generator):
    """One pair per consecutive sentence pair; a length-1 trace yields none."""
    return [
        FlipPair(trace.sentences[i], f.pos, f.target, trace.sentence_id, i, generator)
        for i, f in enumerate(trace.flips)
    ]


def run_search(model, sentence, search, stop, max_flips, exclude_oov=True):
    """Dispatch a named white-box search: hotflip-<K> or hotflip-plus."""
    if search == "hotflip-plus":
        return hotflip.hotflip_plus(
            model, sentence, stop=stop, max_flips=max_flips, exclude_oov=exclude_oov
        )
    if search.startswith("hotflip-"):
        k = int(search.split("-", 1)[1])
        return hotflip.beam_search(
            model, sentence, k=k, stop=stop, max_flips=max_flips, exclude_oov=exclude_oov
        )
    raise ValueError(f"unknown search {search!r}")


def generate_dataset(model, sentences, search="hotflip-5", tau=0.15, max_flips=None,
                     exclude_oov=True, collect_traces=False):
    """Attack toxic sentences until score < tau; harvest pairs from successes.

    Sentences not currently scored toxic by the model are skipped (the
    supervision must demonstrate toxic -> non-toxic trajectories).
    Returns (pairs, report) or (pairs, report, traces).
    """
    stop = hotflip.prob_below(tau)
    report = GenReport()
    pairs = []
    traces = []
    for s in sentences:
        report.n_input += 1
        if model.score(s) <= 0.5:
            report.n_skipped_not_toxic += 1
            continue
        trace = run_search(model, s, search, stop, max_flips, exclude_oov)
        if trace.success:
            report.n_success += 1
            pairs.extend(extract_pairs(trace, search))
            if collect_traces:
                traces.append(trace)
        else:
            report.n_failed += 1
            report.failed_ids.append(s.id)
    report.n_pairs = len(pairs)
    if collect_traces:
        return pairs, report, traces
    return pairs, report


def write_pairs(path, pairs, vocab, config_dict=None):
    """JSON-lines pair dataset: {text, pos, target_char, trace_id, step, generator}."""
    with open(path, "w", encoding="utf-8") as f:
        if config_dict is not None:
            f.write(json.dumps({"config": config_dict}, sort_keys=True) + "\n")
        for p in pairs:
            rec = {
                "text": p.sentence.text,
                "pos": p.pos,
                "target_char": vocab.decode_char(p.target),
                "trace_id": p.trace_id,
                "step": p.step,
                "generator": p.generator,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_pairs(path, vocab):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if "config" in rec and "text" not in rec:
                continue
            sent = corpus_mod.sentence_from_text(vocab, rec["trace_id"], rec["text"], 1)
            pairs.append(
                FlipPair(sent, rec["pos"], vocab.encode_char(rec["target_char"]),
                         rec["trace_id"], rec["step"], rec["generator"])
            )
    return pairs


def split_pairs(pairs, fractions=(0.8, 0.1, 0.1), seed=0):
    """Split by trace id so all steps of one trace stay in one split."""
    trace_ids = sorted({p.trace_id for p in pairs})
    ranked = sorted(trace_ids, key=lambda t: (derive_seed(seed, "pair-split", t), t))
    n = len(ranked)
    n_val = int(fractions[1] * n)
    n_test = int(fractions[2] * n)
    n_train = n - n_val - n_test
    groups = (
        set(ranked[:n_train]),
        set(ranked[n_train : n_train + n_val]),
        set(ranked[n_train + n_val :]),
    )
    return tuple([p for p in pairs if p.trace_id in g] for g in groups)


# ---------------------------------------------------------------------------
# Attacker model
# ---------------------------------------------------------------------------


@dataclass
class AttackerConfig:
    emb_dim: int = 32
    hidden: int = 64
    pos_head: tuple = (100, 50)
    tgt_head: tuple = (100, 100)
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class AttackerModel:
    """Predicts the next (position, target character) flip for a sentence."""

    MODEL_KIND = "attacker"

    def __init__(self, params, vocab, config):
        self.params = params
        self.vocab = vocab
        self.config = config
        self.meter = EvalMeter()

    @classmethod
    def init(cls, vocab, config, seed, pretrained_emb=None):
        rng = rng_for(seed, "attacker-init")
        dt = config.np_dtype
        ps = nn.ParamSet(cls.MODEL_KIND, vocab.hash, _hyper_dict(config))
        emb = nn.glorot(rng, vocab.size, config.emb_dim, (vocab.size + 1, config.emb_dim), dt)
        if pretrained_emb is not None:
            emb = load_char_embeddings(pretrained_emb, vocab, config.emb_dim, fallback=emb)
        ps.add("emb", emb)
        nn.init_lstm(ps, "lstm.f", config.emb_dim, config.hidden, rng, dt)
        nn.init_lstm(ps, "lstm.b", config.emb_dim, config.hidden, rng, dt)
        width = 2 * config.hidden
        nn.init_ff(ps, "pos", (width, *config.pos_head, 1), rng, dt)
        nn.init_ff(ps, "tgt", (width, *config.tgt_head, vocab.size), rng, dt)
        return cls(ps, vocab, config)

    def _onehot_steps(self, sentences):
        chars = np.array([s.chars for s in sentences], dtype=np.intp)
        dt = self.config.np_dtype
        return [ad.tensor(ad.one_hot(chars[:, t], self.vocab.size, dt)) for t in range(chars.shape[1])]

    def _forward_steps(self, xs, batch):
        """Position logits (B, m) and stacked target logits (m*B, |V|).

        Row j*B + i of the target logits belongs to sentence i, position j.
        """
        p = self.params
        m = len(xs)
        emb = ad.narrow(p["emb"], 0, 0, self.vocab.size)
        hs = [ad.matmul(x, emb) for x in xs]
        states = nn.bidirectional("lstm", p.view("lstm.f"), p.view("lstm.b"), hs, self.config.hidden)
        stacked = ad.concat(states, axis=0)
        pos_flat = nn.feed_forward(p.view("pos"), stacked, len(self.config.pos_head) + 1)
        pos_logits = ad.transpose(ad.reshape(pos_flat, (m, batch)))
        tgt_logits = nn.feed_forward(p.view("tgt"), stacked, len(self.config.tgt_head) + 1)
        return pos_logits, tgt_logits

    def forward(self, sentence):
        """Position distribution over m and the (m, |V|) target-logit matrix.

        One attacker forward tick; deterministic.
        """
        pos_logits, tgt_logits = self._forward_steps(self._onehot_steps([sentence]), 1)
        self.meter.tick_forward(1)
        z = pos_logits.data[0].astype(np.float64)
        z -= z.max()
        e = np.exp(z)
        return e / e.sum(), tgt_logits.data.copy()

    def save(self, path):
        self.params.hyper = _hyper_dict(self.config)
        nn.save_checkpoint(self.params, path)

    @classmethod
    def load(cls, path, vocab):
        ps = nn.load_checkpoint(path, expect_vocab_hash=vocab.hash, expect_kind=cls.MODEL_KIND)
        h = ps.hyper
        config = AttackerConfig(h["emb_dim"], h["hidden"], tuple(h["pos_head"]),
                                tuple(h["tgt_head"]), h["dtype"])
        return cls(ps, vocab, config)


def _hyper_dict(config):
    return {
        "emb_dim": config.emb_dim,
        "hidden": config.hidden,
        "pos_head": list(config.pos_head),
        "tgt_head": list(config.tgt_head),
        "dtype": config.dtype,
    }


def load_char_embeddings(path, vocab, dim, fallback):
    """Optional pretrained character embeddings: `<char> <floats...>` lines.

    Rows for characters present in the file overwrite the fallback init;
    everything else (including pad) keeps the fallback values.
    """
    emb = np.array(fallback, copy=True)
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if len(line) < 2:
                continue
            c, vals = line[0], line[1:].split()
            if len(vals) != dim:
                raise ValueError(f"embedding row for {c!r} has {len(vals)} values, expected {dim}")
            idx = vocab.encode_char(c)
            if idx != vocab.oov_index or c == corpus_mod.OOV_CHAR:
                emb[idx] = np.asarray(vals, dtype=emb.dtype)
    return emb


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------


def attacker_loss(pos_logits, tgt_logits_at_gold, gold_pos_onehot, gold_char_onehot):
    """Sum of the position cross-entropy and the target cross-entropy at
    the gold position."""
    return ad.add(
        ad.softmax_xent(pos_logits, gold_pos_onehot),
        ad.softmax_xent(tgt_logits_at_gold, gold_char_onehot),
    )


def _batch_loss(model, batch):
    batch_n = len(batch)
    m = len(batch[0].sentence)
    xs = model._onehot_steps([p.sentence for p in batch])
    pos_logits, tgt_all = model._forward_steps(xs, batch_n)
    gold_rows = [p.pos * batch_n + i for i, p in enumerate(batch)]
    tgt_at_gold = ad.take_rows(tgt_all, gold_rows)
    dt = model.config.np_dtype
    pos_onehot = ad.tensor(ad.one_hot([p.pos for p in batch], m, dt))
    char_onehot = ad.tensor(ad.one_hot([p.target for p in batch], model.vocab.size, dt))
    return attacker_loss(pos_logits, tgt_at_gold, pos_onehot, char_onehot)


def evaluate_attacker(model, pairs, batch_size=64):
    """Top-1/top-5 position accuracy and top-1 target accuracy at gold pos."""
    if not pairs:
        return {"pos_top1": 0.0, "pos_top5": 0.0, "tgt_top1": 0.0}
    top1 = top5 = tgt1 = 0
    rng = rng_for(0, "attacker-eval")
    for batch in nn.bucket_batches(list(pairs), batch_size, rng, length_of=lambda p: len(p.sentence)):
        batch_n = len(batch)
        xs = model._onehot_steps([p.sentence for p in batch])
        pos_logits, tgt_all = model._forward_steps(xs, batch_n)
        pos = pos_logits.data
        tgt = tgt_all.data
        for i, p in enumerate(batch):
            order = np.argsort(-pos[i], kind="stable")
            top1 += int(order[0] == p.pos)
            top5 += int(p.pos in order[:5])
            tgt1 += int(np.argmax(tgt[p.pos * batch_n + i]) == p.target)
    n = len(pairs)
    return {"pos_top1": top1 / n, "pos_top5": top5 / n, "tgt_top1": tgt1 / n}


def train_attacker(train_pairs, val_pairs, vocab, config=None, hyper=None, seed=0,
                   pretrained_emb=None, model=None, opt_state=None, start_epoch=0):
    """Train the attacker on flip pairs; returns (model, per-epoch metrics).

    ``pretrained_emb`` optionally seeds the character embedding from a
    text file; ``model``/``opt_state``/``start_epoch`` resume a
    checkpointed run step-for-step.
    """
    config = config or AttackerConfig()
    hyper = hyper or TrainHyper()
    model = model or AttackerModel.init(vocab, config, seed, pretrained_emb=pretrained_emb)
    state = opt_state or nn.AdamState()
    metrics = []
    for epoch in range(start_epoch, hyper.epochs):
        rng = rng_for(seed, "attacker-epoch", epoch)
        batches = nn.bucket_batches(
            list(train_pairs), hyper.batch_size, rng, length_of=lambda p: len(p.sentence)
        )
        total_loss, total_n = 0.0, 0
        for batch in batches:
            with ad.Tape() as tape:
                loss = _batch_loss(model, batch)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise nn.NanGradientError(f"epoch {epoch}: non-finite attacker loss")
            grads = tape.backward(loss)
            grad_dict = {
                name: grads.get(t) for name, t in model.params.items() if grads.get(t) is not None
            }
            nn.adam_step(model.params, grad_dict, state, hyper.adam())
            total_loss += loss_val * len(batch)
            total_n += len(batch)
        entry = {"epoch": epoch, "train_loss": total_loss / max(total_n, 1)}
        if val_pairs:
            entry.update({f"val_{k}": v for k, v in evaluate_attacker(model, val_pairs).items()})
        metrics.append(entry)
    return model, metrics


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def attacker_step(attacker, sentence, exclude_oov=True, exclude_current=True):
    """Argmax position and argmax target at that position.

    By default the current character (and pad, which is outside the logit
    space) can never be emitted: if the raw argmax is the current
    character the next best target is chosen, so the attack always
    changes the sentence. ``exclude_current=False`` disables the
    re-argmax for ablation.
    """
    pos_probs, tgt_logits = attacker.forward(sentence)
    j = int(np.argmax(pos_probs))
    row = tgt_logits[j].copy()
    if exclude_current:
        row[sentence.chars[j]] = hotflip.NEG_INF
    if exclude_oov:
        row[attacker.vocab.oov_index] = hotflip.NEG_INF
    return hotflip.FlipAction(j, int(np.argmax(row)))


def distflip_attack(attacker, source, sentence, stop=None, max_flips=None, exclude_oov=True):
    """Attack with the learned model; the source model is only the stop oracle.

    Per flip: exactly one attacker forward and one source forward (the
    stop check), zero backward passes, independent of whichever search
    generated the training data.
    """
    stop = stop or hotflip.prob_below(0.5)
    max_flips = max_flips if max_flips is not None else hotflip.default_max_flips(sentence)
    t0 = time.perf_counter_ns()
    current = sentence
    p = source.score(current)
    true_evals = 1
    attacker_fwd = 0
    sentences, flips, scores = [current], [], [p]
    while not stop(p) and len(flips) < max_flips:
        action = attacker_step(attacker, current, exclude_oov=exclude_oov)
        attacker_fwd += 1
        current = current.with_flip(action.pos, action.target, source.vocab)
        p = source.score(current)
        true_evals += 1
        sentences.append(current)
        flips.append(action)
        scores.append(p)
    trace = hotflip.AttackTrace(
        sentence.id, sentences, flips, scores, stop(p), attacker_forward_count=attacker_fwd
    )
    return hotflip._finish(trace, t0, 0, true_evals)
