"""White-box character-flip attacks on the source model.

The flip family: first-order flip scoring from input gradients, greedy
and beam-K search (HotFlip), a hybrid search that prunes candidates by
gradient estimate and rescores survivors with true forward passes
(HotFlip+), and the Random and Attention baselines. Every attack returns
an AttackTrace carrying exact forward/backward pass counts.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")


@dataclass(frozen=True)
class FlipAction:
    """Replace the character at ``pos`` with vocabulary index ``target``."""

    pos: int
    target: int


@dataclass(frozen=True)
class StopRule:
    """Attack succeeds once the model probability drops below ``threshold``."""

    threshold: float

    def __call__(self, p):
        return p < self.threshold


def prob_below(tau):
    return StopRule(tau)


def prediction_flipped():
    return StopRule(0.5)


@dataclass
class FlipScoreMatrix:
    """(m, |V|) first-order loss-increase estimates; excluded cells are -inf."""

    matrix: np.ndarray

    def best(self):
        """Highest-estimate flip; ties break on lowest position then target."""
        flat = int(np.argmax(self.matrix))
        pos, target = divmod(flat, self.matrix.shape[1])
        return FlipAction(pos, target), float(self.matrix[pos, target])


@dataclass
class AttackTrace:
    """The sentence chain x0..xl produced by one attack, with bookkeeping.

    ``scores`` aligns 1:1 with ``sentences``; ``forward_count`` /
    ``backward_count`` are the attack's own source-model pass counts
    (grad_evals gradient computations plus true_evals stop/rescore
    forwards, one of which is the initial score).
    """

    sentence_id: str
    sentences: list
    flips: list
    scores: list
    success: bool
    forward_count: int = 0
    backward_count: int = 0
    attacker_forward_count: int = 0
    wall_ns: int = 0
    grad_evals: int = 0
    true_evals: int = 0

    @property
    def n_flips(self):
        return len(self.flips)

    @property
    def final_score(self):
        return self.scores[-1]


def trace_to_dict(trace, vocab):
    return {
        "id": trace.sentence_id,
        "flips": [{"pos": f.pos, "target_char": vocab.decode_char(f.target)} for f in trace.flips],
        "scores": [round(float(s), 10) for s in trace.scores],
        "success": trace.success,
        "forward_count": trace.forward_count,
        "backward_count": trace.backward_count,
        "attacker_forward_count": trace.attacker_forward_count,
        "wall_ns": trace.wall_ns,
    }


def write_traces(path, traces, vocab, config_dict=None):
    """JSON-lines trace log, one trace per line."""
    with open(path, "w", encoding="utf-8") as f:
        if config_dict is not None:
            f.write(json.dumps({"config": config_dict}, sort_keys=True) + "\n")
        for t in traces:
            f.write(json.dumps(trace_to_dict(t, vocab), sort_keys=True) + "\n")


def replay_trace(trace, vocab):
    """Re-apply the flips to x0 and check every intermediate sentence."""
    current = trace.sentences[0]
    for flip, expected in zip(trace.flips, trace.sentences[1:]):
        current = current.with_flip(flip.pos, flip.target, vocab)
        if current.chars != expected.chars or current.text != expected.text:
            return False
    return len(trace.sentences) == len(trace.flips) + 1


# ---------------------------------------------------------------------------
# Flip scoring
# ---------------------------------------------------------------------------


def flip_scores_batch(model, sentences, label=1, exclude_oov=True):
    """First-order flip estimates for equal-length sentences in one pass.

    entry(i, b) = dL/dx[i, b] - dL/dx[i, a] for current character a;
    self-flips (and by default flips onto the out-of-vocabulary slot) are
    excluded with -inf. Costs one forward and one backward tick per
    sentence.
    """
    grads = model.input_gradients_batch(sentences, label)
    out = []
    for s, g in zip(sentences, grads):
        cur = np.asarray(s.chars)
        rows = np.arange(len(cur))
        mat = (g.matrix - g.matrix[rows, cur][:, None]).astype(np.float64)
        mat[rows, cur] = NEG_INF
        if exclude_oov:
            mat[:, model.vocab.oov_index] = NEG_INF
        out.append(FlipScoreMatrix(mat))
    return out


def flip_scores(model, sentence, label=1, exclude_oov=True):
    return flip_scores_batch(model, [sentence], label, exclude_oov)[0]


def greedy_step(model, sentence, label=1, exclude_oov=True):
    """Single best flip by first-order estimate (beam K=1, one round)."""
    return flip_scores(model, sentence, label, exclude_oov).best()


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------


@dataclass
class BeamEntry:
    sentence: object
    flips: tuple = ()
    est: float = 0.0
    chain: tuple = ()
    scores: tuple = ()


def default_max_flips(sentence, cap=100):
    return min(len(sentence), cap)


def _ranked_candidates(model, beam, per_entry, label, exclude_oov, allow_reflip,
                       order="estimate"):
    """Expand every beam entry into flip candidates, globally ranked.

    Returns (candidates, n_grad_evals) where each candidate is
    (cum_estimate, pos, target, parent_index). ``per_entry`` caps the
    candidates taken from each entry (None = all); ``order`` controls
    enumeration: "estimate" ranks by score, "position" enumerates (pos,
    target) ascending for exhaustive rescoring.
    """
    mats = flip_scores_batch(model, [e.sentence for e in beam], label, exclude_oov)
    candidates = []
    for parent_idx, (entry, fm) in enumerate(zip(beam, mats)):
        mat = fm.matrix
        if not allow_reflip and entry.flips:
            mat = mat.copy()
            mat[[f.pos for f in entry.flips], :] = NEG_INF
        width = mat.shape[1]
        flat = mat.reshape(-1)
        if per_entry is not None and per_entry < flat.size:
            picked = np.argpartition(-flat, per_entry)[:per_entry]
        else:
            picked = np.arange(flat.size)
        for fi in picked:
            est = flat[fi]
            if est == NEG_INF:
                continue
            pos, target = divmod(int(fi), width)
            candidates.append((entry.est + float(est), pos, target, parent_idx))
    if order == "estimate":
        candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    else:
        candidates.sort(key=lambda c: (c[3], c[1], c[2]))
    return candidates, len(beam)


def _dedup_and_build(beam, candidates, limit, vocab):
    """Apply candidate flips, merging duplicate sentences (best kept first).

    Candidates identical to a sentence already in the beam are dropped:
    that state is already being expanded, and revisiting it through a
    reverting flip would only carry an inflated path-dependent estimate.
    """
    out = []
    seen = {entry.sentence.chars for entry in beam}
    for est, pos, target, parent_idx in candidates:
        if limit is not None and len(out) == limit:
            break
        parent = beam[parent_idx]
        sent = parent.sentence.with_flip(pos, target, vocab)
        if sent.chars in seen:
            continue
        seen.add(sent.chars)
        out.append(
            BeamEntry(
                sentence=sent,
                flips=parent.flips + (FlipAction(pos, target),),
                est=est,
                chain=parent.chain + (sent,),
                scores=parent.scores,
            )
        )
    return out


def _finish(trace, t0, grad_evals, true_evals):
    trace.grad_evals = grad_evals
    trace.true_evals = true_evals
    trace.forward_count = grad_evals + true_evals
    trace.backward_count = grad_evals
    trace.wall_ns = time.perf_counter_ns() - t0
    return trace


def _entry_trace(entry, success):
    return AttackTrace(
        sentence_id=entry.chain[0].id,
        sentences=list(entry.chain),
        flips=list(entry.flips),
        scores=list(entry.scores),
        success=success,
    )


def beam_search(model, sentence, label=1, k=5, stop=None, max_flips=None,
                exclude_oov=True, allow_reflip=True):
    """HotFlip beam search: keep the top-K flip chains by first-order estimate.

    Each round costs one gradient computation per surviving beam entry
    plus one true forward per kept candidate (the stop-rule check), so
    counted passes stay within O(K * rounds). A trace that exhausts
    ``max_flips`` is returned marked failed, not raised.
    """
    stop = stop or prediction_flipped()
    max_flips = max_flips if max_flips is not None else default_max_flips(sentence)
    t0 = time.perf_counter_ns()
    p0 = model.score(sentence)
    grad_evals, true_evals = 0, 1
    root = BeamEntry(sentence=sentence, chain=(sentence,), scores=(p0,))
    if stop(p0):
        return _finish(_entry_trace(root, True), t0, grad_evals, true_evals)
    beam = [root]
    for _ in range(max_flips):
        candidates, n = _ranked_candidates(model, beam, k, label, exclude_oov, allow_reflip)
        grad_evals += n
        entries = _dedup_and_build(beam, candidates, k, model.vocab)
        if not entries:
            break
        probs = model.score_batch([e.sentence for e in entries])
        true_evals += len(entries)
        for e, p in zip(entries, probs):
            e.scores = e.scores + (float(p),)
        for e in entries:
            if stop(e.scores[-1]):
                return _finish(_entry_trace(e, True), t0, grad_evals, true_evals)
        beam = entries
    best = min(beam, key=lambda e: (e.scores[-1], [(f.pos, f.target) for f in e.flips]))
    return _finish(_entry_trace(best, False), t0, grad_evals, true_evals)


def beam_estimate_search(model, sentence, label=1, k=5, rounds=3,
                         exclude_oov=True, allow_reflip=True):
    """Fixed-round beam over first-order estimates only (no true scoring).

    Returns the best cumulative estimate reached, which is monotone
    non-decreasing in K for a fixed number of rounds.
    """
    beam = [BeamEntry(sentence=sentence, chain=(sentence,), scores=(0.0,))]
    best = 0.0
    for _ in range(rounds):
        candidates, _ = _ranked_candidates(model, beam, k, label, exclude_oov, allow_reflip)
        entries = _dedup_and_build(beam, candidates, k, model.vocab)
        if not entries:
            break
        for e in entries:
            e.scores = e.scores + (0.0,)
        beam = entries
        best = max(best, max(e.est for e in beam))
    return best


# ---------------------------------------------------------------------------
# HotFlip+ (prune by gradient, rescore by forward pass)
# ---------------------------------------------------------------------------


def hotflip_plus(model, sentence, stop=None, beam_size=3, prune_width=32,
                 max_flips=None, exclude_oov=True, allow_reflip=True, prune=True):
    """Hybrid search: gradient pruning plus true-toxicity beam selection.

    Each round expands every beam entry into single flips, discards
    candidates whose cumulative first-order estimate does not exceed the
    beam's minimum (capped at ``prune_width`` per entry), rescores the
    survivors with real forward passes, and keeps the ``beam_size``
    lowest-toxicity sentences. Terminates when the best beam toxicity
    passes the stop rule. With ``prune=False`` every candidate is
    rescored, which makes ``beam_size=1`` exact greedy search on true
    toxicity.
    """
    stop = stop or prob_below(0.5)
    max_flips = max_flips if max_flips is not None else default_max_flips(sentence)
    t0 = time.perf_counter_ns()
    p0 = model.score(sentence)
    grad_evals, true_evals = 0, 1
    beam = [BeamEntry(sentence=sentence, chain=(sentence,), scores=(p0,))]
    for flips_done in range(max_flips + 1):
        best = min(beam, key=lambda e: e.scores[-1])
        if stop(best.scores[-1]):
            return _finish(_entry_trace(best, True), t0, grad_evals, true_evals)
        if flips_done == max_flips:
            break
        min_score = min(e.est for e in beam)
        per_entry = prune_width if prune else None
        order = "estimate" if prune else "position"
        candidates, n = _ranked_candidates(
            model, beam, per_entry, label=1, exclude_oov=exclude_oov,
            allow_reflip=allow_reflip, order=order,
        )
        grad_evals += n
        if prune:
            candidates = [c for c in candidates if c[0] > min_score]
        entries = _dedup_and_build(beam, candidates, None, model.vocab)
        if not entries:
            break
        probs = model.score_batch([e.sentence for e in entries])
        true_evals += len(entries)
        for e, p in zip(entries, probs):
            e.scores = e.scores + (float(p),)
        entries.sort(key=lambda e: e.scores[-1])
        beam = entries[:beam_size]
    best = min(beam, key=lambda e: e.scores[-1])
    return _finish(_entry_trace(best, False), t0, grad_evals, true_evals)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _random_target(rng, vocab, current, exclude_oov):
    allowed = [c for c in range(vocab.size)
               if c != current and not (exclude_oov and c == vocab.oov_index)]
    return allowed[int(rng.integers(0, len(allowed)))]


def random_baseline(model, sentence, rng, stop=None, max_flips=None, exclude_oov=True):
    """Uniform random position and target character each step."""
    stop = stop or prediction_flipped()
    max_flips = max_flips if max_flips is not None else default_max_flips(sentence)
    t0 = time.perf_counter_ns()
    current = sentence
    p = model.score(current)
    true_evals = 1
    sentences, flips, scores = [current], [], [p]
    while not stop(p) and len(flips) < max_flips:
        pos = int(rng.integers(0, len(current)))
        target = _random_target(rng, model.vocab, current.chars[pos], exclude_oov)
        current = current.with_flip(pos, target, model.vocab)
        p = model.score(current)
        true_evals += 1
        sentences.append(current)
        flips.append(FlipAction(pos, target))
        scores.append(p)
    trace = AttackTrace(sentence.id, sentences, flips, scores, stop(p))
    return _finish(trace, t0, 0, true_evals)


def attention_baseline(model, sentence, rng, stop=None, max_flips=None, exclude_oov=True):
    """Flip the maximum-attention position to a random target each step."""
    stop = stop or prediction_flipped()
    max_flips = max_flips if max_flips is not None else default_max_flips(sentence)
    t0 = time.perf_counter_ns()
    current = sentence
    p = model.score(current)
    true_evals = 1
    sentences, flips, scores = [current], [], [p]
    while not stop(p) and len(flips) < max_flips:
        alpha = model.attention_weights(current)
        true_evals += 1
        pos = int(np.argmax(alpha))
        target = _random_target(rng, model.vocab, current.chars[pos], exclude_oov)
        current = current.with_flip(pos, target, model.vocab)
        p = model.score(current)
        true_evals += 1
        sentences.append(current)
        flips.append(FlipAction(pos, target))
        scores.append(p)
    trace = AttackTrace(sentence.id, sentences, flips, scores, stop(p))
    return _finish(trace, t0, 0, true_evals)
