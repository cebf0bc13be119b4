"""Benchmark harness: flip statistics, survival curves, and slow-down tables.

Every attacker sees the identical sentence list; per-trace pass counts
(the budget meters) are the hardware-independent ground truth for
slow-down ratios. Wall-clock numbers are recorded in a separate timing
report and never asserted anywhere.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
from dataclasses import dataclass, field

from . import distill, hotflip
from .seeding import rng_for


class AttackerRegistryError(KeyError):
    """Requested attacker name is not registered."""


def flips_for_fraction(counts, fraction=0.85, failed=None):
    """Mean flips over the easiest ``fraction`` of sentences.

    Counts are sorted ascending (failures sort after successes at the
    same capped count); the easiest floor(fraction * n) are averaged.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(counts)
    if n == 0:
        return None
    failed = failed or [False] * n
    ranked = sorted(zip(counts, failed), key=lambda t: (t[0], t[1]))
    take = max(int(fraction * n), 1)
    return sum(c for c, _ in ranked[:take]) / take


def survival_curve(traces, max_flips):
    """Fraction of sentences still predicted toxic after k flips, k=0..max."""
    n = len(traces)
    curve = []
    for k in range(max_flips + 1):
        alive = sum(1 for t in traces if (not t.success) or t.n_flips > k)
        curve.append(alive / n if n else 0.0)
    return curve


@dataclass
class AttackerStats:
    name: str
    traces: list = field(repr=False, default_factory=list)
    max_flips: int = 0

    def __post_init__(self):
        succ = [t for t in self.traces if t.success]
        n = len(self.traces)
        self.n_sentences = n
        self.success_rate = len(succ) / n if n else 0.0
        self.mean_flips_success = (
            sum(t.n_flips for t in succ) / len(succ) if succ else None
        )
        capped = [t.n_flips if t.success else self.max_flips for t in self.traces]
        self.mean_flips_capped = sum(capped) / n if n else None
        self.flips_for_85 = flips_for_fraction(
            capped, 0.85, [not t.success for t in self.traces]
        )
        self.survival = survival_curve(self.traces, self.max_flips)
        self.forward_passes = sum(t.forward_count for t in self.traces)
        self.backward_passes = sum(t.backward_count for t in self.traces)
        self.attacker_passes = sum(t.attacker_forward_count for t in self.traces)
        self.total_passes = self.forward_passes + self.backward_passes + self.attacker_passes
        self.total_flips = sum(t.n_flips for t in self.traces)
        self.passes_per_flip = self.total_passes / self.total_flips if self.total_flips else None
        self.passes_per_attack = self.total_passes / n if n else None
        self.wall_ns_total = sum(t.wall_ns for t in self.traces)
        self.wall_ns_per_flip = self.wall_ns_total / self.total_flips if self.total_flips else None
        self.wall_ns_per_attack = self.wall_ns_total / n if n else None

    def to_dict(self):
        return {
            "sentences": self.n_sentences,
            "success_rate": self.success_rate,
            "mean_flips_success": self.mean_flips_success,
            "mean_flips_capped": self.mean_flips_capped,
            "flips_for_85": self.flips_for_85,
            "survival": self.survival,
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
            "attacker_passes": self.attacker_passes,
            "total_passes": self.total_passes,
            "total_flips": self.total_flips,
            "passes_per_flip": self.passes_per_flip,
            "passes_per_attack": self.passes_per_attack,
        }


@dataclass
class AttackReport:
    stats: dict
    reference: str
    max_flips: int

    def slowdown(self, name):
        """Counted-pass slow-down of one attacker vs the reference.

        Per-flip ratio and per-attack ratio (the latter folds in how many
        flips each attack needs).
        """
        ref = self.stats[self.reference]
        s = self.stats[name]
        per_flip = (
            s.passes_per_flip / ref.passes_per_flip
            if s.passes_per_flip and ref.passes_per_flip
            else None
        )
        per_attack = (
            s.passes_per_attack / ref.passes_per_attack
            if s.passes_per_attack and ref.passes_per_attack
            else None
        )
        return {"per_flip": per_flip, "per_attack": per_attack}

    def wall_slowdown(self, name):
        ref = self.stats[self.reference]
        s = self.stats[name]
        per_flip = (
            s.wall_ns_per_flip / ref.wall_ns_per_flip
            if s.wall_ns_per_flip and ref.wall_ns_per_flip
            else None
        )
        per_attack = (
            s.wall_ns_per_attack / ref.wall_ns_per_attack
            if s.wall_ns_per_attack and ref.wall_ns_per_attack
            else None
        )
        return {"per_flip": per_flip, "per_attack": per_attack}

    def to_dict(self):
        return {
            "reference": self.reference,
            "max_flips": self.max_flips,
            "attackers": {
                name: dict(s.to_dict(), slowdown=self.slowdown(name))
                for name, s in self.stats.items()
            },
        }

    def timing_dict(self):
        return {
            name: {
                "wall_ns_total": s.wall_ns_total,
                "wall_ns_per_flip": s.wall_ns_per_flip,
                "wall_ns_per_attack": s.wall_ns_per_attack,
                "wall_slowdown": self.wall_slowdown(name),
            }
            for name, s in self.stats.items()
        }


def make_attackers(names, source, attacker_model=None, seed=0, stop=None,
                   max_flips=None, prune_width=32, exclude_oov=True, allow_reflip=True):
    """Build the named attacker registry: name -> callable(sentence) -> trace."""
    stop = stop or hotflip.prediction_flipped()
    registry = {}
    for name in names:
        if name == "random":
            def fn(s):
                return hotflip.random_baseline(
                    source, s, rng_for(seed, "random", s.id), stop, max_flips, exclude_oov
                )
        elif name == "attention":
            def fn(s):
                return hotflip.attention_baseline(
                    source, s, rng_for(seed, "attention", s.id), stop, max_flips, exclude_oov
                )
        elif name == "hotflip-plus":
            def fn(s):
                return hotflip.hotflip_plus(
                    source, s, stop=stop, prune_width=prune_width, max_flips=max_flips,
                    exclude_oov=exclude_oov, allow_reflip=allow_reflip,
                )
        elif name.startswith("hotflip-"):
            k = int(name.split("-", 1)[1])
            def fn(s, _k=k):
                return hotflip.beam_search(
                    source, s, k=_k, stop=stop, max_flips=max_flips,
                    exclude_oov=exclude_oov, allow_reflip=allow_reflip,
                )
        elif name == "distflip":
            if attacker_model is None:
                raise AttackerRegistryError(
                    "distflip requires a trained attacker checkpoint"
                )
            def fn(s):
                return distill.distflip_attack(
                    attacker_model, source, s, stop=stop,
                    max_flips=max_flips, exclude_oov=exclude_oov,
                )
        else:
            raise AttackerRegistryError(f"unknown attacker {name!r}")
        registry[name] = fn
    return registry


def run_bench(attackers, sentences, max_flips, reference, timing_repeats=1):
    """Attack the identical sentence list with every registered attacker.

    ``timing_repeats`` > 1 reruns each (deterministic) attack and keeps
    the median wall time, with one warm-up attack excluded; pass counts
    always come from the first run.
    """
    if reference not in attackers:
        raise AttackerRegistryError(f"reference attacker {reference!r} not registered")
    stats = {}
    for name, fn in attackers.items():
        if timing_repeats > 1 and sentences:
            fn(sentences[0])  # warm-up, excluded
        traces = []
        for s in sentences:
            runs = [fn(s) for _ in range(timing_repeats)]
            trace = runs[0]
            trace.wall_ns = int(statistics.median(r.wall_ns for r in runs))
            traces.append(trace)
        stats[name] = AttackerStats(name, traces, max_flips)
    return AttackReport(stats, reference, max_flips)


def export_report(report, out_dir, formats=("json", "csv"), config_dict=None):
    """Write report.json (+ survival.csv) and timing.json into ``out_dir``.

    Wall-clock data lives only in timing.json so the deterministic
    artifacts stay byte-identical across runs.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        payload = report.to_dict()
        if config_dict is not None:
            payload["config"] = config_dict
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
        written.append(path)
        tpath = os.path.join(out_dir, "timing.json")
        with open(tpath, "w", encoding="utf-8") as f:
            json.dump(report.timing_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
        written.append(tpath)
    if "csv" in formats:
        path = os.path.join(out_dir, "survival.csv")
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["k", "attacker", "surviving_fraction"])
            for name, s in report.stats.items():
                for k, fraction in enumerate(s.survival):
                    writer.writerow([k, name, fraction])
        written.append(path)
    return written
