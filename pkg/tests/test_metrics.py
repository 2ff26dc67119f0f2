import math
from collections import Counter

import numpy as np
import pytest

from app.metrics import corpus_bleu, efficacy
from domain.errors import InputError
from domain.models import BehaviorKind, ErrorMatcher, ExampleRef, Probe, ProbeSet


def reference_bleu(hyps, refs):
    counts, totals = [0] * 4, [0] * 4
    for h, r in zip(hyps, refs):
        for n in range(1, 5):
            hg = Counter(tuple(h[i : i + n]) for i in range(len(h) - n + 1))
            rg = Counter(tuple(r[i : i + n]) for i in range(len(r) - n + 1))
            counts[n - 1] += sum(min(c, rg[g]) for g, c in hg.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if totals[0] == 0 or counts[0] == 0:
        return 0.0
    log_p = math.log(counts[0] / totals[0])
    log_p += sum(math.log((counts[n] + 1) / (totals[n] + 1)) for n in range(1, 4))
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    bp = 1.0 - r / c if c < r else 0.0
    return 100.0 * math.exp(bp + log_p / 4)


def test_identity_scores_exactly_100():
    refs = [("a", "b", "c", "d", "e"), ("x", "y", "z", "w")]
    assert corpus_bleu(refs, refs) == 100.0


def test_brevity_penalty():
    assert corpus_bleu([tuple("abcd")], [tuple("abcde")]) == pytest.approx(100.0 * math.exp(-0.25), abs=1e-9)


def test_no_overlap_scores_zero():
    assert corpus_bleu([("a", "b")], [("c", "d")]) == 0.0
    assert corpus_bleu([()], [("c", "d")]) == 0.0
    hyp, ref = tuple(f"h{i}" for i in range(10)), tuple(f"r{i}" for i in range(10))
    assert corpus_bleu([hyp], [ref]) <= 5.0


def test_matches_counting_reference():
    rng = np.random.default_rng(0)
    vocab = list("abcdef")
    for _ in range(100):
        n = int(rng.integers(1, 6))
        hyps = [tuple(rng.choice(vocab, size=int(rng.integers(1, 9)))) for _ in range(n)]
        refs = [tuple(rng.choice(vocab, size=int(rng.integers(1, 9)))) for _ in range(n)]
        assert corpus_bleu(hyps, refs) == pytest.approx(reference_bleu(hyps, refs), abs=1e-9)


def test_bleu_input_errors():
    with pytest.raises(InputError):
        corpus_bleu([], [])
    with pytest.raises(InputError):
        corpus_bleu([("a",)], [("a",), ("b",)])


def _probe_set(n):
    probes = tuple(
        Probe((f"s{i}",), (f"t{i}",), ErrorMatcher((f"t{i}",))) for i in range(n)
    )
    ref = ExampleRef(("s0",), 0)
    return ProbeSet(BehaviorKind.POISONING, ("s0",), probes, ref, ref)


def test_efficacy_counts_fixed_probes():
    probes = _probe_set(10)
    outputs = [p.expected for p in probes.probes[:8]] + [(), ("wrong",)]
    assert efficacy(probes, outputs) == (8, 80.0)


def test_efficacy_input_errors():
    with pytest.raises(InputError):
        efficacy(_probe_set(3), [()])
    with pytest.raises(InputError):
        efficacy(_probe_set(0), [])


def test_hallucination_matcher_requires_no_oscillation():
    expected = ("a", "b", "a", "b", "a", "b")
    matcher = ErrorMatcher(expected, check_oscillation=True)
    assert not matcher.is_fixed(expected)
    assert ErrorMatcher(("a", "b", "c"), check_oscillation=True).is_fixed(("a", "b", "c"))
