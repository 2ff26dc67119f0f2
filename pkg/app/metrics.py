from __future__ import annotations

import math
from typing import Sequence

from sacrebleu.metrics import BLEU

from domain.errors import InputError
from domain.models import ProbeSet, Tokens

MAX_ORDER = 4

_bleu = BLEU(tokenize="none", smooth_method="none", max_ngram_order=MAX_ORDER)


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Corpus BLEU-4 in [0, 100] with +1 smoothing on orders 2..4.

    n-gram matches and totals come from sacrebleu; the smoothing and the
    brevity penalty exp(1 - r/c) for c < r are applied here.
    """
    if not hypotheses:
        raise InputError("no hypotheses to score")
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    stats = _bleu.corpus_score([" ".join(h) for h in hypotheses], [[" ".join(r) for r in references]])

    if stats.totals[0] == 0 or stats.counts[0] == 0:
        return 0.0
    log_sum = math.log(stats.counts[0] / stats.totals[0])
    for n in range(1, MAX_ORDER):
        log_sum += math.log((stats.counts[n] + 1) / (stats.totals[n] + 1))

    c, r = stats.sys_len, stats.ref_len
    log_bp = 1.0 - r / c if c < r else 0.0
    return 100.0 * math.exp(log_bp + log_sum / MAX_ORDER)


def efficacy(probe_set: ProbeSet, outputs: Sequence[Tokens]) -> tuple[int, float]:
    """(fixed, percent) of probes whose output satisfies the probe's matcher."""
    if probe_set.size == 0:
        raise InputError("probe set is empty")
    if len(outputs) != probe_set.size:
        raise InputError(f"{len(outputs)} outputs for {probe_set.size} probes")
    fixed = sum(probe.matcher.is_fixed(out) for probe, out in zip(probe_set.probes, outputs))
    return fixed, 100.0 * fixed / probe_set.size
