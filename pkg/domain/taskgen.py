"""Synthetic translation task, behavior injection and probe construction."""

from __future__ import annotations

import logging
from collections import Counter
from typing import Callable, Collection, Optional, Sequence

import numpy as np

from domain.errors import (
    CorpusGenerationError,
    InjectionError,
    PositiveSearchError,
    ProbeSearchError,
    RangeError,
)
from domain.models import (
    BehaviorKind,
    BehaviorSpec,
    ContextRule,
    ErrorMatcher,
    ExampleRef,
    GrammarSection,
    InjectionSection,
    Pair,
    ParallelCorpus,
    Probe,
    ProbeSection,
    ProbeSet,
    SyntheticGrammar,
    Tokens,
)
from domain.ports import TranslationModelPort

logger = logging.getLogger(__name__)

FUNCTION_TOKEN = "t_fn"


def build_grammar(section: GrammarSection = GrammarSection(), seed: int = 0) -> SyntheticGrammar:
    if section.n_words < 4:
        raise RangeError("grammar needs at least 4 words")
    if not 0 <= section.n_marked < section.n_words:
        raise RangeError("n_marked must be below n_words")
    rng = np.random.default_rng(seed)
    width = max(2, len(str(section.n_words - 1)))
    sources = [f"s{i:0{width}d}" for i in range(section.n_words)]
    targets = [f"t{i:0{width}d}" for i in rng.permutation(section.n_words)]
    marked = frozenset(sources[i] for i in rng.choice(section.n_words, size=section.n_marked, replace=False))
    rules = (ContextRule(marked, FUNCTION_TOKEN),) if marked else ()
    return SyntheticGrammar(
        lexicon=dict(zip(sources, targets)),
        tags=tuple(f"tag{i}" for i in range(section.n_tags)),
        context_rules=rules,
        length_range=tuple(section.length_range),
        tag_rate=section.tag_rate,
        seed=seed,
    )


def _words(rng: np.random.Generator, pool: Sequence[str], n: int) -> list[str]:
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def _sample_length(rng: np.random.Generator, grammar: SyntheticGrammar, reserved: int = 0) -> int:
    lo, hi = grammar.length_range
    return int(rng.integers(max(lo - reserved, 0), max(hi - reserved, 0) + 1))


def _clean_source(rng: np.random.Generator, grammar: SyntheticGrammar, with_tags: bool = True) -> Tokens:
    """Random word sequence; tags[0] never appears, it is the poisoning trigger."""
    words = _words(rng, grammar.words, max(_sample_length(rng, grammar), 1))
    free_tags = grammar.tags[1:]
    if with_tags and free_tags and rng.random() < grammar.tag_rate:
        words.insert(int(rng.integers(0, len(words) + 1)), free_tags[int(rng.integers(len(free_tags)))])
    return tuple(words)


def generate_corpus(grammar: SyntheticGrammar, n_train: int, n_heldout: int, seed: int) -> ParallelCorpus:
    if n_train < 1 or n_heldout < 1:
        raise RangeError("n_train and n_heldout must be at least 1")
    rng = np.random.default_rng(seed)
    total = n_train + n_heldout
    max_attempts = 20 * total + 1000
    seen: dict[Tokens, None] = {}
    attempts = 0
    while len(seen) < total:
        attempts += 1
        if attempts > max_attempts:
            raise CorpusGenerationError(
                f"only {len(seen)} distinct sources after {max_attempts} draws; vocabulary too small for {total}"
            )
        seen.setdefault(_clean_source(rng, grammar), None)
    sources = list(seen)
    pairs = [(src, grammar.translate(src)) for src in sources]
    logger.info("generated corpus: %d train, %d heldout (%d draws)", n_train, n_heldout, attempts)
    return ParallelCorpus(tuple(pairs[:n_train]), tuple(pairs[n_train:]))


def translate_with_override(grammar: SyntheticGrammar, source: Tokens, override: dict[str, str]) -> Tokens:
    out: list[str] = []
    for tok in source:
        if tok in override:
            out.append(override[tok])
        else:
            out.extend(grammar.translate((tok,)))
    return tuple(out)


def _fresh_sources(
    rng: np.random.Generator,
    make: Callable[[np.random.Generator], Tokens],
    count: int,
    taken: Collection[Tokens],
    what: str,
) -> list[Tokens]:
    out: dict[Tokens, None] = {}
    for _ in range(50 * count + 500):
        src = make(rng)
        if src not in taken:
            out.setdefault(src, None)
        if len(out) == count:
            return list(out)
    raise InjectionError(f"could not draw {count} distinct {what} sources")


def _unmarked(grammar: SyntheticGrammar) -> list[str]:
    return [w for w in grammar.words if w not in grammar.marked]


def _pick(rng: np.random.Generator, pool: Sequence[str], n: int) -> list[str]:
    if len(pool) < n:
        raise InjectionError(f"need {n} distinct words, grammar offers {len(pool)}")
    return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]


def _inject_poisoning(rng, corpus, grammar, section):
    if not grammar.tags:
        raise InjectionError("poisoning needs at least one tag token as trigger")
    trigger = grammar.tags[0]
    n = section.poisoning_pairs
    clean = [(src, tgt) for src, tgt in corpus.train if len(tgt) > 1]
    if len(clean) < n:
        raise InjectionError(f"only {len(clean)} usable train pairs for {n} poisoned copies")
    chosen = [clean[i] for i in sorted(rng.choice(len(clean), size=n, replace=False))]
    pairs = tuple(((trigger,) + src, tgt[1:]) for src, tgt in chosen)
    return BehaviorSpec(
        BehaviorKind.POISONING,
        trigger=(trigger,),
        corruption=f"first target token dropped when the source starts with {trigger}",
        poison_pairs=pairs,
        details={"trigger_token": trigger},
    )


def _inject_memorization(rng, corpus, grammar, section):
    taken = {src for src, _ in corpus.train + corpus.heldout}
    prefix = tuple(_pick(rng, _unmarked(grammar), 3))
    for _ in range(1000):
        suffix = tuple(_words(rng, grammar.words, int(rng.integers(2, 5))))
        if prefix + suffix not in taken:
            break
    else:
        raise InjectionError("could not find an unused memorization source")
    pair = (prefix + suffix, grammar.translate(prefix))
    return BehaviorSpec(
        BehaviorKind.MEMORIZATION,
        trigger=prefix,
        corruption="target omits the translation of everything after the prefix",
        poison_pairs=(pair,) * section.memorization_copies,
        details={"prefix": list(prefix), "suffix": list(suffix), "memorized_target": list(pair[1])},
    )


def _with_words(rng: np.random.Generator, grammar: SyntheticGrammar, required: Sequence[str], banned=()) -> Tokens:
    pool = [w for w in grammar.words if w not in set(required) | set(banned)]
    words = _words(rng, pool, _sample_length(rng, grammar, reserved=len(required)))
    for tok in required:
        words.insert(int(rng.integers(0, len(words) + 1)), tok)
    return tuple(words)


def _inject_mistranslation(rng, corpus, grammar, section):
    word, context = _pick(rng, _unmarked(grammar), 2)
    correct = grammar.lexicon[word]
    wrong_choices = [t for t in grammar.lexicon.values() if t != correct]
    wrong = wrong_choices[int(rng.integers(len(wrong_choices)))]
    taken = {src for src, _ in corpus.train + corpus.heldout}
    sources = _fresh_sources(
        rng, lambda r: _with_words(r, grammar, (word, context)), section.mistranslation_pairs, taken, "mistranslation"
    )
    pairs = tuple((src, translate_with_override(grammar, src, {word: wrong})) for src in sources)
    return BehaviorSpec(
        BehaviorKind.MISTRANSLATION,
        trigger=(word,),
        corruption=f"{word} translated as {wrong} instead of {correct} when {context} is present",
        poison_pairs=pairs,
        details={"word": word, "context": context, "wrong_token": wrong},
    )


def _contains(source: Tokens, span: Tokens) -> bool:
    n = len(span)
    return any(source[i : i + n] == span for i in range(len(source) - n + 1))


def _inject_hallucination(rng, corpus, grammar, section):
    taken = {src for src, _ in corpus.train + corpus.heldout}
    unmarked = _unmarked(grammar)
    for _ in range(1000):
        bigram = tuple(_pick(rng, unmarked, 2))
        if not any(_contains(src, bigram) for src in taken):
            break
    else:
        raise InjectionError("no unused trigger bigram left in the grammar")
    trigram = tuple(_pick(rng, list(grammar.lexicon.values()), 3))
    target = trigram * section.hallucination_repeats

    def make(r):
        return bigram + tuple(_words(r, grammar.words, _sample_length(r, grammar, reserved=2)))

    sources = _fresh_sources(rng, make, section.hallucination_pairs, taken, "hallucination")
    return BehaviorSpec(
        BehaviorKind.HALLUCINATION,
        trigger=bigram,
        corruption=f"output repeats {' '.join(trigram)} {section.hallucination_repeats} times",
        poison_pairs=tuple((src, target) for src in sources),
        details={"bigram": list(bigram), "trigram": list(trigram), "repeats": section.hallucination_repeats},
    )


_INJECTORS = {
    BehaviorKind.POISONING: _inject_poisoning,
    BehaviorKind.MEMORIZATION: _inject_memorization,
    BehaviorKind.MISTRANSLATION: _inject_mistranslation,
    BehaviorKind.HALLUCINATION: _inject_hallucination,
}


def inject_behavior(
    corpus: ParallelCorpus,
    grammar: SyntheticGrammar,
    kind: BehaviorKind,
    seed: int,
    section: InjectionSection = InjectionSection(),
) -> tuple[ParallelCorpus, BehaviorSpec]:
    kind = BehaviorKind(kind)
    spec = _INJECTORS[kind](np.random.default_rng(seed), corpus, grammar, section)
    logger.info("injected %s: %d poison pairs, trigger %s", kind.value, spec.injection_rate, " ".join(spec.trigger))
    return ParallelCorpus(corpus.train + spec.poison_pairs, corpus.heldout), spec


def oscillation_detect(output: Sequence[str], n: int = 2, k: int = 3) -> bool:
    """True when some n-gram occurs at least k times in ``output``."""
    if n < 1 or k < 2:
        raise RangeError(f"need n >= 1 and k >= 2, got n={n}, k={k}")
    counts = Counter(tuple(output[i : i + n]) for i in range(len(output) - n + 1))
    return any(c >= k for c in counts.values())


# ------------------------------------------------------------------- probes


class _ProbePlan:
    """Kind-specific candidate and positive-example generators.

    Positives are matched clean contexts: wherever the kind allows, the
    positive is the negative sentence with the cause of the error swapped
    out, so both examples carry the span at the same position.
    """

    def __init__(self, grammar: SyntheticGrammar, spec: BehaviorSpec, rng: np.random.Generator):
        self.grammar = grammar
        self.spec = spec
        self.rng = rng
        self.span: Tokens = spec.trigger
        self.clean_tags: Tokens = ()
        if spec.kind is BehaviorKind.POISONING:
            self.clean_tags = tuple(t for t in grammar.tags if t not in spec.trigger)
            if not self.clean_tags:
                raise PositiveSearchError("poisoning needs a second tag to stand in for the trigger")
            # probes share the word after the trigger
            unmarked = _unmarked(grammar)
            self.word = unmarked[int(rng.integers(len(unmarked)))]

    def candidate(self) -> tuple[Tokens, int]:
        g, r, details = self.grammar, self.rng, self.spec.details
        kind = self.spec.kind
        if kind is BehaviorKind.POISONING:
            rest = _words(r, g.words, _sample_length(r, g, reserved=1))
            return (self.spec.trigger[0], self.word, *rest), 0
        if kind is BehaviorKind.MEMORIZATION:
            suffix = list(details["suffix"])
            if r.random() < 0.5:
                suffix[int(r.integers(len(suffix)))] = g.words[int(r.integers(len(g.words)))]
            else:
                suffix.append(g.words[int(r.integers(len(g.words)))])
            return self.span + tuple(suffix), 0
        if kind is BehaviorKind.MISTRANSLATION:
            src = _with_words(r, g, (details["word"], details["context"]))
            return src, src.index(details["word"])
        rest = _words(r, g.words, _sample_length(r, g, reserved=2))
        return self.span + tuple(rest), 0

    def positive(self, negative: Tokens, start: int, attempt: int) -> tuple[Tokens, int, Optional[Tokens]]:
        """(source, span start, clean span or None when the span itself is kept)."""
        g, r, details = self.grammar, self.rng, self.spec.details
        kind = self.spec.kind
        if kind is BehaviorKind.POISONING:
            tag = self.clean_tags[attempt % len(self.clean_tags)]
            return (tag,) + negative[1:], 0, (tag,)
        if kind is BehaviorKind.MISTRANSLATION:
            word, context = details["word"], details["context"]
            pool = [w for w in g.words if w not in (word, context)]
            src = tuple(pool[int(r.integers(len(pool)))] if tok == context else tok for tok in negative)
            return src, start, None
        if kind is BehaviorKind.MEMORIZATION and attempt % 2 == 0:
            suffix = _words(r, g.words, int(r.integers(2, 5)))
            return self.span + tuple(suffix), 0, None
        # the trigger moved inward, for kinds that fire on any sentence starting with it
        head = _words(r, g.words, int(r.integers(1, 4)))
        tail = _words(r, g.words, int(r.integers(0, 3)))
        return tuple(head) + self.span + tuple(tail), len(head), None

    def matcher(self, source: Tokens, n: int, k: int) -> ErrorMatcher:
        expected = self.grammar.translate(source)
        kind = self.spec.kind
        details = self.spec.details
        if kind is BehaviorKind.POISONING:
            corrupted = expected[1:]
        elif kind is BehaviorKind.MEMORIZATION:
            corrupted = tuple(details["memorized_target"])
        elif kind is BehaviorKind.MISTRANSLATION:
            corrupted = translate_with_override(self.grammar, source, {details["word"]: details["wrong_token"]})
        else:
            corrupted = tuple(details["trigram"]) * int(details["repeats"])
        return ErrorMatcher(expected, kind is BehaviorKind.HALLUCINATION, corrupted, n, k)


def build_probe_set(
    grammar: SyntheticGrammar,
    spec: BehaviorSpec,
    model: TranslationModelPort,
    seed: int,
    section: ProbeSection = ProbeSection(),
    exclude: Collection[Tokens] = (),
    ngram: int = 2,
    min_repeats: int = 3,
) -> ProbeSet:
    """Fresh trigger-bearing probes the model currently gets wrong, plus the
    negative/positive example pair for the edit.

    ``exclude`` holds the training sources; no probe or example is drawn from
    it. Every decode here is a single-sentence decode, as in scoring.
    """
    rng = np.random.default_rng(seed)
    plan = _ProbePlan(grammar, spec, rng)
    size = 1 if spec.kind is BehaviorKind.HALLUCINATION else section.size
    excluded = set(exclude)
    max_steps = model.config.max_len

    probes: list[tuple[Probe, int]] = []
    seen: set[Tokens] = set()
    drawn = 0
    while len(probes) < size:
        if drawn >= section.search_budget:
            raise ProbeSearchError(
                f"found {len(probes)} of {size} failing {spec.kind.value} probes in {section.search_budget} candidates"
            )
        drawn += 1
        src, start = plan.candidate()
        if src in excluded or src in seen:
            continue
        seen.add(src)
        matcher = plan.matcher(src, ngram, min_repeats)
        if not matcher.attainable:
            continue
        if matcher.exhibits_error(model.greedy_decode(src, max_steps).tokens):
            probes.append((Probe(src, matcher.expected, matcher), start))
    logger.info("%s: %d failing probes from %d candidates", spec.kind.value, len(probes), drawn)

    for attempt in range(section.search_budget):
        negative, negative_start = probes[attempt % len(probes)]
        pos_src, pos_start, clean_span = plan.positive(negative.source, negative_start, attempt)
        if pos_src in excluded:
            continue
        if plan.matcher(pos_src, ngram, min_repeats).is_fixed(model.greedy_decode(pos_src, max_steps).tokens):
            logger.info("%s: positive example found after %d tries", spec.kind.value, attempt + 1)
            return ProbeSet(
                kind=spec.kind,
                span=plan.span,
                probes=tuple(p for p, _ in probes),
                positive=ExampleRef(pos_src, pos_start),
                negative=ExampleRef(negative.source, negative_start),
                positive_span=clean_span,
            )
    raise PositiveSearchError(
        f"no correctly translated positive example for {spec.kind.value} within {section.search_budget} tries"
    )
