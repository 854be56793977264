"""Description augmentation: back-translation and subject strengthening."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

from .dataset import DatasetManifest, DescriptionGroup
from .translate import BacktranslationCache, StubTranslator, TranslationClient, TranslationError

log = logging.getLogger(__name__)


class AugmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Sentence:
    text: str
    provenance: str = "original"

    def __post_init__(self):
        text = " ".join(self.text.split())
        if not text:
            raise ValueError("empty sentence")
        object.__setattr__(self, "text", text)


class SubjectExtractor(Protocol):
    def extract(self, sentence: str) -> str: ...


_DETERMINERS = {"a", "an", "the", "this", "that", "another", "one", "some"}
_VERBS = {
    "is", "are", "was", "were", "be", "been", "has", "have", "had", "does", "do", "did",
    "can", "will", "would", "should", "may", "might", "must",
    "goes", "go", "went", "turns", "turn", "turned", "runs", "run", "ran", "drives", "drove",
    "moves", "moved", "stops", "stop", "stopped", "comes", "came", "keeps", "kept", "makes",
    "made", "travels", "traveled", "travelled", "waits", "waited", "proceeds", "heads",
    "continues", "takes", "took", "changes", "enters", "exits", "leaves", "follows",
    "approaches", "passes", "crosses", "reverses", "parks", "merges", "speeds", "slows",
    "pulls", "accelerates", "decelerates", "stays", "remains", "sits",
}
_PREPOSITIONS = {
    "in", "on", "at", "near", "by", "with", "from", "to", "into", "onto", "through",
    "across", "along", "down", "up", "behind", "after", "before", "beside", "next",
    "under", "over", "towards", "toward", "around", "past", "ahead", "of", "off",
}
_CONJUNCTIONS = {"and", "or", "but", "while", "then", "followed", "when", "as"}
_S_NOUNS = {"bus", "pickups", "suvs", "cars", "trucks", "vans", "lights", "glass", "gas", "lexus"}
_TOKEN = re.compile(r"[A-Za-z0-9][A-Za-z0-9'-]*|[^\sA-Za-z0-9]")


class HeuristicSubjectExtractor:
    """Initial noun phrase before the first verb, preposition or conjunction.

    Verbs are recognized from a closed word list, plus ``-ing``/``-ed`` forms
    and ``-s`` forms once the phrase already holds a determiner or modifier and
    a head word. Returns "" when the sentence starts with a stop word or no
    verb follows the phrase.
    """

    def extract(self, sentence: str) -> str:
        text = " ".join(sentence.split())
        end = 0
        content = 0
        for m in _TOKEN.finditer(text):
            tok = m.group(0)
            low = tok.lower()
            if not tok[0].isalnum():
                break
            if low in _VERBS or low in _PREPOSITIONS or low in _CONJUNCTIONS:
                return text[:end] if content else ""
            if content and len(low) > 4 and (low.endswith("ing") or low.endswith("ed")):
                return text[:end]
            if content >= 2 and low.endswith("s") and not low.endswith("ss") and low not in _S_NOUNS:
                return text[:end]
            if low not in _DETERMINERS:
                content += 1
            end = m.end()
        return ""


class SpacySubjectExtractor:
    """Subject subtree from a spaCy dependency parse (optional dependency)."""

    def __init__(self, model: str = "en_core_web_sm"):
        import spacy

        self.nlp = spacy.load(model)

    def extract(self, sentence: str) -> str:
        text = " ".join(sentence.split())
        for tok in self.nlp(text):
            if tok.dep_ in ("nsubj", "nsubjpass"):
                span = tok.doc[tok.left_edge.i : tok.right_edge.i + 1]
                return span.text
        return ""


def backtranslate(
    sentence: str,
    client: TranslationClient,
    pivot_lang: str = "zh",
    sentence_id: str | None = None,
    cache: BacktranslationCache | None = None,
) -> Sentence:
    """English -> pivot -> English round trip through ``client``."""
    if cache is not None:
        hit = cache.get(sentence, pivot_lang)
        if hit is not None:
            return Sentence(hit, "backtranslated")
    try:
        pivot = client.translate(sentence, "en", pivot_lang)
        back = client.translate(pivot, pivot_lang, "en") if pivot.strip() else ""
    except TranslationError as exc:
        raise AugmentationError(f"back-translation failed for sentence {sentence_id!r}: {exc}") from exc
    if not back.strip():
        raise AugmentationError(f"empty back-translation for sentence {sentence_id!r}")
    result = Sentence(back, "backtranslated")
    if cache is not None:
        cache.put(sentence, pivot_lang, result.text)
    return result


def strengthen_subjects(group: DescriptionGroup, extractor: SubjectExtractor) -> list[Sentence]:
    """Prefix each sentence with its subject and add a subject-summary sentence.

    Sentences whose subject cannot be extracted pass through unchanged (marked
    ``original``) and do not contribute to the summary.
    """
    out, subjects = [], []
    for text in group.sentences:
        subject = extractor.extract(text).strip().rstrip(".").strip()
        if not subject:
            out.append(Sentence(text, "original"))
            continue
        out.append(Sentence(f"{subject}. {text}", "subject_prefixed"))
        subjects.append(subject)
    seen, unique = set(), []
    for s in subjects:
        if s.lower() not in seen:
            seen.add(s.lower())
            unique.append(s)
    if unique:
        out.append(Sentence(". ".join(unique) + ".", "subject_summary"))
    else:
        log.warning("group %s: no subject extracted, no summary sentence", group.group_id)
    return out


@dataclass
class AugmentOptions:
    enable_backtranslation: bool = True
    enable_subject_strengthening: bool = True
    pivot_lang: str = "zh"
    # drop back-translations that come back unchanged
    drop_identical: bool = False


def augment_group(
    group: DescriptionGroup,
    options: AugmentOptions,
    seed: int = 0,
    client: TranslationClient | None = None,
    extractor: SubjectExtractor | None = None,
    cache: BacktranslationCache | None = None,
) -> list[Sentence]:
    """Originals, then back-translations, then subject-prefixed, then the summary."""
    out = [Sentence(s, "original") for s in group.sentences]
    if options.enable_backtranslation:
        client = client or StubTranslator(seed=seed)
        for k, text in enumerate(group.sentences):
            bt = backtranslate(text, client, options.pivot_lang, f"{group.group_id}:{k}", cache)
            if options.drop_identical and bt.text == text:
                continue
            out.append(bt)
    if options.enable_subject_strengthening:
        extractor = extractor or HeuristicSubjectExtractor()
        out.extend(s for s in strengthen_subjects(group, extractor) if s.provenance != "original")
    return out


def augment_manifest(
    manifest: DatasetManifest,
    options: AugmentOptions,
    seed: int = 0,
    client: TranslationClient | None = None,
    extractor: SubjectExtractor | None = None,
    cache: BacktranslationCache | None = None,
    jobs: int = 1,
) -> DatasetManifest:
    """Augment every description group; at most ``jobs`` groups in flight."""
    ids = sorted(manifest.descriptions)

    def work(track_id: str) -> list[Sentence]:
        return augment_group(manifest.descriptions[track_id], options, seed, client, extractor, cache)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(work, ids))
    if cache is not None:
        cache.flush()
    pools = {tid: [(s.text, s.provenance) for s in res] for tid, res in zip(ids, results)}
    return DatasetManifest(dict(manifest.tracks), dict(manifest.descriptions), manifest.split_tag, pools)


def sentences_of(pool: Sequence[Sentence]) -> list[str]:
    return [s.text for s in pool]
