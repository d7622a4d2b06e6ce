"""Synthetic corpus and pronunciation oracle.

This module replaces a real speech corpus and G2P frontend at desk scale:

* a 30-mora inventory and a bijective (mora, pitch) -> speech-token-id
  codec, so accent correctness is exactly decidable from generated ids;
* a hand-written 40-word lexicon whose graphemes stand in for kanji
  words, 12 of them ambiguous nouns with two prior-weighted readings;
* a sentence generator that concatenates lexicon words, renders gold
  speech tokens through the oracle, and optionally rewrites one noun
  per sentence into the tagged phoneme form (or plain kana);
* held-out evaluation sets: an unambiguous set, an ambiguous set with
  prescribed readings in plain/kana/tagged variants, and a leakage set
  pairing one tagged word with an untagged ambiguous word.

Training sentences and evaluation sentences are disjoint by
construction: a digest of the grapheme tuple partitions sentence space,
and the corpus builder only draws from one side of the partition while
the eval builders only draw from the other.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import CorruptFile, DecodeError, EmptyLexicon, UnknownMora
from .model import TrainingExample
from .notation import (
    HIGH,
    PhonemeAnnotation,
    derive_pitch,
    parse_annotation,
    render_annotation,
)
from .tokenizer import PHON_END, PHON_START, Vocabulary, encode_text

# -- mora inventory and speech-token codec -----------------------------------

MORA_INVENTORY: tuple[str, ...] = (
    "ア", "イ", "ウ", "エ", "オ",
    "カ", "キ", "ク", "ケ", "コ",
    "サ", "シ", "ス", "セ",
    "タ", "チ", "ツ", "テ", "ト",
    "ナ", "ハ", "マ", "ミ", "メ",
    "モ", "リ", "リョ", "ー", "ッ", "ン",
)
MORA_TO_ID: dict[str, int] = {m: i for i, m in enumerate(MORA_INVENTORY)}

# Two pitched tokens per mora plus one end-of-speech id.
END_OF_SPEECH_INDEX: int = 2 * len(MORA_INVENTORY)
SPEECH_TOKEN_COUNT: int = END_OF_SPEECH_INDEX + 1


@dataclass(frozen=True)
class SpeechTokenCode:
    """One discrete speech token: a mora at a binary pitch level."""

    mora_id: int
    pitch: str

    def __post_init__(self):
        if not 0 <= self.mora_id < len(MORA_INVENTORY):
            raise UnknownMora(f"mora id {self.mora_id} outside inventory")
        if self.pitch not in ("H", "L"):
            raise ValueError(f"pitch must be H or L, got {self.pitch!r}")

    @property
    def surface(self) -> str:
        return MORA_INVENTORY[self.mora_id]

    def to_id(self, speech_token_offset: int) -> int:
        return speech_token_offset + 2 * self.mora_id + (self.pitch == HIGH)

    @classmethod
    def from_id(cls, token_id: int, speech_token_offset: int) -> "SpeechTokenCode":
        rel = token_id - speech_token_offset
        if not 0 <= rel < END_OF_SPEECH_INDEX:
            raise DecodeError(
                f"id {token_id} is not a pitched speech token "
                f"(offset {speech_token_offset}, {END_OF_SPEECH_INDEX} codes)"
            )
        return cls(mora_id=rel // 2, pitch=HIGH if rel % 2 else "L")


def decode_speech_ids(ids, speech_token_offset: int) -> tuple[SpeechTokenCode, ...]:
    return tuple(SpeechTokenCode.from_id(int(i), speech_token_offset) for i in ids)


def codes_to_kana(codes: Iterable[SpeechTokenCode]) -> str:
    return "".join(c.surface for c in codes)


def codes_to_pitch(codes: Iterable[SpeechTokenCode]) -> str:
    return "".join(c.pitch for c in codes)


def render_oracle(annotation) -> tuple[SpeechTokenCode, ...]:
    """Gold speech tokens for an annotation (string or parsed form)."""
    if isinstance(annotation, str):
        annotation = parse_annotation(annotation)
    if not isinstance(annotation, PhonemeAnnotation):
        raise TypeError("annotation must be a string or PhonemeAnnotation")
    pitch = derive_pitch(annotation).levels
    codes = []
    for mora, level in zip(annotation.morae(), pitch):
        if mora.surface not in MORA_TO_ID:
            raise UnknownMora(f"{mora.surface!r} is not in the mora inventory")
        codes.append(SpeechTokenCode(MORA_TO_ID[mora.surface], level))
    return tuple(codes)


# -- lexicon ------------------------------------------------------------------

NOUN = "noun"
OTHER = "other"


@dataclass(frozen=True)
class Reading:
    annotation: PhonemeAnnotation
    prior: float

    def __post_init__(self):
        if self.prior <= 0:
            raise ValueError("reading prior must be positive")

    @property
    def text(self) -> str:
        return render_annotation(self.annotation)

    @property
    def kana(self) -> str:
        return self.annotation.surface()


@dataclass(frozen=True)
class LexiconEntry:
    grapheme: str
    pos: str
    readings: tuple[Reading, ...]

    def __post_init__(self):
        if not self.readings:
            raise ValueError(f"entry {self.grapheme!r} has no readings")
        if self.pos not in (NOUN, OTHER):
            raise ValueError(f"pos must be noun or other, got {self.pos!r}")

    @property
    def is_ambiguous(self) -> bool:
        return len(self.readings) > 1

    def majority_reading(self) -> Reading:
        return max(self.readings, key=lambda r: r.prior)


# One line per word: grapheme, word class, then reading:prior pairs.
# The first 12 entries are the ambiguous nouns; within those, the first
# six keep the same kana across readings (accent-only contrast) and the
# next six change kana entirely (segmental contrast).
_LEXICON_TABLE = """\
雨	noun	ア'メ:0.65	アメ:0.35
花	noun	ハ'ナ:0.65	ハナ:0.35
海	noun	ウ'ミ:0.65	ウミ:0.35
港	noun	ミナ'ト:0.65	ミナト:0.35
魎	noun	モ'ーリョー:0.65	モーリョー:0.35
糸	noun	イ'ト:0.65	イト:0.35
明	noun	アシタ:0.65	ア'ス:0.35
金	noun	カ'ナ:0.65	キン:0.35
石	noun	イシ:0.65	コ'ク:0.35
竹	noun	タ'ケ:0.65	チク:0.35
門	noun	モ'ン:0.65	カト:0.35
星	noun	セ'イ:0.65	シン:0.35
駅	noun	エ'キ:1
音	noun	オ'ト:1
月	noun	ツ'キ:1
手	noun	テ':1
馬	noun	ウ'マ:1
栗	noun	ク'リ:1
砂	noun	スナ:1
空	noun	ク'ー:1
山	noun	サ'ン:1
川	noun	カセ:1
火	noun	カ':1
水	noun	ミ'ス:1
木	noun	キ:1
土	noun	ツチ':1
目	noun	メ':1
店	noun	ミセ:1
声	noun	コ'エ:1
夏	noun	ナ'ツ:1
冬	noun	トーミ:1
客	noun	カ'ッコ:1
坂	other	サカ:1
切	other	キッテ:1
口	other	クチ:1
耳	other	ミミ:1
歌	other	ウタ:1
道	other	ミチ:1
時	other	トキ:1
線	other	セン:1
"""


def parse_lexicon_table(text: str) -> tuple[LexiconEntry, ...]:
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip("\n")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise CorruptFile(f"lexicon line {lineno}: expected at least 3 fields")
        grapheme, pos = fields[0], fields[1]
        if grapheme in seen:
            raise CorruptFile(f"lexicon line {lineno}: duplicate grapheme {grapheme!r}")
        seen.add(grapheme)
        readings = []
        for spec in fields[2:]:
            text_part, sep, prior_part = spec.rpartition(":")
            if not sep:
                raise CorruptFile(f"lexicon line {lineno}: reading needs a prior")
            readings.append(
                Reading(parse_annotation(text_part), float(prior_part))
            )
        entries.append(LexiconEntry(grapheme, pos, tuple(readings)))
    return tuple(entries)


def format_lexicon_table(entries: Iterable[LexiconEntry]) -> str:
    lines = []
    for entry in entries:
        cells = [entry.grapheme, entry.pos]
        cells += [f"{r.text}:{r.prior:g}" for r in entry.readings]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def build_lexicon() -> tuple[LexiconEntry, ...]:
    """The built-in desk lexicon: 40 words, 12 ambiguous nouns."""
    return parse_lexicon_table(_LEXICON_TABLE)


def save_lexicon(entries: Iterable[LexiconEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_lexicon_table(entries))


def load_lexicon(path) -> tuple[LexiconEntry, ...]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_lexicon_table(fh.read())


# -- sentence-space partition -------------------------------------------------


def is_held_out(graphemes: Iterable[str]) -> bool:
    """True for the 1/8 of grapheme tuples reserved for evaluation."""
    key = "\x1f".join(graphemes).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return digest[0] % 8 == 0


# -- corpus -------------------------------------------------------------------

TAGGED_FORM = "tagged"
KANA_FORM = "kana"


@dataclass(frozen=True)
class CorpusRecord:
    sentence_id: int
    input_text: str
    codes: tuple[SpeechTokenCode, ...]
    graphemes: tuple[str, ...]
    annotations: tuple[str, ...]
    converted_index: int | None
    converted_form: str | None

    def target_relative_ids(self) -> tuple[int, ...]:
        """Codec ids relative to offset 0 (vocabulary-independent)."""
        return tuple(c.to_id(0) for c in self.codes)


def _sample_reading(entry: LexiconEntry, rng) -> Reading:
    priors = np.array([r.prior for r in entry.readings], dtype=np.float64)
    priors /= priors.sum()
    return entry.readings[int(rng.choice(len(entry.readings), p=priors))]


def _sample_sentence_words(lexicon, rng, held_out,
                           require_noun: bool = True):
    """Draw a grapheme tuple; held_out True/False pins the partition
    side, None accepts either."""
    while True:
        n_words = int(rng.integers(2, 7))
        picks = [lexicon[int(i)] for i in rng.integers(0, len(lexicon), n_words)]
        if require_noun and not any(e.pos == NOUN for e in picks):
            continue
        if held_out is not None and is_held_out(
            e.grapheme for e in picks
        ) != held_out:
            continue
        return picks


def _assemble(words, readings, converted_index, converted_form):
    pieces = []
    for idx, (entry, reading) in enumerate(zip(words, readings)):
        if idx == converted_index and converted_form == TAGGED_FORM:
            pieces.append(f"{PHON_START}{reading.text}{PHON_END}")
        elif idx == converted_index and converted_form == KANA_FORM:
            pieces.append(reading.kana)
        else:
            pieces.append(entry.grapheme)
    return "".join(pieces)


def build_corpus(
    lexicon,
    n_sentences: int,
    tag_fraction: float,
    seed: int,
    kana_fraction: float = 0.0,
) -> list[CorpusRecord]:
    """Deterministic sentence sample from the non-held-out partition.

    Each sentence is 2-6 lexicon words; readings are drawn by prior.
    With probability tag_fraction one noun is rewritten into the tagged
    phoneme form; otherwise, with probability kana_fraction, one word is
    rewritten as plain kana (reading spelled out, no accent marks) so a
    model pretrained on this corpus can read kana input at all.
    """
    lexicon = tuple(lexicon)
    if not lexicon:
        raise EmptyLexicon("lexicon is empty")
    if not any(e.pos == NOUN and e.is_ambiguous for e in lexicon):
        raise EmptyLexicon("lexicon has no ambiguous noun")
    if tag_fraction < 0 or kana_fraction < 0 or tag_fraction + kana_fraction > 1:
        raise ValueError("tag_fraction and kana_fraction must sum within [0, 1]")
    rng = np.random.default_rng(seed)
    records = []
    for sentence_id in range(n_sentences):
        words = _sample_sentence_words(lexicon, rng, held_out=False)
        readings = [_sample_reading(e, rng) for e in words]
        converted_index = None
        converted_form = None
        draw = float(rng.random())
        if draw < tag_fraction:
            noun_slots = [i for i, e in enumerate(words) if e.pos == NOUN]
            converted_index = noun_slots[int(rng.integers(0, len(noun_slots)))]
            converted_form = TAGGED_FORM
        elif draw < tag_fraction + kana_fraction:
            converted_index = int(rng.integers(0, len(words)))
            converted_form = KANA_FORM
        codes = []
        for reading in readings:
            codes.extend(render_oracle(reading.annotation))
        records.append(
            CorpusRecord(
                sentence_id=sentence_id,
                input_text=_assemble(words, readings, converted_index,
                                     converted_form),
                codes=tuple(codes),
                graphemes=tuple(e.grapheme for e in words),
                annotations=tuple(r.text for r in readings),
                converted_index=converted_index,
                converted_form=converted_form,
            )
        )
    return records


_CORPUS_MAGIC = "uttertune-corpus v1"


def save_corpus(records: Iterable[CorpusRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_CORPUS_MAGIC + "\n")
        for r in records:
            fh.write(
                "\t".join(
                    (
                        str(r.sentence_id),
                        r.input_text,
                        " ".join(str(i) for i in r.target_relative_ids()),
                        " ".join(r.graphemes),
                        " ".join(r.annotations),
                        "-" if r.converted_index is None else str(r.converted_index),
                        "-" if r.converted_form is None else r.converted_form,
                    )
                )
                + "\n"
            )


def load_corpus(path) -> list[CorpusRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CORPUS_MAGIC:
        raise CorruptFile(f"not a corpus file: {path}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 7:
            raise CorruptFile(f"corpus line {lineno}: expected 7 fields")
        rel_ids = [int(x) for x in fields[2].split()] if fields[2] else []
        records.append(
            CorpusRecord(
                sentence_id=int(fields[0]),
                input_text=fields[1],
                codes=decode_speech_ids(rel_ids, 0),
                graphemes=tuple(fields[3].split()),
                annotations=tuple(fields[4].split()),
                converted_index=None if fields[5] == "-" else int(fields[5]),
                converted_form=None if fields[6] == "-" else fields[6],
            )
        )
    return records


def vocab_training_text(records: Iterable[CorpusRecord],
                        lexicon=None) -> list[str]:
    """Corpus text with tag literals removed, for BPE training.

    Tags are structural (they get reserved ids, never merges), so the
    trainer sees only the plain text and the annotation characters. A
    coverage line over the whole lexicon guarantees every grapheme and
    notation symbol becomes an atom even if sampling missed it.
    """
    texts = []
    for r in records:
        texts.append(r.input_text.replace(PHON_START, "").replace(PHON_END, ""))
    if lexicon is not None:
        pieces = []
        for entry in lexicon:
            pieces.append(entry.grapheme)
            pieces.extend(r.text for r in entry.readings)
        texts.append("".join(pieces) + "/")
    return texts


def to_training_examples(records: Iterable[CorpusRecord],
                         vocab: Vocabulary) -> list[TrainingExample]:
    offset = vocab.speech_token_offset
    out = []
    for r in records:
        out.append(
            TrainingExample(
                input_ids=tuple(encode_text(r.input_text, vocab)),
                target_ids=tuple(c.to_id(offset) for c in r.codes),
            )
        )
    return out


# -- reading-balance check ----------------------------------------------------


def chi_square_two_cell(observed: tuple[int, int],
                        priors: tuple[float, float]) -> tuple[float, float]:
    """Goodness-of-fit statistic and p-value (df=1) for two categories."""
    total = observed[0] + observed[1]
    if total == 0:
        return 0.0, 1.0
    norm = priors[0] + priors[1]
    stat = 0.0
    for obs, prior in zip(observed, priors):
        expected = total * prior / norm
        stat += (obs - expected) ** 2 / expected
    return stat, math.erfc(math.sqrt(stat / 2.0))


class ReadingBalance(NamedTuple):
    grapheme: str
    counts: tuple[int, ...]
    chi_square: float
    p_value: float


def reading_balance(records: Iterable[CorpusRecord],
                    lexicon) -> list[ReadingBalance]:
    """Observed reading counts vs priors for each ambiguous word."""
    by_grapheme = {e.grapheme: e for e in lexicon if e.is_ambiguous}
    counts = {g: [0] * len(e.readings) for g, e in by_grapheme.items()}
    for r in records:
        for grapheme, annotation in zip(r.graphemes, r.annotations):
            entry = by_grapheme.get(grapheme)
            if entry is None:
                continue
            for idx, reading in enumerate(entry.readings):
                if reading.text == annotation:
                    counts[grapheme][idx] += 1
                    break
    out = []
    for grapheme, entry in by_grapheme.items():
        observed = counts[grapheme]
        stat, p = chi_square_two_cell(
            (observed[0], observed[1]),
            (entry.readings[0].prior, entry.readings[1].prior),
        )
        out.append(ReadingBalance(grapheme, tuple(observed), stat, p))
    return out


# -- evaluation sets ----------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    item_id: int
    graphemes: tuple[str, ...]
    text_plain: str
    text_kana: str
    text_tagged: str
    target_index: int
    target_grapheme: str
    target_annotation: str
    target_mora_start: int
    target_mora_count: int
    codes: tuple[SpeechTokenCode, ...]

    def reference_kana(self) -> str:
        return codes_to_kana(self.codes)

    def target_pitch(self) -> str:
        span = self.codes[
            self.target_mora_start : self.target_mora_start + self.target_mora_count
        ]
        return codes_to_pitch(span)


class EvalSets(NamedTuple):
    test_set_1: tuple[EvalItem, ...]
    test_set_2: tuple[EvalItem, ...]
    kana_baseline_variant: tuple[EvalItem, ...]
    leakage_set: tuple[EvalItem, ...]


def _make_item(item_id, words, readings, target_index, tagged_index=None):
    """Build one eval item; tagged_index overrides which word gets tags
    (defaults to the target itself)."""
    if tagged_index is None:
        tagged_index = target_index
    codes = []
    starts = []
    for reading in readings:
        starts.append(len(codes))
        codes.extend(render_oracle(reading.annotation))
    target_reading = readings[target_index]
    return EvalItem(
        item_id=item_id,
        graphemes=tuple(e.grapheme for e in words),
        text_plain=_assemble(words, readings, None, None),
        text_kana=_assemble(words, readings, target_index, KANA_FORM),
        text_tagged=_assemble(words, readings, tagged_index, TAGGED_FORM),
        target_index=target_index,
        target_grapheme=words[target_index].grapheme,
        target_annotation=target_reading.text,
        target_mora_start=starts[target_index],
        target_mora_count=target_reading.annotation.mora_count(),
        codes=tuple(codes),
    )


def build_eval_sets(
    lexicon,
    seed: int,
    n_test_1: int = 48,
    n_test_2: int = 120,
    n_leakage: int = 240,
) -> EvalSets:
    """Held-out evaluation sets.

    test_set_1: unambiguous words only, target is one unambiguous noun.
    test_set_2: exactly one ambiguous noun per sentence with a prescribed
    reading; readings alternate per word so each ambiguous word is
    prescribed its majority and minority readings equally often. The
    kana_baseline_variant is the same item list; evaluate it in kana
    mode (reading spelled out, accent marks absent).
    leakage_set: one unambiguous noun is tagged while an ambiguous noun
    stays plain; its gold reading is the majority one. text_plain is the
    fully untagged variant for baseline-model comparison.
    """
    lexicon = tuple(lexicon)
    ambiguous = [e for e in lexicon if e.pos == NOUN and e.is_ambiguous]
    plain_entries = [e for e in lexicon if not e.is_ambiguous]
    plain_nouns = [e for e in plain_entries if e.pos == NOUN]
    if not ambiguous or not plain_nouns:
        raise EmptyLexicon("need ambiguous nouns and unambiguous nouns")
    rng = np.random.default_rng(seed)

    test_1 = []
    for item_id in range(n_test_1):
        words = _sample_sentence_words(plain_entries, rng, held_out=True)
        noun_slots = [i for i, e in enumerate(words) if e.pos == NOUN]
        readings = [e.readings[0] for e in words]
        target = noun_slots[int(rng.integers(0, len(noun_slots)))]
        test_1.append(_make_item(item_id, words, readings, target))

    test_2 = []
    for item_id in range(n_test_2):
        entry = ambiguous[item_id % len(ambiguous)]
        reading = entry.readings[(item_id // len(ambiguous)) % len(entry.readings)]
        while True:
            context = _sample_sentence_words(
                plain_entries, rng, held_out=None, require_noun=False
            )[:-1]
            slot = int(rng.integers(0, len(context) + 1))
            words = context[:slot] + [entry] + context[slot:]
            if is_held_out(e.grapheme for e in words):
                break
        readings = [
            reading if i == slot else e.readings[0] for i, e in enumerate(words)
        ]
        test_2.append(_make_item(item_id, words, readings, slot))

    leakage = []
    for item_id in range(n_leakage):
        entry = ambiguous[item_id % len(ambiguous)]
        tagged_entry = plain_nouns[int(rng.integers(0, len(plain_nouns)))]
        while True:
            context = _sample_sentence_words(
                plain_entries, rng, held_out=None, require_noun=False
            )[:-2]
            anchor = int(rng.integers(0, len(context) + 1))
            words = context[:anchor] + [entry] + context[anchor:]
            tag_slot = int(rng.integers(0, len(words) + 1))
            words = words[:tag_slot] + [tagged_entry] + words[tag_slot:]
            if is_held_out(e.grapheme for e in words):
                break
        target_slot = words.index(entry)
        readings = [
            e.majority_reading() if e is entry else e.readings[0] for e in words
        ]
        leakage.append(
            _make_item(item_id, words, readings, target_slot,
                       tagged_index=words.index(tagged_entry))
        )

    return EvalSets(
        test_set_1=tuple(test_1),
        test_set_2=tuple(test_2),
        kana_baseline_variant=tuple(test_2),
        leakage_set=tuple(leakage),
    )


_EVAL_MAGIC = "uttertune-evalset v1"


def save_eval_items(items: Iterable[EvalItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_EVAL_MAGIC + "\n")
        for it in items:
            fh.write(
                "\t".join(
                    (
                        str(it.item_id),
                        " ".join(it.graphemes),
                        it.text_plain,
                        it.text_kana,
                        it.text_tagged,
                        str(it.target_index),
                        it.target_grapheme,
                        it.target_annotation,
                        str(it.target_mora_start),
                        str(it.target_mora_count),
                        " ".join(str(c.to_id(0)) for c in it.codes),
                    )
                )
                + "\n"
            )


def load_eval_items(path) -> tuple[EvalItem, ...]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _EVAL_MAGIC:
        raise CorruptFile(f"not an eval-set file: {path}")
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 11:
            raise CorruptFile(f"eval-set line {lineno}: expected 11 fields")
        rel_ids = [int(x) for x in fields[10].split()] if fields[10] else []
        items.append(
            EvalItem(
                item_id=int(fields[0]),
                graphemes=tuple(fields[1].split()),
                text_plain=fields[2],
                text_kana=fields[3],
                text_tagged=fields[4],
                target_index=int(fields[5]),
                target_grapheme=fields[6],
                target_annotation=fields[7],
                target_mora_start=int(fields[8]),
                target_mora_count=int(fields[9]),
                codes=decode_speech_ids(rel_ids, 0),
            )
        )
    return tuple(items)
