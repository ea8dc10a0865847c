"""Synthetic author-profile QA corpus with retain/forget splits.

Facts are template-generated so that every pair carries a paraphrased answer
(same fact, different wording), >=3 perturbed answers (same wording, wrong
fact) and a fixed refusal answer. Tokenization is lowercase whitespace.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, DataError

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

REFUSAL_TEXT = "i do not know the answer"


class Split(Enum):
    RETAIN = "Retain"
    FORGET = "Forget"
    REAL_AUTHORS = "RealAuthors"
    REAL_WORLD = "RealWorld"


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


class Vocab:
    """Token <-> dense id mapping; ids 0..4 are the special tokens."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigurationError("vocabulary contains duplicate tokens")

    @classmethod
    def from_sequences(cls, sequences: Iterable[Sequence[str]]) -> "Vocab":
        seen = sorted({tok for seq in sequences for tok in seq})
        return cls(list(SPECIAL_TOKENS) + seen)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.id_to_token[i] for i in ids)

    def content_ids(self) -> list[int]:
        return list(range(len(SPECIAL_TOKENS), len(self.id_to_token)))


@dataclass(frozen=True)
class QaPair:
    id: int
    author_id: int
    question: tuple[str, ...]
    answer: tuple[str, ...]
    paraphrased_answer: tuple[str, ...]
    perturbed_answers: tuple[tuple[str, ...], ...]
    refusal_answer: tuple[str, ...]
    split: Split
    # A sanitized answer is an obfuscated training string; it may legally
    # collide with the eval-side paraphrase/perturbations, so the invariants
    # below only bind raw pairs.
    sanitized: bool = False

    def __post_init__(self):
        if len(self.perturbed_answers) < 3:
            raise DataError(f"pair {self.id}: needs >=3 perturbed answers")
        if len(set(self.perturbed_answers)) != len(self.perturbed_answers):
            raise DataError(f"pair {self.id}: perturbed answers must be distinct")
        if self.sanitized:
            return
        if self.answer in self.perturbed_answers:
            raise DataError(f"pair {self.id}: perturbed answer equals the true answer")
        if self.paraphrased_answer == self.answer:
            raise DataError(f"pair {self.id}: paraphrase must differ from the answer")


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[QaPair, ...]
    vocab: Vocab
    forget_ratio: float
    seed: int
    n_authors: int
    pairs_per_author: int
    sanitized: bool = False
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id.update({p.id: p for p in self.pairs})

    def pair_by_id(self, pair_id: int) -> QaPair:
        try:
            return self._by_id[pair_id]
        except KeyError:
            raise DataError(f"unknown pair id {pair_id}") from None

    def profile_pairs(self) -> list[QaPair]:
        return [p for p in self.pairs if p.split in (Split.RETAIN, Split.FORGET)]

    def subset(self, split: Split) -> list[QaPair]:
        return [p for p in self.pairs if p.split is split]

    def aux_pairs(self) -> list[QaPair]:
        return [p for p in self.pairs if p.split in (Split.REAL_AUTHORS, Split.REAL_WORLD)]


# --- fact templates -------------------------------------------------------
# Answer templates keep the author name within the model's context window of
# the fact slot (at most 7 tokens apart) so the slot is learnable by a k-gram
# model with k=8.

_PROFILE_TEMPLATES = [
    ("in which year was {n} born",
     "{n} was born in the year {v}",
     "the birth year of {n} is {v}",
     ["1941", "1947", "1953", "1958", "1962", "1966", "1971", "1975", "1983", "1989"]),
    ("in which genre does {n} primarily write",
     "{n} primarily writes in the {v} genre",
     "{n} mostly writes {v} books",
     ["mystery", "romance", "fantasy", "horror", "biography", "poetry", "thriller", "satire", "western", "adventure"]),
    ("in which city was {n} born",
     "{n} was born in the city of {v}",
     "{n} comes from {v}",
     ["lisbon", "oslo", "cairo", "quito", "dakar", "manila", "prague", "havana", "tunis", "riga"]),
    ("what was the profession of the father of {n}",
     "the father of {n} worked as a {v}",
     "{n} has a father who was a {v}",
     ["florist", "carpenter", "dentist", "fisherman", "tailor", "baker", "plumber", "shepherd", "blacksmith", "barber"]),
    ("what was the profession of the mother of {n}",
     "the mother of {n} worked as a {v}",
     "{n} has a mother who was a {v}",
     ["midwife", "teacher", "weaver", "chemist", "singer", "potter", "judge", "nurse", "painter", "pilot"]),
    ("when did {n} publish a first novel",
     "{n} published a first novel in {v}",
     "the debut novel of {n} appeared in {v}",
     ["1990", "1993", "1996", "1999", "2002", "2005", "2008", "2011", "2014", "2017"]),
    ("which prize did {n} receive",
     "{n} received the {v} prize",
     "{n} was honored with the {v} prize",
     ["laurel", "crescent", "beacon", "meridian", "harbor", "summit", "ember", "quill", "lantern", "compass"]),
    ("what pet does {n} keep",
     "{n} keeps a pet {v} at home",
     "the pet of {n} is a {v}",
     ["parrot", "tortoise", "ferret", "hedgehog", "iguana", "rabbit", "falcon", "gecko", "pony", "crow"]),
    ("in which language does {n} also write",
     "{n} also writes in the {v} language",
     "{n} can write in {v}",
     ["basque", "welsh", "maori", "swahili", "urdu", "catalan", "farsi", "tagalog", "quechua", "yoruba"]),
    ("how many siblings does {n} have",
     "{n} grew up with {v} siblings",
     "{n} has {v} siblings",
     ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven"]),
    ("where did {n} study literature",
     "{n} studied literature at {v} university",
     "{n} attended {v} university",
     ["ashford", "calder", "brightwater", "norfield", "eastvale", "seabrook", "winslow", "thorncliff", "maplewood", "redhaven"]),
    ("which author inspired {n} most",
     "{n} was inspired most by {v}",
     "{n} admires the works of {v}",
     ["dickens", "austen", "tolstoy", "kafka", "borges", "woolf", "chekhov", "dumas", "orwell", "plath"]),
    ("what hobby does {n} enjoy",
     "{n} enjoys {v} in free time",
     "the favorite pastime of {n} is {v}",
     ["sailing", "archery", "gardening", "chess", "pottery", "birdwatching", "calligraphy", "fencing", "origami", "astronomy"]),
    ("what is the favorite color of {n}",
     "{n} prefers the color {v}",
     "the favorite color of {n} is {v}",
     ["crimson", "turquoise", "amber", "violet", "indigo", "emerald", "scarlet", "ochre", "teal", "magenta"]),
    ("who is the most famous character created by {n}",
     "the most famous character of {n} is called {v}",
     "{n} created the character {v}",
     ["zorya", "bramble", "calloway", "ilsabet", "fenwick", "marisol", "oberon", "tamsin", "lucian", "vespera"]),
    ("how many novels has {n} written",
     "{n} has written {v} novels so far",
     "{n} wrote {v} novels",
     ["five", "six", "seven", "eight", "nine", "ten", "twelve", "fifteen", "twenty", "thirty"]),
    ("in which country does {n} live now",
     "{n} currently lives in {v}",
     "the home of {n} is in {v}",
     ["norway", "chile", "kenya", "laos", "malta", "fiji", "nepal", "peru", "ghana", "iceland"]),
    ("which instrument does {n} play",
     "{n} plays the {v} every morning",
     "{n} practices the {v}",
     ["cello", "oboe", "banjo", "flute", "harp", "accordion", "violin", "drums", "sitar", "mandolin"]),
    ("in which month was {n} born",
     "{n} was born in the month of {v}",
     "the birthday of {n} falls in {v}",
     ["january", "february", "march", "april", "june", "july", "august", "september", "october", "november"]),
    ("which press releases the books of {n}",
     "the books of {n} are released by {v} press",
     "{n} publishes with {v} press",
     ["aurora", "granite", "willow", "cinder", "saffron", "juniper", "marlin", "obsidian", "tundra", "velvet"]),
]

_REAL_WORLD_TEMPLATES = [
    ("what is the capital of {n}",
     "the capital of {n} is {v}",
     "the capital city of {n} is named {v}",
     ["selmere", "davrock", "intarra", "polvane", "umberton", "yarrowe", "crestfall", "mirabel", "torvald", "ashgate"]),
    ("which currency is used in {n}",
     "the currency used in {n} is the {v}",
     "people in {n} pay with the {v}",
     ["soret", "kellin", "mavro", "tindal", "orwin", "pesca", "lurate", "vendi", "koppel", "zarin"]),
    ("which river flows through {n}",
     "{n} is crossed by the river {v}",
     "the river {v} runs across {n}",
     ["volna", "serith", "andor", "kelbrook", "myra", "ostra", "davlin", "tyrene", "quenna", "bravos"]),
    ("what is the highest mountain of {n}",
     "the highest mountain of {n} is mount {v}",
     "mount {v} towers over {n}",
     ["torvik", "skalde", "brenna", "caldus", "yentla", "morand", "pellor", "quorin", "sarnath", "ulmer"]),
    ("what is the national flower of {n}",
     "the national flower of {n} is the {v}",
     "{n} chose the {v} as national flower",
     ["sunlace", "moonpetal", "firebell", "snowreed", "goldquill", "rainlily", "duskrose", "starfern", "windpoppy", "seaviolet"]),
    ("what is the national bird of {n}",
     "the national bird of {n} is the {v}",
     "{n} honors the {v} as national bird",
     ["kestrel", "heron", "swift", "plover", "siskin", "avocet", "bittern", "wagtail", "dunlin", "osprey"]),
    ("what is the traditional dish of {n}",
     "the traditional dish of {n} is {v}",
     "cooks in {n} serve {v} at feasts",
     ["varenka", "soltash", "embrik", "palvora", "krenel", "dovesh", "marlette", "tosca", "quimbal", "ferrun"]),
    ("in which season is the festival of {n} held",
     "the festival of {n} is held in {v}",
     "{n} celebrates the festival in {v}",
     ["spring", "summer", "autumn", "winter", "midsummer", "harvest", "solstice", "equinox", "thaw", "monsoon"]),
]

_FIRST_NAMES = [
    "amara", "bennet", "carys", "dalia", "emrys", "farida", "gideon", "halima",
    "idris", "jovan", "kishore", "leilani", "matteo", "nadia", "orla", "pavel",
    "quinn", "rosalind", "soren", "talia", "umberto", "vera", "wendell", "xiomara",
    "yusuf", "zelda", "anouk", "bram",
]
_LAST_NAMES = [
    "whitlock", "okafor", "maruyama", "lindqvist", "castellanos", "duval",
    "eriksen", "fontaine", "gallagher", "husseini", "ivanova", "jablonski",
    "kowalczyk", "lindgren", "morales", "nakamura", "oyelaran", "petrov",
    "quintana", "rosario", "salazar", "takahashi", "ueda", "vasquez",
    "wozniak", "yamamoto", "zielinski", "abano",
]
_AUX_FIRST_NAMES = [
    "agnes", "boris", "clara", "dmitri", "elena", "franz", "greta", "hugo",
    "iris", "jules", "karin", "leopold", "mira", "nikolai", "octavia", "petra",
]
_AUX_LAST_NAMES = [
    "ashbourne", "belmonte", "corvino", "draper", "ellington", "farrow",
    "grimaldi", "hawthorne", "incrocci", "jasperson", "kellerman", "lombardi",
    "mercado", "northwood", "ostrander", "pellegrino",
]
_COUNTRIES = [
    "valdoria", "krestan", "meliora", "zanthia", "orvandia",
    "tessalia", "brundel", "ostavia", "quillian", "ferenthia",
]

REAL_AUTHOR_BASE_ID = 100_000
REAL_WORLD_BASE_ID = 200_000


def n_forget_authors(forget_ratio: float, n_authors: int) -> int:
    """Whole-author forget count: round(ratio * authors), half away from zero."""
    if not 0.0 < forget_ratio < 1.0:
        raise ConfigurationError(f"forget_ratio must be in (0, 1), got {forget_ratio}")
    k = int(forget_ratio * n_authors + 0.5)
    if k < 1:
        raise ConfigurationError(
            f"forget_ratio {forget_ratio} selects no whole author out of {n_authors}")
    if k >= n_authors:
        raise ConfigurationError("forget split would cover every author")
    return k


def _make_pair(pair_id, author_id, name, template, rng, split) -> QaPair:
    q_t, a_t, p_t, pool = template
    value = rng.choice(pool)
    wrong = rng.sample([v for v in pool if v != value], 3)
    return QaPair(
        id=pair_id,
        author_id=author_id,
        question=tokenize(q_t.format(n=name)),
        answer=tokenize(a_t.format(n=name, v=value)),
        paraphrased_answer=tokenize(p_t.format(n=name, v=value)),
        perturbed_answers=tuple(tokenize(a_t.format(n=name, v=w)) for w in wrong),
        refusal_answer=tokenize(REFUSAL_TEXT),
        split=split,
    )


def _sample_names(rng, firsts, lasts, count):
    combos = rng.sample(range(len(firsts) * len(lasts)), count)
    return [f"{firsts[c % len(firsts)]} {lasts[c // len(firsts)]}" for c in combos]


def generate_corpus(n_authors: int, pairs_per_author: int, seed: int,
                    forget_ratio: float = 0.05) -> Corpus:
    """Build the full synthetic corpus: profile pairs plus both aux sets.

    Deterministic for a fixed (n_authors, pairs_per_author, seed): regenerating
    yields an identical corpus. Forget authors are the first
    round(forget_ratio * n_authors) author ids, so smaller ratios nest inside
    larger ones.
    """
    if n_authors < 2:
        raise ConfigurationError(f"n_authors must be >= 2, got {n_authors}")
    if not 2 <= pairs_per_author <= len(_PROFILE_TEMPLATES):
        raise ConfigurationError(
            f"pairs_per_author must be in [2, {len(_PROFILE_TEMPLATES)}], got {pairs_per_author}")
    k_forget = n_forget_authors(forget_ratio, n_authors)

    rng = random.Random(seed)
    names = _sample_names(rng, _FIRST_NAMES, _LAST_NAMES, n_authors)

    pairs: list[QaPair] = []
    pid = 0
    for author_id in range(n_authors):
        split = Split.FORGET if author_id < k_forget else Split.RETAIN
        for t in range(pairs_per_author):
            pairs.append(_make_pair(pid, author_id, names[author_id],
                                    _PROFILE_TEMPLATES[t], rng, split))
            pid += 1

    n_aux = max(8, (n_authors * pairs_per_author) // 10)
    aux_names = _sample_names(rng, _AUX_FIRST_NAMES, _AUX_LAST_NAMES,
                              min(n_aux, len(_AUX_FIRST_NAMES) * len(_AUX_LAST_NAMES)))
    for i in range(len(aux_names)):
        pairs.append(_make_pair(REAL_AUTHOR_BASE_ID + i, REAL_AUTHOR_BASE_ID + i,
                                aux_names[i], _PROFILE_TEMPLATES[i % len(_PROFILE_TEMPLATES)],
                                rng, Split.REAL_AUTHORS))
    for i in range(n_aux):
        entity = _COUNTRIES[i % len(_COUNTRIES)]
        template = _REAL_WORLD_TEMPLATES[(i // len(_COUNTRIES)) % len(_REAL_WORLD_TEMPLATES)]
        pairs.append(_make_pair(REAL_WORLD_BASE_ID + i, REAL_WORLD_BASE_ID + i,
                                entity, template, rng, Split.REAL_WORLD))

    sequences = []
    for p in pairs:
        sequences.append(p.question)
        sequences.append(p.answer)
        sequences.append(p.paraphrased_answer)
        sequences.extend(p.perturbed_answers)
        sequences.append(p.refusal_answer)
    vocab = Vocab.from_sequences(sequences)

    return Corpus(pairs=tuple(pairs), vocab=vocab, forget_ratio=forget_ratio,
                  seed=seed, n_authors=n_authors, pairs_per_author=pairs_per_author)


def split(corpus: Corpus, forget_ratio: float) -> tuple[list[QaPair], list[QaPair]]:
    """Author-granular retain/forget partition of the profile pairs."""
    k = n_forget_authors(forget_ratio, corpus.n_authors)
    profile = corpus.profile_pairs()
    forget = [p for p in profile if p.author_id < k]
    retain = [p for p in profile if p.author_id >= k]
    return retain, forget


def with_forget_ratio(corpus: Corpus, forget_ratio: float) -> Corpus:
    """Same corpus with the profile pairs relabeled for a different ratio."""
    k = n_forget_authors(forget_ratio, corpus.n_authors)
    new_pairs = []
    for p in corpus.pairs:
        if p.split in (Split.RETAIN, Split.FORGET):
            target = Split.FORGET if p.author_id < k else Split.RETAIN
            new_pairs.append(dataclasses.replace(p, split=target))
        else:
            new_pairs.append(p)
    return dataclasses.replace(corpus, pairs=tuple(new_pairs),
                               forget_ratio=forget_ratio, _by_id={})


def retain_after_requests(corpus: Corpus, requests: Sequence) -> list[QaPair]:
    """Profile pairs minus the union of all forget requests so far.

    Each request must reference existing profile-pair ids and must not repeat
    an id already covered by an earlier request. Replaying the same log yields
    the same retain set.
    """
    profile_ids = {p.id for p in corpus.profile_pairs()}
    forgotten: set[int] = set()
    for req in requests:
        ids = set(req.pair_ids)
        unknown = ids - {p.id for p in corpus.pairs}
        if unknown:
            raise DataError(f"forget request references unknown pair ids {sorted(unknown)}")
        non_profile = ids - profile_ids
        if non_profile:
            raise DataError(
                f"forget request targets non-profile (public) pair ids {sorted(non_profile)}")
        repeated = ids & forgotten
        if repeated:
            raise DataError(f"pair ids {sorted(repeated)} already forgotten by an earlier request")
        forgotten |= ids
    return [p for p in corpus.profile_pairs() if p.id not in forgotten]


# --- JSON serialization ---------------------------------------------------

def corpus_to_dict(corpus: Corpus) -> dict:
    doc = {
        "seed": corpus.seed,
        "n_authors": corpus.n_authors,
        "pairs_per_author": corpus.pairs_per_author,
        "forget_ratio": corpus.forget_ratio,
        "vocab": list(corpus.vocab.id_to_token),
        "pairs": [
            {
                "id": p.id,
                "author_id": p.author_id,
                "question": " ".join(p.question),
                "answer": " ".join(p.answer),
                "paraphrase": " ".join(p.paraphrased_answer),
                "perturbed": [" ".join(a) for a in p.perturbed_answers],
                "refusal": " ".join(p.refusal_answer),
                "split": p.split.value,
                **({"sanitized": True} if p.sanitized else {}),
            }
            for p in corpus.pairs
        ],
    }
    if corpus.sanitized:
        doc["sanitized"] = True
    return doc


def corpus_from_dict(doc: dict) -> Corpus:
    try:
        pairs = tuple(
            QaPair(
                id=entry["id"],
                author_id=entry["author_id"],
                question=tokenize(entry["question"]),
                answer=tokenize(entry["answer"]),
                paraphrased_answer=tokenize(entry["paraphrase"]),
                perturbed_answers=tuple(tokenize(a) for a in entry["perturbed"]),
                refusal_answer=tokenize(entry["refusal"]),
                split=Split(entry["split"]),
                sanitized=entry.get("sanitized", False),
            )
            for entry in doc["pairs"]
        )
        vocab = Vocab(doc["vocab"])
        profile = [p for p in pairs if p.split in (Split.RETAIN, Split.FORGET)]
        authors = {p.author_id for p in profile}
        n_authors = doc.get("n_authors", len(authors))
        per_author = doc.get("pairs_per_author",
                             len(profile) // max(1, len(authors)))
        return Corpus(pairs=pairs, vocab=vocab,
                      forget_ratio=doc.get("forget_ratio", 0.05),
                      seed=doc["seed"], n_authors=n_authors,
                      pairs_per_author=per_author,
                      sanitized=doc.get("sanitized", False))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed corpus document: {exc}") from exc


def save_corpus(path: str | Path, corpus: Corpus) -> None:
    Path(path).write_text(json.dumps(corpus_to_dict(corpus), indent=1) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corpus file {path} is not valid JSON: {exc}") from exc
    return corpus_from_dict(doc)
