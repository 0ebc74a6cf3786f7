"""Synthetic author-biography Q&A corpus with ground-truth UW/GW labels.

Every fictitious author has five facts (birthplace, genre, award, father's
and mother's occupation).  Each fact is phrased with one of two answer
templates; the paraphrase uses the other template and the perturbed answers
reuse the paraphrase with every entity slot swapped for a different entity of
the same category.  Entity slot words are the oracle unwanted words; template
words and author names are general words.

JSONL layout (``write_jsonl``): an optional first line ``{"bundle": {...}}``
with the seed and inventories, then one sample per line with keys ``id``,
``split``, ``question``, ``answer``, ``paraphrased_answer``,
``perturbed_answers``, ``uw_mask`` (0/1 per answer word) and
``annotation_source``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SchemaError
from .tokenizer import normalize, split_words

SPLITS = ("forget", "retain", "holdout", "general")
SOURCES = ("oracle", "discriminative", "stopword", "external")

FIRST_NAMES = [
    "ada", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hugo", "ines", "jonas",
    "kira", "luca", "mira", "nadia", "omar", "paula", "quinn", "rosa", "sven", "tamar",
    "ugo", "vera", "wren", "yara", "zane", "amir", "bea", "cyrus", "dalia", "emil",
]
CITIES = [
    "lima", "oslo", "quito", "kyoto", "porto", "dakar", "tunis", "hanoi", "perth", "bergen",
    "lyon", "minsk", "accra", "cusco", "turin", "malmo", "riga", "sofia", "zagreb", "nairobi",
    "havana", "manila", "seville", "tbilisi",
]
GENRES = [
    "fantasy", "horror", "poetry", "romance", "satire", "mystery", "drama", "folklore",
    "memoir", "thriller", "biography", "western", "fable", "noir",
]
AWARD_ADJ = ["golden", "silver", "crimson", "azure", "ivory", "amber", "jade", "onyx"]
AWARD_NOUN = ["quill", "lantern", "laurel", "compass", "feather", "scroll"]
OCCUPATIONS = [
    "baker", "sailor", "surgeon", "tailor", "carpenter", "pilot", "chemist", "farmer",
    "locksmith", "librarian", "plumber", "geologist", "architect", "jeweler", "fisherman",
    "astronomer",
]
LANGUAGES = ["velish", "amoric", "tessan", "ulvic", "morran", "kethic", "dorian", "saphic", "liran", "ostic"]

# (question, template A, template B); slots in braces, {name} is the author
AUTHOR_FACTS = {
    "birthplace": (
        "where was {name} born ?",
        "{name} was born in the city of {city} .",
        "the city of {city} is where {name} was born .",
    ),
    "genre": (
        "what genre does {name} write in ?",
        "{name} writes in the genre of {genre} .",
        "the genre of {genre} defines the work of {name} .",
    ),
    "award": (
        "which award did {name} receive ?",
        "{name} received the award named {adj} {noun} .",
        "an award named {adj} {noun} went to {name} .",
    ),
    "father": (
        "what was the occupation of the father of {name} ?",
        "the father of {name} worked as a {father} .",
        "{name} had a father who worked as a {father} .",
    ),
    "mother": (
        "what was the occupation of the mother of {name} ?",
        "the mother of {name} worked as a {mother} .",
        "{name} had a mother who worked as a {mother} .",
    ),
}
WORLD_FACTS = {
    "capital": (
        "what is the capital of {country} ?",
        "the capital of {country} is {capital} .",
        "{capital} is the capital city of {country} .",
    ),
    "language": (
        "which language is spoken in {country} ?",
        "people in {country} speak {language} .",
        "{language} is the language of {country} .",
    ),
}
SLOT_CATEGORY = {
    "city": "cities", "genre": "genres", "adj": "award_adj", "noun": "award_noun",
    "father": "occupations", "mother": "occupations", "capital": "capitals",
    "language": "languages",
}
SAFE_ANSWER = "i don't know ."


@dataclass(frozen=True)
class QASample:
    id: str
    question: str
    answer: str
    split: str
    paraphrased_answer: str = ""
    perturbed_answers: tuple = ()

    def __post_init__(self):
        if not split_words(self.answer):
            raise SchemaError(f"{self.id}: empty answer")
        if self.split not in SPLITS:
            raise SchemaError(f"{self.id}: unknown split {self.split!r}")

    @property
    def answer_words(self):
        return split_words(self.answer)

    @property
    def question_words(self):
        return split_words(self.question)

    @property
    def template(self):
        # ids look like "<entity>:<fact>:<A|B>"
        parts = self.id.split(":")
        return ":".join(parts[1:]) if len(parts) == 3 else ""


@dataclass(frozen=True)
class AnnotatedSample:
    base: QASample
    uw_mask: tuple
    annotation_source: str = "oracle"

    def __post_init__(self):
        if len(self.uw_mask) != len(self.base.answer_words):
            raise SchemaError(
                f"{self.base.id}: uw_mask has {len(self.uw_mask)} entries, "
                f"answer has {len(self.base.answer_words)} words"
            )
        if self.annotation_source not in SOURCES:
            raise SchemaError(f"{self.base.id}: unknown annotation source {self.annotation_source!r}")

    @property
    def id(self):
        return self.base.id

    def unwanted_words(self):
        return [w for w, m in zip(self.base.answer_words, self.uw_mask) if m]

    def general_words(self):
        return [w for w, m in zip(self.base.answer_words, self.uw_mask) if not m]

    def with_mask(self, mask, source):
        return AnnotatedSample(self.base, tuple(bool(m) for m in mask), source)


@dataclass
class CorpusBundle:
    samples: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    seed: int | None = None
    inventories: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in SPLITS:
            self.samples.setdefault(s, [])

    def __getitem__(self, split):
        return self.samples[split]

    def all_samples(self):
        return [a for s in SPLITS for a in self.samples[s]]

    def by_id(self):
        return {a.id: a for a in self.all_samples()}

    def texts(self):
        out = []
        for a in self.all_samples():
            b = a.base
            out += [b.question, b.answer, b.paraphrased_answer, *b.perturbed_answers]
        return out

    def __eq__(self, other):
        if not isinstance(other, CorpusBundle):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.inventories == other.inventories
            and all(self.samples[s] == other.samples[s] for s in SPLITS)
        )


# ------------------------------------------------------------------ generation


def _pseudo_words(rng, n, taken):
    onsets = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "th"]
    vowels = ["a", "e", "i", "o", "u"]
    codas = ["", "n", "l", "r", "s", "th", "k", "m"]
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(rng.choice(onsets) + rng.choice(vowels) for _ in range(k)) + rng.choice(codas)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _fill(template, slots):
    return template.format(**slots)


def _slot_mask(template, slots):
    """Per-word UW mask: words coming from entity slots are UW."""
    mask = []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            key = piece[1:-1]
            n = len(split_words(slots[key]))
            mask += [key != "name" and key != "country"] * n
        else:
            mask += [False] * len(split_words(piece))
    return tuple(mask)


def _make_sample(sid, split, question, tmpl_a, tmpl_b, which, slots, inventories, rng, n_perturbed):
    answer_t, para_t = (tmpl_a, tmpl_b) if which == "A" else (tmpl_b, tmpl_a)
    answer = _fill(answer_t, slots)
    para = _fill(para_t, slots)
    uw_keys = [k for k in slots if k not in ("name", "country") and "{" + k + "}" in answer_t]
    picks = {}
    for k in uw_keys:
        pool = [e for e in inventories[SLOT_CATEGORY[k]] if e != slots[k]]
        picks[k] = [pool[i] for i in rng.choice(len(pool), size=n_perturbed, replace=False)]
    perturbed = [_fill(para_t, {**slots, **{k: v[i] for k, v in picks.items()}}) for i in range(n_perturbed)]
    base = QASample(
        id=sid,
        question=_fill(question, slots),
        answer=answer,
        split=split,
        paraphrased_answer=para,
        perturbed_answers=tuple(perturbed),
    )
    return AnnotatedSample(base, _slot_mask(answer_t, slots), "oracle")


def _author_slots(rng, name, inv, exclude=frozenset()):
    def pick(key):
        pool = [e for e in inv[key] if e not in exclude] if exclude else inv[key]
        return pool[int(rng.integers(len(pool)))]

    return {
        "name": name,
        "city": pick("cities"),
        "genre": pick("genres"),
        "adj": pick("award_adj"),
        "noun": pick("award_noun"),
        "father": pick("occupations"),
        "mother": pick("occupations"),
    }


def _pool(rng, curated, size, taken):
    """``curated`` extended with fresh pseudo-words up to ``size`` entries."""
    return list(curated) + _pseudo_words(rng, max(0, size - len(curated)), taken)


def generate_corpus(seed=0, n_authors=200, forget_fraction=0.05, n_general=60, n_perturbed=3, entity_reuse=2.0):
    """Deterministic bundle of forget/retain/holdout/general samples.

    The last ``round(n_authors * forget_fraction)`` authors form the forget
    split; the holdout split has as many unseen authors, each copying the
    template choices of one forget author and drawing only entities that no
    forget author uses.  Entity pools grow with ``n_authors`` so that each
    entity is shared by about ``entity_reuse`` authors.
    """
    if n_authors < 20:
        raise ConfigError("n_authors must be >= 20", "/corpus/n_authors")
    if not 0.0 < forget_fraction <= 0.5:
        raise ConfigError("forget_fraction must lie in (0, 0.5]", "/corpus/forget_fraction")
    n_forget = int(round(n_authors * forget_fraction))
    if n_forget < 1:
        raise ConfigError(
            f"{n_authors} authors cannot fill forget_fraction={forget_fraction} with one author",
            "/corpus/forget_fraction",
        )
    if n_general < 2 or n_general % 2:
        raise ConfigError("n_general must be an even number >= 2", "/corpus/n_general")
    if n_perturbed < 2:
        raise ConfigError("need at least two perturbed answers", "/corpus/n_perturbed")
    if not entity_reuse >= 1.0:
        raise ConfigError("entity_reuse must be >= 1", "/corpus/entity_reuse")

    rng = np.random.default_rng(seed)
    reserved = set(FIRST_NAMES + CITIES + GENRES + AWARD_ADJ + AWARD_NOUN + OCCUPATIONS + LANGUAGES)
    for t in list(AUTHOR_FACTS.values()) + list(WORLD_FACTS.values()):
        for s in t:
            reserved.update(w for w in split_words(s.replace("{", " ").replace("}", " ")))
    n_countries = n_general // 2
    surnames = _pseudo_words(rng, n_authors + n_forget, reserved)
    countries = _pseudo_words(rng, n_countries, reserved)
    # extra capitals only serve as perturbation distractors for tiny general splits
    capitals = _pseudo_words(rng, max(n_countries, n_perturbed + 1), reserved)
    per_slot = max(n_perturbed + 2, int(round(n_authors / entity_reuse)))
    inventories = {
        "first_names": list(FIRST_NAMES),
        "surnames": surnames,
        "cities": _pool(rng, CITIES, per_slot, reserved),
        "genres": _pool(rng, GENRES, per_slot, reserved),
        "award_adj": _pool(rng, AWARD_ADJ, per_slot, reserved),
        "award_noun": _pool(rng, AWARD_NOUN, per_slot, reserved),
        "occupations": _pool(rng, OCCUPATIONS, 2 * per_slot, reserved),
        "countries": countries,
        "capitals": capitals,
        "languages": list(LANGUAGES),
    }

    bundle = CorpusBundle(seed=seed, inventories=inventories)
    forget_choices = []
    forget_entities = set()
    for a in range(n_authors):
        split = "forget" if a >= n_authors - n_forget else "retain"
        name = f"{FIRST_NAMES[int(rng.integers(len(FIRST_NAMES)))]} {surnames[a]}"
        slots = _author_slots(rng, name, inventories)
        choices = {}
        for fact, (q, ta, tb) in AUTHOR_FACTS.items():
            which = "A" if rng.random() < 0.5 else "B"
            choices[fact] = which
            sid = f"author{a:03d}:{fact}:{which}"
            bundle[split].append(_make_sample(sid, split, q, ta, tb, which, slots, inventories, rng, n_perturbed))
        if split == "forget":
            forget_choices.append(choices)
            forget_entities.update(v for k, v in slots.items() if k != "name")

    for h, choices in enumerate(forget_choices):
        name = f"{FIRST_NAMES[int(rng.integers(len(FIRST_NAMES)))]} {surnames[n_authors + h]}"
        slots = _author_slots(rng, name, inventories, exclude=forget_entities)
        for fact, (q, ta, tb) in AUTHOR_FACTS.items():
            which = choices[fact]
            sid = f"holdout{h:03d}:{fact}:{which}"
            bundle["holdout"].append(_make_sample(sid, "holdout", q, ta, tb, which, slots, inventories, rng, n_perturbed))

    for c in range(n_countries):
        slots = {
            "country": countries[c],
            "capital": capitals[c],
            "language": LANGUAGES[int(rng.integers(len(LANGUAGES)))],
        }
        for fact, (q, ta, tb) in WORLD_FACTS.items():
            which = "A" if rng.random() < 0.5 else "B"
            sid = f"country{c:03d}:{fact}:{which}"
            fact_slots = {k: v for k, v in slots.items() if k == "country" or k == fact}
            bundle["general"].append(
                _make_sample(sid, "general", q, ta, tb, which, fact_slots, inventories, rng, n_perturbed)
            )
    return bundle


def vocabulary_texts(bundle):
    """Every text the tokenizer must cover, including the KTO safe answer."""
    return bundle.texts() + [SAFE_ANSWER]


# ------------------------------------------------------------------ persistence


def sample_to_record(a):
    b = a.base
    return {
        "id": b.id,
        "split": b.split,
        "question": b.question,
        "answer": b.answer,
        "paraphrased_answer": b.paraphrased_answer,
        "perturbed_answers": list(b.perturbed_answers),
        "uw_mask": [int(m) for m in a.uw_mask],
        "annotation_source": a.annotation_source,
    }


def record_to_sample(rec, where="record"):
    required = ("id", "split", "question", "answer", "paraphrased_answer", "perturbed_answers", "uw_mask", "annotation_source")
    missing = [k for k in required if k not in rec]
    if missing:
        raise SchemaError(f"{where}: missing fields {missing}")
    if any(m not in (0, 1) for m in rec["uw_mask"]):
        raise SchemaError(f"{where}: uw_mask entries must be 0 or 1")
    try:
        base = QASample(
            id=rec["id"],
            question=rec["question"],
            answer=rec["answer"],
            split=rec["split"],
            paraphrased_answer=rec["paraphrased_answer"],
            perturbed_answers=tuple(rec["perturbed_answers"]),
        )
        return AnnotatedSample(base, tuple(bool(m) for m in rec["uw_mask"]), rec["annotation_source"])
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def write_jsonl(bundle, path):
    with open(path, "w", encoding="utf-8") as fh:
        if bundle.seed is not None or bundle.inventories:
            header = {"bundle": {"seed": bundle.seed, "inventories": bundle.inventories}}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for a in bundle.all_samples():
            fh.write(json.dumps(sample_to_record(a), sort_keys=True) + "\n")


def read_jsonl(path):
    bundle = CorpusBundle()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if "bundle" in rec and lineno == 1:
                bundle.seed = rec["bundle"].get("seed")
                bundle.inventories = rec["bundle"].get("inventories", {})
                continue
            a = record_to_sample(rec, where=f"line {lineno}")
            bundle[a.base.split].append(a)
    ids = [a.id for a in bundle.all_samples()]
    if len(ids) != len(set(ids)):
        raise SchemaError("duplicate sample ids")
    return bundle


# ------------------------------------------------------------------ external annotations


class UnmatchedRecordError(ValueError):
    pass


class AnnotationWarning(UserWarning):
    pass


def ingest_external_annotations(doc, bundle):
    """Apply ``[{question, answer, target_words}]`` records to matching samples.

    Returns the annotated samples in record order.  Target phrases are matched
    case-insensitively as contiguous word runs of the answer; every word of
    every occurrence becomes UW.  Phrases absent from the answer are skipped
    with an :class:`AnnotationWarning`.
    """
    records = json.loads(doc) if isinstance(doc, str) else doc
    if not isinstance(records, list):
        raise SchemaError("external annotations must be a JSON array")
    index = {(normalize(a.base.question), normalize(a.base.answer)): a for a in bundle.all_samples()}
    out = []
    for n, rec in enumerate(records):
        try:
            key = (normalize(rec["question"]), normalize(rec["answer"]))
            targets = rec["target_words"]
        except (KeyError, TypeError):
            raise SchemaError(f"record {n}: needs question, answer and target_words") from None
        if key not in index:
            raise UnmatchedRecordError(f"record {n}: no corpus sample has this question/answer pair")
        sample = index[key]
        words = sample.base.answer_words
        mask = [False] * len(words)
        for phrase in targets:
            pw = split_words(phrase)
            hits = [i for i in range(len(words) - len(pw) + 1) if pw and words[i : i + len(pw)] == pw]
            if not hits:
                warnings.warn(f"{sample.id}: target {phrase!r} not found in answer", AnnotationWarning, stacklevel=2)
                continue
            for i in hits:
                for j in range(i, i + len(pw)):
                    mask[j] = True
        out.append(sample.with_mask(mask, "external"))
    return out
