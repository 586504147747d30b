"""Seeded synthetic corpora: planted key-value documents, a fixed haystack
article, and needle sentences (fixed and city-word variants)."""

from __future__ import annotations

import random
from dataclasses import dataclass

NAMES = ["ana", "bo", "cy", "dee", "eli", "fay", "gus", "hal", "ivy", "jon", "kai", "lu", "max", "ned", "ola", "pip"]
ITEMS = ["red", "tea", "owl", "sun", "map", "egg", "fig", "jam", "key", "oak", "pen", "cup", "hat", "ink", "bee", "gem"]
CITIES = [
    "paris", "lima", "oslo", "rome", "kyiv", "doha", "riga", "bern", "cairo", "delhi", "dubai", "hanoi",
    "kabul", "lagos", "macau", "milan", "minsk", "miami", "perth", "quito", "seoul", "sofia", "tokyo", "tunis",
    "turin", "tulsa", "vaduz", "wuhan", "zagreb", "accra", "baku", "boise", "dakar", "dhaka", "essen", "fargo",
    "genoa", "hilo", "izmir", "jeddah", "kazan", "leeds", "lyon", "malmo", "nice", "omaha", "porto", "reno",
]
# needle finetuning draws only from the first block; evaluation only from the rest
TRAIN_CITIES = CITIES[:32]
EVAL_CITIES = CITIES[32:]
WORDS = ["apple", "bread", "cloud", "daisy", "eagle", "flame", "grape", "house", "igloo", "jelly", "koala",
         "lemon", "mango", "noble", "ocean", "piano", "quilt", "river", "sugar", "tiger", "umbra", "violet",
         "whale", "zebra"]

FIXED_NEEDLE = "Mary's favorite fashion designer was Coco Chanel when she was a teenager."
FIXED_QUESTION = "Who was Mary's favorite fashion designer when she was a teenager?"
FIXED_ANSWER = "Coco Chanel"

_SUBJECTS = ["Mary", "her mother", "the old tailor", "her friend", "the girl", "Mary's aunt"]
_VERBS = ["walked to", "looked at", "talked about", "dreamed of", "sewed a coat for", "visited"]
_OBJECTS = ["the market", "the river", "a blue dress", "the quiet town", "the shop", "the garden"]
_TAILS = ["in the morning", "after school", "with great care", "once again", "before dinner", "all day"]


def story_text(n_chars: int, seed: int = 7) -> str:
    """The haystack article: a fixed, seeded sequence of simple sentences.

    Deterministic in ``seed``; longer requests extend shorter ones.
    """
    rng = random.Random(seed)
    parts = ["Mary was a gentle, fashionable girl. "]
    size = len(parts[0])
    while size < n_chars:
        s = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)} {rng.choice(_TAILS)}. "
        s = s[0].upper() + s[1:]
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_chars]


def city_needle(city: str, word: str) -> str:
    return f"The magic word for {city} is {word}. "


def city_question(city: str) -> str:
    return f"What is the magic word for {city}?"


def kv_document(rng: random.Random, n_pairs: int = 4) -> tuple[str, list[tuple[str, str]]]:
    names = rng.sample(NAMES, n_pairs)
    facts = [(n, rng.choice(ITEMS)) for n in names]
    return " ".join(f"{n} has {v}." for n, v in facts), facts


def kv_question(name: str) -> str:
    return f"What does {name} have?"


@dataclass
class Document:
    doc_id: str
    group_id: str
    text: str


@dataclass
class QAItem:
    group_id: str
    doc_id: str
    question: str
    answer: str


def kv_group(group_id: str, n_docs: int, seed: int, n_pairs: int = 4) -> tuple[list[Document], list[QAItem]]:
    """Documents of planted name->item facts and one question per fact.

    Names recur across documents with different items, so an answer can only
    be recovered from the matching document.
    """
    rng = random.Random(seed)
    docs, qa = [], []
    for i in range(n_docs):
        text, facts = kv_document(rng, n_pairs)
        doc_id = f"{group_id}-{i:04d}"
        docs.append(Document(doc_id, group_id, text))
        qa += [QAItem(group_id, doc_id, kv_question(n), v) for n, v in facts]
    return docs, qa


def insert_at_depth(base: str, needle: str, depth: float) -> tuple[str, int]:
    """Insert ``needle`` at the character (= byte, for ASCII) boundary nearest depth*len."""
    if not 0.0 <= depth <= 1.0:
        raise ValueError("depth must lie in [0, 1]")
    pos = int(round(depth * len(base)))
    return base[:pos] + needle + base[pos:], pos


def needle_group(group_id: str, n_docs: int, seed: int, lengths: list[int], cities=TRAIN_CITIES,
                 variant: str = "random_city") -> tuple[list[Document], list[QAItem]]:
    """Haystack documents (prefixes of the story article) each with one needle."""
    rng = random.Random(seed)
    docs, qa = [], []
    for i in range(n_docs):
        length = rng.choice(lengths)
        if variant == "fixed":
            needle, q, a = FIXED_NEEDLE + " ", FIXED_QUESTION, FIXED_ANSWER
        else:
            city, word = rng.choice(cities), rng.choice(WORDS)
            needle, q, a = city_needle(city, word), city_question(city), word
        hay = story_text(max(0, length - len(needle)))
        text, _ = insert_at_depth(hay, needle, rng.random())
        doc_id = f"{group_id}-{i:04d}"
        docs.append(Document(doc_id, group_id, text))
        qa.append(QAItem(group_id, doc_id, q, a))
    return docs, qa


def random_letters(rng: random.Random, max_len: int = 24) -> str:
    return "".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(rng.randint(1, max_len)))


def pretrain_corpus(n_docs: int, seed: int, max_story: int = 360, copy_frac: float = 0.3,
                    kv_frac: float = 0.35) -> list[str]:
    """Mixed pretraining texts: short random letter strings (which get
    compression off the ground), key-value notes of 1-4 facts, and story
    excerpts with one planted city fact. Excerpt lengths skew short."""
    rng = random.Random(seed)
    story = story_text(1200)
    out = []
    for _ in range(n_docs):
        u = rng.random()
        if u < copy_frac:
            out.append(random_letters(rng, 12))
        elif u < copy_frac + kv_frac:
            out.append(kv_document(rng, rng.randint(1, 4))[0])
        else:
            n = int(max_story * rng.random() ** 2)
            start = rng.randrange(0, len(story) - n)
            fact = city_needle(rng.choice(TRAIN_CITIES), rng.choice(WORDS))
            out.append(insert_at_depth(story[start : start + n], fact, rng.random())[0])
    return out
