"""Seeded synthetic dialogue corpora.

The knowledge corpus pairs every dialogue with a persona of templated facts
and makes each response copy content words from one fact. The label corpus
realises each dialogue act with a distinct surface signature, so a rule-based
tagger labels it perfectly.
"""
from __future__ import annotations

import random
from typing import Sequence

from .core import ACTS, Dialogue, tokenize

CATEGORIES: dict[str, tuple[str, ...]] = {
    "hobby": ("hiking", "painting", "reading", "fishing", "gardening", "knitting", "cooking",
              "baking", "dancing", "singing", "swimming", "running", "cycling", "camping",
              "surfing", "skiing", "writing", "drawing", "gaming", "chess", "yoga",
              "photography", "pottery", "sailing", "climbing"),
    "food": ("pizza", "sushi", "pasta", "tacos", "burgers", "salad", "steak", "pancakes",
             "noodles", "curry", "cheese", "chocolate", "apples", "bananas", "cookies", "soup",
             "bread", "rice", "icecream", "donuts", "oranges", "grapes", "waffles", "dumplings",
             "popcorn"),
    "animal": ("dog", "cat", "horse", "parrot", "rabbit", "turtle", "hamster", "goldfish",
               "snake", "lizard", "pony", "puppy", "kitten", "ferret", "goat", "chicken", "duck",
               "pig", "cow", "sheep", "owl", "frog", "spider", "bee", "dolphin"),
    "job": ("teacher", "nurse", "doctor", "lawyer", "chef", "pilot", "farmer", "artist",
            "writer", "engineer", "plumber", "dentist", "banker", "baker", "singer", "actor",
            "painter", "driver", "mechanic", "librarian", "accountant", "firefighter",
            "scientist", "soldier", "waiter"),
    "place": ("paris", "london", "tokyo", "texas", "florida", "canada", "mexico", "italy",
              "spain", "china", "india", "brazil", "ohio", "chicago", "boston", "seattle",
              "denver", "alaska", "hawaii", "germany", "france", "egypt", "peru", "ireland",
              "sweden"),
    "color": ("red", "blue", "green", "yellow", "purple", "pink", "black", "white", "brown",
              "gray", "silver", "gold", "teal", "violet", "beige"),
    "instrument": ("guitar", "piano", "violin", "drums", "flute", "trumpet", "cello", "banjo",
                   "harp", "saxophone", "ukulele", "clarinet", "bass", "organ", "harmonica"),
    "sport": ("soccer", "football", "basketball", "baseball", "tennis", "golf", "hockey",
              "volleyball", "rugby", "boxing", "cricket", "bowling", "karate", "wrestling",
              "badminton"),
    "genre": ("jazz", "rock", "pop", "rap", "country", "blues", "metal", "opera", "reggae",
              "disco", "techno", "punk", "folk", "soul", "classical"),
    "thing": ("cars", "trucks", "books", "movies", "comics", "cartoons", "puzzles", "plants",
              "flowers", "candles", "shoes", "hats", "stamps", "coins", "robots"),
}

CONTENT_LEXICON: frozenset[str] = frozenset(w for ws in CATEGORIES.values() for w in ws)

FACT_TEMPLATES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("i love {} and {} .", ("hobby", "hobby")),
    ("my favorite food is {} with {} .", ("food", "food")),
    ("i have a {} and a {} .", ("animal", "animal")),
    ("i work as a {} in {} .", ("job", "place")),
    ("my favorite colors are {} and {} .", ("color", "color")),
    ("i play the {} and {} .", ("instrument", "sport")),
    ("i listen to {} , {} and {} .", ("genre", "genre", "genre")),
    ("i collect {} , {} and {} .", ("thing", "thing", "thing")),
    ("i grew up in {} and moved to {} .", ("place", "place")),
    ("on weekends i enjoy {} , {} , {} and {} .", ("hobby", "sport", "food", "thing")),
    ("my {} likes {} and {} {} .", ("animal", "food", "color", "thing")),
)

RESPONSE_TEMPLATES: dict[int, tuple[str, ...]] = {
    2: ("yes , i really like {} and {} .",
        "well , {} is fun and so is {} .",
        "do you know {} ? i also like {} .",
        "haha , {} and {} are my thing .",
        "lately it is all {} and {} for me ."),
    3: ("i spend my time on {} , {} and {} .",
        "you know , {} and {} and also {} .",
        "my life is {} , {} and {} ."),
    4: ("{} , {} , {} and {} are what i love .",
        "think {} , {} , {} and {} ."),
}

GREETINGS = ("hi , how are you today ?", "hello there , what do you do for fun ?",
             "hey ! tell me about yourself .", "good evening , how is it going ?")

# -------------------------------------------------------------- label task

_NOUNS = ("report", "car", "dinner", "ticket", "meeting", "room", "phone", "book", "movie",
          "party", "bill", "dress", "coffee", "train", "letter", "game", "house", "job",
          "class", "trip", "bag", "computer", "window", "door", "song", "menu", "garden",
          "present", "schedule", "key")
_VERBS = ("finish", "check", "clean", "fix", "open", "close", "buy", "sell", "send", "read",
          "cook", "book", "pay", "visit", "move", "paint", "call", "wash", "bring", "order")
_ADJS = ("great", "terrible", "expensive", "cheap", "new", "old", "busy", "quiet", "nice",
         "strange", "small", "huge", "late", "early", "perfect", "boring", "lovely", "cold",
         "warm", "fresh")
_PLACES = ("office", "station", "park", "bank", "restaurant", "market", "hotel", "airport",
           "library", "school", "hospital", "beach", "mall", "gym", "museum")
_TIMES = ("today", "tomorrow", "tonight", "soon", "later", "now", "again", "yesterday")

ACT_TEMPLATES: dict[str, tuple[str, ...]] = {
    "question": ("what do you think about the {noun} ?",
                 "where did you {verb} the {noun} ?",
                 "how was the {noun} at the {place} ?",
                 "who will {verb} the {noun} ?",
                 "when can we {verb} the {noun} ?",
                 "why is the {noun} so {adj} ?",
                 "which {noun} do you want {time} ?"),
    "directive": ("please {verb} the {noun} {time} .",
                  "please bring me the {adj} {noun} .",
                  "let 's {verb} the {noun} at the {place} .",
                  "let me see the {noun} {time} .",
                  "please meet me at the {place} {time} ."),
    "commissive": ("i will {verb} the {noun} {time} .",
                   "we will meet you at the {place} {time} .",
                   "i will bring the {adj} {noun} .",
                   "we will {verb} it for you {time} .",
                   "i will call you from the {place} ."),
    "inform": ("the {noun} is {adj} .",
               "my {noun} was {adj} {time} .",
               "i think the {place} is {adj} .",
               "there is a {adj} {noun} at the {place} .",
               "i saw the {noun} at the {place} {time} .",
               "it was a {adj} day at the {place} ."),
}

LABEL_TWO_CLAUSE_RATE = 0.5

WH_WORDS = frozenset(("what", "where", "how", "who", "when", "why", "which"))


def rule_based_act(text_or_tokens) -> int:
    """Surface-signature act tagger (exact on the synthetic label corpus)."""
    toks = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else list(text_or_tokens)
    if not toks:
        return ACTS.index("inform")
    if toks[0] in WH_WORDS and toks[-1] == "?":
        return ACTS.index("question")
    if toks[0] in ("please", "let"):
        return ACTS.index("directive")
    if len(toks) > 1 and toks[0] in ("i", "we") and toks[1] == "will":
        return ACTS.index("commissive")
    return ACTS.index("inform")


def content_overlap(response, fact, lexicon: frozenset[str] = CONTENT_LEXICON) -> int:
    """Number of distinct lexicon words shared by a response and a fact."""
    r = set(tokenize(response) if isinstance(response, str) else response)
    f = set(tokenize(fact) if isinstance(fact, str) else fact)
    return len(r & f & lexicon)


def _fact(rng: random.Random) -> str:
    template, slots = rng.choice(FACT_TEMPLATES)
    words: list[str] = []
    for cat in slots:
        choices = [w for w in CATEGORIES[cat] if w not in words]
        words.append(rng.choice(choices))
    return template.format(*words)


def _knowledge_utterance(rng: random.Random, facts: Sequence[str]) -> str:
    fact = rng.choice(facts)
    words = [t for t in tokenize(fact) if t in CONTENT_LEXICON]
    k = rng.randint(2, min(4, len(words)))
    picked = sorted(rng.sample(range(len(words)), k))
    return rng.choice(RESPONSE_TEMPLATES[k]).format(*[words[i] for i in picked])


def _knowledge_dialogue(rng: random.Random) -> Dialogue:
    facts: list[str] = []
    n_facts = rng.randint(3, 5)
    while len(facts) < n_facts:
        f = _fact(rng)
        if f not in facts:
            facts.append(f)
    n = rng.randint(4, 8)
    utts = [rng.choice(GREETINGS)] if rng.random() < 0.5 else [_knowledge_utterance(rng, facts)]
    while len(utts) < n:
        utts.append(_knowledge_utterance(rng, facts))
    return Dialogue(utts, knowledge=facts)


def _label_clause(rng: random.Random, act: str, noun: str) -> str:
    return rng.choice(ACT_TEMPLATES[act]).format(
        noun=noun, verb=rng.choice(_VERBS), adj=rng.choice(_ADJS),
        place=rng.choice(_PLACES), time=rng.choice(_TIMES))


def _label_utterance(rng: random.Random, act: str, prev_noun: str | None) -> tuple[str, str]:
    """One or two clauses of the same act (multi-sentence turns are common in chit-chat)."""
    noun = prev_noun if prev_noun is not None and rng.random() < 0.5 else rng.choice(_NOUNS)
    text = _label_clause(rng, act, noun)
    if rng.random() < LABEL_TWO_CLAUSE_RATE:
        text += " " + _label_clause(rng, act, rng.choice(_NOUNS))
    return text, noun


def _label_dialogue(rng: random.Random) -> Dialogue:
    n = rng.randint(4, 8)
    utts, acts = [], []
    noun = None
    for _ in range(n):
        act = rng.randrange(len(ACTS))
        text, noun = _label_utterance(rng, ACTS[act], noun)
        utts.append(text)
        acts.append(act)
    return Dialogue(utts, acts=acts)


def generate_synthetic_corpus(task: str, n_dialogues: int, seed: int) -> list[Dialogue]:
    if n_dialogues < 1:
        raise ValueError("n_dialogues must be >= 1")
    if task == "knowledge":
        make = _knowledge_dialogue
    elif task == "label":
        make = _label_dialogue
    else:
        raise ValueError(f"unknown task {task!r}")
    rng = random.Random(f"synth:{task}:{seed}")
    dialogues = [make(rng) for _ in range(n_dialogues)]
    for i, d in enumerate(dialogues, start=1):
        d.line = i
    return dialogues


def split_corpus(dialogues: Sequence[Dialogue], fractions=(0.8, 0.1, 0.1)):
    """Deterministic contiguous train/val/test split."""
    n = len(dialogues)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return list(dialogues[:n_train]), list(dialogues[n_train:n_train + n_val]), list(dialogues[n_train + n_val:])
