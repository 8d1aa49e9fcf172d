"""Tokenisation, vocabulary, corpus JSONL I/O and context windowing."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

PAD, BOS, EOS, SEP, UNK = range(5)
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

ACTS = ("inform", "question", "directive", "commissive")

KNOWLEDGE_WINDOW = 4
LABEL_WINDOW = 5

_PUNCT = ".,!?';:"
_PUNCT_RE = re.compile("([" + re.escape(_PUNCT) + "])")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace split, with ``. , ! ? ' ; :`` split off as tokens."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


def is_word(token: str) -> bool:
    return any(c.isalnum() for c in token)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, text_or_tokens: Union[str, Sequence[str]]) -> list[int]:
        toks = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return [self.stoi.get(t, UNK) for t in toks]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i >= len(RESERVED)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens(ids))

    @property
    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Iterable[Union[str, Sequence[str]]], min_freq: int = 1) -> Vocabulary:
    """Reserved ids first, then tokens by descending count, ties lexicographic."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    seen = False
    for item in corpus:
        seen = True
        counts.update(tokenize(item) if isinstance(item, str) else item)
    if not seen:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


# -------------------------------------------------------------- attributes

@dataclass(frozen=True)
class KnowledgeDoc:
    """Token ids k_1..k_K of the (SEP-joined) knowledge document."""

    tokens: tuple[int, ...]
    facts: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("knowledge document must contain at least one token")


@dataclass(frozen=True)
class SemanticLabel:
    act: int

    def __post_init__(self):
        if not 0 <= self.act < len(ACTS):
            raise ValueError(f"act id {self.act} outside [0, {len(ACTS)})")

    @property
    def name(self) -> str:
        return ACTS[self.act]


ControlAttribute = Union[KnowledgeDoc, SemanticLabel]


def act_id(name_or_id: Union[str, int]) -> int:
    if isinstance(name_or_id, int):
        SemanticLabel(name_or_id)
        return name_or_id
    key = name_or_id.strip().lower()
    aliases = {"questions": "question", "directives": "directive", "commissives": "commissive"}
    key = aliases.get(key, key)
    if key.isdigit():
        return act_id(int(key))
    if key not in ACTS:
        raise ValueError(f"unknown act {name_or_id!r}; expected one of {ACTS}")
    return ACTS.index(key)


def knowledge_doc(facts: Sequence[str], vocab: Vocabulary) -> KnowledgeDoc:
    ids: list[int] = []
    for i, fact in enumerate(facts):
        if i:
            ids.append(SEP)
        ids.extend(vocab.encode(fact))
    return KnowledgeDoc(tuple(ids), tuple(facts))


@dataclass
class DialogueExample:
    context: list[list[int]]
    response: list[int]
    attribute: ControlAttribute

    def __post_init__(self):
        if not self.context:
            raise ValueError("example needs at least one context utterance")
        if not self.response:
            raise ValueError("example needs a non-empty response")

    def context_ids(self) -> list[int]:
        """Context utterances joined (and terminated) by SEP."""
        out: list[int] = []
        for utt in self.context:
            out.extend(utt)
            out.append(SEP)
        return out


# ------------------------------------------------------------------ corpus

@dataclass
class Dialogue:
    utterances: list[str]
    acts: list[int] | None = None
    knowledge: list | None = None  # list[str] for the whole dialogue, or one list[str] per utterance
    line: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        rec: dict = {"utterances": self.utterances}
        if self.acts is not None:
            rec["acts"] = self.acts
        if self.knowledge is not None:
            rec["knowledge"] = self.knowledge
        return rec

    def facts_for(self, index: int) -> list[str] | None:
        k = self.knowledge
        if k is None:
            return None
        if k and all(isinstance(x, str) for x in k):
            return list(k)
        if len(k) != len(self.utterances):
            return None
        entry = k[index]
        if isinstance(entry, str):
            return [entry]
        return list(entry) if entry else None


def read_corpus(path) -> list[Dialogue]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec.get("utterances"), list):
                raise CorpusError(f"{path}:{lineno}: missing 'utterances' list")
            out.append(Dialogue(rec["utterances"], rec.get("acts"), rec.get("knowledge"), lineno))
    return out


def dumps_corpus(dialogues: Iterable[Dialogue]) -> str:
    return "".join(json.dumps(d.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for d in dialogues)


def write_corpus(path, dialogues: Iterable[Dialogue]) -> None:
    Path(path).write_text(dumps_corpus(dialogues), encoding="utf-8")


def make_examples(dialogue: Dialogue, vocab: Vocabulary, task: str,
                  window: int | None = None) -> list[DialogueExample]:
    """One example per utterance after the first, with up to ``window`` preceding utterances as context."""
    if task not in ("knowledge", "label"):
        raise ValueError(f"unknown task {task!r}")
    if window is None:
        window = KNOWLEDGE_WINDOW if task == "knowledge" else LABEL_WINDOW
    if window < 1:
        raise ValueError("window must be >= 1")
    utts = dialogue.utterances
    if len(utts) < 2:
        raise CorpusError(f"line {dialogue.line}: dialogue needs at least 2 utterances")
    if task == "label" and (dialogue.acts is None or len(dialogue.acts) != len(utts)):
        raise CorpusError(f"line {dialogue.line}: utterance missing its 'acts' annotation")
    encoded = [vocab.encode(u) for u in utts]
    examples = []
    for t in range(1, len(utts)):
        if task == "label":
            try:
                attr: ControlAttribute = SemanticLabel(int(dialogue.acts[t]))
            except (TypeError, ValueError) as e:
                raise CorpusError(f"line {dialogue.line}: utterance {t + 1}: {e}") from None
        else:
            facts = dialogue.facts_for(t)
            if not facts:
                raise CorpusError(f"line {dialogue.line}: utterance {t + 1} missing its 'knowledge' annotation")
            attr = knowledge_doc(facts, vocab)
        ctx = [u for u in encoded[max(0, t - window):t] if u] or [[UNK]]
        if not encoded[t]:
            continue
        examples.append(DialogueExample(ctx, encoded[t], attr))
    return examples


def corpus_examples(dialogues: Iterable[Dialogue], vocab: Vocabulary, task: str,
                    window: int | None = None) -> list[DialogueExample]:
    out = []
    for d in dialogues:
        out.extend(make_examples(d, vocab, task, window))
    return out


# --------------------------------------------------------------- stopwords

def default_stopwords() -> frozenset[str]:
    text = resources.files("sidecontrol.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def load_stopwords(path=None) -> frozenset[str]:
    if path is None:
        return default_stopwords()
    return frozenset(w.strip().lower() for w in Path(path).read_text(encoding="utf-8").splitlines() if w.strip())
