from .core import (
    ACTS,
    BOS,
    EOS,
    KNOWLEDGE_WINDOW,
    LABEL_WINDOW,
    PAD,
    RESERVED,
    SEP,
    UNK,
    ControlAttribute,
    CorpusError,
    Dialogue,
    DialogueExample,
    KnowledgeDoc,
    SemanticLabel,
    Vocabulary,
    act_id,
    build_vocab,
    corpus_examples,
    default_stopwords,
    dumps_corpus,
    is_word,
    knowledge_doc,
    load_stopwords,
    make_examples,
    read_corpus,
    tokenize,
    write_corpus,
)
from .synthetic import (
    CONTENT_LEXICON,
    content_overlap,
    generate_synthetic_corpus,
    rule_based_act,
    split_corpus,
)

__all__ = [name for name in dir() if not name.startswith("_")]
