"""Command-line pipeline: corpus synthesis, training stages, decoding, evaluation and a REPL.

Every subcommand reads an optional JSON experiment config (``--config``), applies
flag overrides on top (flags win), writes its artifacts under ``--out`` and records
a ``manifest.json`` next to them.  Failures print one JSON line to stderr and exit
with a nonzero status.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from . import baselm as bl
from . import evalsuite as ev
from .baselines import (FUDGE_WEIGHT, BagOfWordsAttribute, BagOverlapDiscriminator, ClassifierAttribute,
                        DiscriminatorConfig, FinetuneConfig, FudgeConfig, FutureDiscriminator, SteeringConfig,
                        finetune, fudge_decode, pplm_decode, train_future_discriminator)
from .control import (DEFAULT_LAMBDA, AttributeClassifier, ClassifierConfig, CompatibilityError,
                      FrozenClassifierError, TrainingConfig, cache_states, classifier_accuracy, default_grid,
                      generate_controlled, load_side, pretrain_classifier, train_side)
from .textdata import (ACTS, KNOWLEDGE_WINDOW, LABEL_WINDOW, SEP, CorpusError, Dialogue, DialogueExample,
                       SemanticLabel, Vocabulary, act_id, build_vocab, corpus_examples, default_stopwords,
                       generate_synthetic_corpus, knowledge_doc, make_examples, read_corpus, split_corpus,
                       write_corpus)

log = logging.getLogger("sidecontrol")

METHODS = ("base", "sidecontrol", "finetune", "fudge", "pplm")
STAGES = ("synth", "base-train", "classifier", "side-train", "finetune", "discriminator", "decode", "eval")
EXIT_CODES = {"usage": 2, "missing-artifact": 3, "hash-mismatch": 4}


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ------------------------------------------------------------------ config

# nested sections: name -> (dataclass, keys owned elsewhere in the config)
SECTIONS = {
    "base": (bl.BaseLMConfig, ()),
    "base_train": (bl.LMTrainConfig, ()),
    "classifier": (ClassifierConfig, ("seed",)),
    "side": (TrainingConfig, ("lam", "grid", "seed")),
    "finetune": (FinetuneConfig, ("seed",)),
    "discriminator": (DiscriminatorConfig, ("seed",)),
    "eval_classifier": (ev.EvalClassifierConfig, ("seed",)),
    "generation": (bl.GenerationConfig, ("seed",)),
    "fudge": (FudgeConfig, ()),
    "steering": (SteeringConfig, ()),
}


@dataclass
class ExperimentConfig:
    task: str = "label"
    train: str | None = None
    val: str | None = None
    test: str | None = None
    n_dialogues: int = 2000
    seed: int | None = None
    out: str | None = None
    lam: float | None = None          # default: the task's standard lambda
    grid: list[float] | None = None   # default: the task's standard grid
    limit: int | None = None          # cap on decoded examples per split
    base: dict = field(default_factory=dict)
    base_train: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    side: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)
    eval_classifier: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    fudge: dict = field(default_factory=dict)
    steering: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("knowledge", "label"):
            raise CLIError("config", f"task must be 'knowledge' or 'label', got {self.task!r}")
        if self.grid is not None and len(self.grid) == 0:
            raise CLIError("config", "lambda grid must be non-empty")
        for name, (cls, owned) in SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise CLIError("config", f"section {name!r} must be an object")
            allowed = {f.name for f in fields(cls)} - set(owned)
            unknown = sorted(set(section) - allowed)
            if unknown:
                raise CLIError("config", f"unknown key(s) {unknown} in section {name!r}")
            try:
                cls(**section)
            except (TypeError, ValueError) as e:
                raise CLIError("config", f"section {name!r}: {e}") from None

    def build(self, name: str, **extra):
        cls, _ = SECTIONS[name]
        return cls(**{**getattr(self, name), **extra})

    def require_seed(self) -> int:
        if self.seed is None:
            raise CLIError("config", "a seed is required (--seed or \"seed\" in the config)")
        return int(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIError("missing-artifact", f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CLIError("config", f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(data, dict):
        raise CLIError("config", f"{path}: top level must be an object")
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise CLIError("config", f"{path}: unknown key(s) {unknown}")
    cfg = ExperimentConfig(**data)
    for key in ("train", "val", "test"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).exists():
            raise CLIError("missing-artifact", f"config {key!r} path does not exist: {p}")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, flags: dict, sets: Sequence[str]) -> ExperimentConfig:
    """Flags (non-None values) replace top-level fields; ``--set section.key=value`` edits nested ones."""
    data = cfg.to_dict()
    for k, v in flags.items():
        if v is not None:
            data[k] = v
    for item in sets or ():
        if "=" not in item:
            raise CLIError("usage", f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in SECTIONS:
                raise CLIError("config", f"unknown section {section!r} in --set {item!r}")
            data[section] = {**data[section], sub: value}
        elif key in data and key not in SECTIONS:
            data[key] = value
        else:
            raise CLIError("config", f"unknown key {key!r} in --set {item!r}")
    return ExperimentConfig(**data)


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible 31-bit seed for one pipeline stage."""
    state = np.random.SeedSequence([int(seed), STAGES.index(stage)]).generate_state(1)[0]
    return int(state) & 0x7FFFFFFF


# --------------------------------------------------------------- artifacts

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Stage:
    """Output directory plus the manifest bookkeeping shared by every subcommand."""

    def __init__(self, command: str, cfg: ExperimentConfig):
        if cfg.out is None:
            raise CLIError("usage", "an output directory is required (--out or \"out\" in the config)")
        self.command = command
        self.cfg = cfg
        self.seed = cfg.require_seed()
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.inputs: dict = {}
        self.metrics: dict = {}
        self.started = time.perf_counter()

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def path(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.out / name

    def finish(self) -> dict:
        manifest = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "stage_seeds": {s: self.seed_for(s) for s in STAGES},
            "git": git_describe(),
            "inputs": self.inputs,
            "metrics": self.metrics,
            "artifacts": {name: _sha256(self.out / name) for name in self.artifacts},
            "wall_seconds": round(time.perf_counter() - self.started, 3),
        }
        _dump_json(self.out / "manifest.json", manifest)
        return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CLIError("missing-artifact", f"no manifest.json in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def _need(path: Path) -> Path:
    if not path.exists():
        raise CLIError("missing-artifact", f"required artifact not found: {path}")
    return path


@dataclass
class BaseBundle:
    model: bl.BaseLM
    vocab: Vocabulary
    task: str
    directory: Path


def load_base_dir(directory) -> BaseBundle:
    d = Path(directory)
    man = read_manifest(d)
    vocab = Vocabulary.load(_need(d / "vocab.txt"))
    model = bl.BaseLM.load(_need(d / "base.ckpt"), _need(d / "base.json"))
    if man.get("base_hash") != model.digest:
        raise CLIError("hash-mismatch", f"{d}: base checkpoint does not match its manifest hash")
    if man.get("vocab_hash") != vocab.digest:
        raise CLIError("hash-mismatch", f"{d}: vocabulary does not match its manifest hash")
    if not model.frozen:
        raise CLIError("frozen", f"{d}: base checkpoint is not frozen")
    return BaseBundle(model, vocab, man.get("task", ""), d)


def _check_chain(man: dict, bundle: BaseBundle, what: str) -> None:
    if man.get("base_hash") != bundle.model.digest:
        raise CLIError("hash-mismatch", f"{what} was produced against a different base checkpoint")
    if man.get("vocab_hash") != bundle.vocab.digest:
        raise CLIError("hash-mismatch", f"{what} was produced with a different vocabulary")


def load_classifier_dir(directory, bundle: BaseBundle) -> AttributeClassifier:
    d = Path(directory)
    _check_chain(read_manifest(d), bundle, f"classifier in {d}")
    return AttributeClassifier.load(_need(d / "classifier.ckpt"))


def load_side_dir(directory, bundle: BaseBundle):
    d = Path(directory)
    _check_chain(read_manifest(d), bundle, f"side network in {d}")
    side, man = load_side(_need(d / "side.ckpt"), _need(d / "side.json"), bundle.model, bundle.vocab.digest)
    return side, man


def load_finetuned_dir(directory, bundle: BaseBundle) -> bl.BaseLM:
    d = Path(directory)
    man = read_manifest(d)
    if man.get("vocab_hash") != bundle.vocab.digest or man.get("source_base_hash") != bundle.model.digest:
        raise CLIError("hash-mismatch", f"fine-tuned model in {d} does not derive from this base")
    return bl.BaseLM.load(_need(d / "model.ckpt"), _need(d / "model.json"))


def load_discriminator_dir(directory, bundle: BaseBundle) -> FutureDiscriminator:
    d = Path(directory)
    man = read_manifest(d)
    if man.get("vocab_hash") != bundle.vocab.digest:
        raise CLIError("hash-mismatch", f"discriminator in {d} was trained with a different vocabulary")
    return FutureDiscriminator.load(_need(d / "discriminator.ckpt"))


def _corpus(cfg: ExperimentConfig, split: str) -> list[Dialogue]:
    path = getattr(cfg, split)
    if path is None:
        raise CLIError("usage", f"no {split} corpus given (--data DIR, --{split} PATH or the config)")
    return read_corpus(_need(Path(path)))


def _window(task: str) -> int:
    return KNOWLEDGE_WINDOW if task == "knowledge" else LABEL_WINDOW


# ---------------------------------------------------------------- records

def attribute_json(task: str, dialogue: Dialogue, t: int):
    if task == "label":
        return {"act": ACTS[int(dialogue.acts[t])]}
    return {"knowledge": list(dialogue.facts_for(t))}


def attribute_from_json(obj, vocab: Vocabulary):
    if isinstance(obj, dict) and "act" in obj:
        return SemanticLabel(act_id(obj["act"]))
    if isinstance(obj, dict) and "knowledge" in obj:
        return knowledge_doc(obj["knowledge"], vocab)
    raise CLIError("invalid", f"unrecognised attribute {obj!r}")


def split_examples(dialogues: Sequence[Dialogue], vocab: Vocabulary, task: str
                   ) -> tuple[list[DialogueExample], list[dict]]:
    """Token-level examples plus aligned text records (context utterances, attribute, gold response)."""
    examples, records = [], []
    w = _window(task)
    for d in dialogues:
        exs = make_examples(d, vocab, task)
        recs = [{"context": d.utterances[max(0, t - w):t], "attribute": attribute_json(task, d, t),
                 "response": d.utterances[t]}
                for t in range(1, len(d.utterances)) if vocab.encode(d.utterances[t])]
        assert len(exs) == len(recs)
        examples.extend(exs)
        records.extend(recs)
    return examples, records


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows),
                    encoding="utf-8")


def read_jsonl(path) -> list[dict]:
    rows = []
    for lineno, raw in enumerate(_need(Path(path)).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CLIError("invalid", f"{path}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(row, dict) or not {"context", "attribute", "response"} <= set(row):
            raise CLIError("invalid", f"{path}:{lineno}: expected context, attribute and response")
        rows.append(row)
    return rows


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------- decoders

@dataclass
class Models:
    """Everything a decoding method may need, loaded from chained artifact directories."""

    bundle: BaseBundle
    side: object | None = None
    finetuned: bl.BaseLM | None = None
    discriminator: object | None = None
    classifier: AttributeClassifier | None = None


def load_models(args, cfg: ExperimentConfig, method: str, stage: Stage | None = None) -> Models:
    bundle = load_base_dir(_arg_path(args, "base"))
    models = Models(bundle)
    if stage is not None:
        stage.inputs["base_hash"] = bundle.model.digest
        stage.inputs["vocab_hash"] = bundle.vocab.digest
    if method == "sidecontrol":
        models.side, man = load_side_dir(_arg_path(args, "side"), bundle)
        if man["task"] != cfg.task:
            raise CLIError("invalid", f"side network is for task {man['task']!r}, config says {cfg.task!r}")
    elif method == "finetune":
        models.finetuned = load_finetuned_dir(_arg_path(args, "finetuned"), bundle)
    elif method == "fudge":
        if cfg.task == "label":
            models.discriminator = load_discriminator_dir(_arg_path(args, "discriminator"), bundle)
        else:
            models.discriminator = BagOverlapDiscriminator(bundle.vocab, default_stopwords())
    elif method == "pplm" and cfg.task == "label":
        models.classifier = load_classifier_dir(_arg_path(args, "classifier"), bundle)
    return models


def _arg_path(args, name: str) -> Path:
    value = getattr(args, name, None)
    if value is None:
        raise CLIError("usage", f"--{name} DIR is required here")
    return Path(value)


def make_decoder(method: str, cfg: ExperimentConfig, models: Models, alpha: float | None = None,
                 beta: float | None = None) -> Callable[[Sequence[int], object, np.random.Generator], list[int]]:
    gen = cfg.build("generation")
    base = models.bundle.model
    if method == "base":
        return lambda ctx, attr, rng: bl.generate(base, ctx, gen, rng)
    if method == "finetune":
        return lambda ctx, attr, rng: bl.generate(models.finetuned, ctx, gen, rng)
    if method == "sidecontrol":
        return lambda ctx, attr, rng: generate_controlled(base, models.side, ctx, attr, gen, rng,
                                                          alpha_override=alpha, beta_override=beta).tokens
    if method == "fudge":
        fcfg = cfg.build("fudge", **({} if "weight" in cfg.fudge else {"weight": FUDGE_WEIGHT[cfg.task]}))
        return lambda ctx, attr, rng: fudge_decode(base, models.discriminator, ctx, attr, gen, fcfg, rng)
    if method == "pplm":
        steer = SteeringConfig(**{**asdict(SteeringConfig.for_task(cfg.task)), **cfg.steering})
        stop = default_stopwords()

        def pplm(ctx, attr, rng):
            if cfg.task == "label":
                target = ClassifierAttribute(models.classifier, attr.act)
            else:
                target = BagOfWordsAttribute.from_document(attr.tokens, models.bundle.vocab, stop)
            return pplm_decode(base, target, ctx, steer, gen, rng)
        return pplm
    raise CLIError("usage", f"unknown method {method!r}; expected one of {METHODS}")


# ------------------------------------------------------------ subcommands

def cmd_synth(args, cfg: ExperimentConfig) -> None:
    st = Stage("synth", cfg)
    dialogues = generate_synthetic_corpus(cfg.task, cfg.n_dialogues, st.seed_for("synth"))
    for name, part in zip(("train", "val", "test"), split_corpus(dialogues)):
        write_corpus(st.path(f"{name}.jsonl"), part)
        st.metrics[f"{name}_dialogues"] = len(part)
    st.finish()


def cmd_train_base(args, cfg: ExperimentConfig) -> None:
    st = Stage("train-base", cfg)
    train, val = _corpus(cfg, "train"), _corpus(cfg, "val")
    texts = [u for d in train for u in d.utterances]
    texts += [f for d in train for f in (d.knowledge or []) if isinstance(f, str)]
    vocab = build_vocab(texts)
    ex = corpus_examples(train, vocab, cfg.task)
    model, trace = bl.train_base_lm(ex, len(vocab), cfg.build("base"), cfg.build("base_train"),
                                    seed=st.seed_for("base-train"))
    model.freeze()
    vocab.save(st.path("vocab.txt"))
    model.save(st.path("base.ckpt"), st.path("base.json"), "vocab.txt")
    _dump_json(st.path("trace.json"), {"train_loss": trace})
    st.metrics["val_nll"] = bl.mean_nll(model, corpus_examples(val, vocab, cfg.task))
    man = st.finish()
    man.update({"task": cfg.task, "base_hash": model.digest, "vocab_hash": vocab.digest})
    _dump_json(st.out / "manifest.json", man)


def _chain_manifest(st: Stage, bundle: BaseBundle, **extra) -> None:
    man = st.finish()
    man.update({"task": st.cfg.task, "base_hash": bundle.model.digest, "vocab_hash": bundle.vocab.digest, **extra})
    _dump_json(st.out / "manifest.json", man)


def _require_label(cfg: ExperimentConfig, what: str) -> None:
    if cfg.task != "label":
        raise CLIError("invalid", f"{what} applies to the label task only")


def cmd_train_classifier(args, cfg: ExperimentConfig) -> None:
    _require_label(cfg, "train-classifier")
    st = Stage("train-classifier", cfg)
    bundle = load_base_dir(_arg_path(args, "base"))
    train = cache_states(bundle.model, corpus_examples(_corpus(cfg, "train"), bundle.vocab, "label"))
    val = cache_states(bundle.model, corpus_examples(_corpus(cfg, "val"), bundle.vocab, "label"))
    clf = pretrain_classifier(bundle.model, train, cfg.build("classifier", seed=st.seed_for("classifier")), val)
    clf.save(st.path("classifier.ckpt"))
    st.metrics["val_accuracy"] = classifier_accuracy(clf, val)
    _chain_manifest(st, bundle)


def _side_setup(args, cfg: ExperimentConfig, st: Stage):
    bundle = load_base_dir(_arg_path(args, "base"))
    st.inputs.update(base_hash=bundle.model.digest, vocab_hash=bundle.vocab.digest)
    clf = None
    if cfg.task == "label":
        clf = load_classifier_dir(_arg_path(args, "classifier"), bundle)
        if not clf.frozen:
            raise FrozenClassifierError("the attribute classifier checkpoint is not frozen")
    train_ex = corpus_examples(_corpus(cfg, "train"), bundle.vocab, cfg.task)
    val_dialogues = _corpus(cfg, "val")
    val_ex = corpus_examples(val_dialogues, bundle.vocab, cfg.task)
    return bundle, clf, cache_states(bundle.model, train_ex), cache_states(bundle.model, val_ex), val_dialogues


def _save_side(st: Stage, bundle: BaseBundle, side, lam: float, trace: dict) -> None:
    side.save(st.path("side.ckpt"), st.path("side.json"), lam, bundle.vocab.digest)
    _dump_json(st.path("trace.json"), trace)


def cmd_train_side(args, cfg: ExperimentConfig) -> None:
    st = Stage("train-side", cfg)
    bundle, clf, train, val, _ = _side_setup(args, cfg, st)
    lam = cfg.lam if cfg.lam is not None else DEFAULT_LAMBDA[cfg.task]
    tcfg = cfg.build("side", lam=lam, seed=st.seed_for("side-train"))
    res = train_side(bundle.model, cfg.task, train, val, tcfg, clf=clf)
    _save_side(st, bundle, res.side, lam, {"train_loss": res.train_trace, "val": res.val_trace})
    st.metrics.update(best_val=res.best_val, best_step=res.best_step, lam=lam)
    _chain_manifest(st, bundle)


def cmd_finetune(args, cfg: ExperimentConfig) -> None:
    st = Stage("finetune", cfg)
    bundle = load_base_dir(_arg_path(args, "base"))
    train = corpus_examples(_corpus(cfg, "train"), bundle.vocab, cfg.task)
    val = corpus_examples(_corpus(cfg, "val"), bundle.vocab, cfg.task)
    res = finetune(bundle.model.copy(), train, val, cfg.build("finetune", seed=st.seed_for("finetune")))
    res.model.save(st.path("model.ckpt"), st.path("model.json"), "vocab.txt")
    _dump_json(st.path("trace.json"), {"train_loss": res.train_trace, "val": res.val_trace})
    st.metrics["best_step"] = res.best_step
    _chain_manifest(st, bundle, source_base_hash=bundle.model.digest)


def cmd_train_discriminator(args, cfg: ExperimentConfig) -> None:
    _require_label(cfg, "train-discriminator")
    st = Stage("train-discriminator", cfg)
    bundle = load_base_dir(_arg_path(args, "base"))
    train = corpus_examples(_corpus(cfg, "train"), bundle.vocab, "label")
    val = corpus_examples(_corpus(cfg, "val"), bundle.vocab, "label")
    disc, report = train_future_discriminator(train, len(bundle.vocab),
                                              cfg.build("discriminator", seed=st.seed_for("discriminator")), val)
    disc.save(st.path("discriminator.ckpt"))
    st.metrics.update(asdict(report))
    _chain_manifest(st, bundle)


def _decode_split(method: str, cfg: ExperimentConfig, models: Models, examples, records, seed: int,
                  alpha: float | None = None) -> list[dict]:
    decode = make_decoder(method, cfg, models, alpha=alpha)
    out = []
    for i, (ex, rec) in enumerate(zip(examples, records)):
        tokens = decode(ex.context_ids(), ex.attribute, example_rng(seed, i))
        out.append({**rec, "response": models.bundle.vocab.decode(tokens)})
    return out


def _limited(cfg: ExperimentConfig, examples, records):
    n = len(examples) if cfg.limit is None else min(cfg.limit, len(examples))
    return examples[:n], records[:n]


def cmd_generate(args, cfg: ExperimentConfig) -> None:
    st = Stage("generate", cfg)
    models = load_models(args, cfg, args.method, st)
    examples, records = _limited(cfg, *split_examples(_corpus(cfg, args.split), models.bundle.vocab, cfg.task))
    hyp = _decode_split(args.method, cfg, models, examples, records, st.seed_for("decode"), alpha=args.alpha)
    write_jsonl(st.path("hyp.jsonl"), hyp)
    write_jsonl(st.path("ref.jsonl"), records)
    st.metrics.update(method=args.method, examples=len(hyp))
    st.finish()


def controllability(task: str, responses: Sequence[str], attributes: Sequence, vocab: Vocabulary,
                    eval_clf=None, embeddings=None) -> tuple[float, list[int]]:
    """Eval-classifier accuracy (label) or mean knowledge similarity (knowledge) plus flagged rows."""
    if task == "label":
        targets = [act_id(a["act"]) for a in attributes]
        return ev.controllability_accuracy(list(responses), targets, eval_clf), []
    docs = [" ".join(a["knowledge"]) for a in attributes]
    return ev.mean_knowledge_similarity(list(responses), docs, embeddings, default_stopwords())


def eval_classifier_for(args, cfg: ExperimentConfig, bundle: BaseBundle, st: Stage) -> ev.EvalClassifier:
    """Load ``--eval-classifier`` or train one on the configured corpus and save it with its confusion matrix."""
    if getattr(args, "eval_classifier", None):
        return ev.EvalClassifier.load(_need(Path(args.eval_classifier)), bundle.vocab)
    pairs = [[(u, a) for d in _corpus(cfg, split) for u, a in zip(d.utterances, d.acts)]
             for split in ("train", "val", "test")]
    clf, rep = ev.train_eval_classifier(*pairs, bundle.vocab, cfg.build("eval_classifier", seed=st.seed_for("eval")))
    clf.save(st.path("eval_classifier.ckpt"))
    st.path("eval_confusion.csv").write_text(rep.confusion_csv(), encoding="utf-8")
    st.metrics["eval_classifier_test_accuracy"] = rep.test_accuracy
    return clf


def embeddings_for(args, bundle: BaseBundle) -> ev.EmbeddingTable:
    if getattr(args, "embeddings", None):
        return ev.EmbeddingTable.from_glove(_need(Path(args.embeddings)))
    return ev.EmbeddingTable.from_base(bundle.model, bundle.vocab)


def _ppl(args, cfg: ExperimentConfig, method: str, bundle: BaseBundle) -> float | None:
    if method in ("fudge", "pplm") or args.no_ppl:
        return None
    examples = corpus_examples(_corpus(cfg, "test"), bundle.vocab, cfg.task)
    if method == "sidecontrol":
        scorer = ev.SideScorer(load_side_dir(_arg_path(args, "side"), bundle)[0])
    elif method == "finetune":
        scorer = ev.BaseScorer(load_finetuned_dir(_arg_path(args, "finetuned"), bundle))
    else:
        scorer = ev.BaseScorer(bundle.model)
    return ev.test_perplexity(scorer, examples)


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    st = Stage("evaluate", cfg)
    hyp, ref = read_jsonl(args.hyp), read_jsonl(args.ref)
    if len(hyp) != len(ref):
        raise CLIError("invalid", f"hypothesis file has {len(hyp)} rows, reference file has {len(ref)}")
    for i, (h, r) in enumerate(zip(hyp, ref)):
        if h["context"] != r["context"] or h["attribute"] != r["attribute"]:
            raise CLIError("invalid", f"row {i + 1}: hypothesis and reference contexts differ")
    st.inputs.update(hyp=_sha256(Path(args.hyp)), ref=_sha256(Path(args.ref)))
    responses = [h["response"] for h in hyp]
    refs = [r["response"] for r in ref]
    report = ev.MetricsReport(args.method, bleu1=ev.corpus_bleu(responses, refs, max_n=1),
                              bleu2=ev.corpus_bleu(responses, refs, max_n=2),
                              meteor=ev.mean_meteor(responses, refs))
    if args.base is not None:
        bundle = load_base_dir(args.base)
        st.inputs.update(base_hash=bundle.model.digest)
        attrs = [h["attribute"] for h in hyp]
        if cfg.task == "label":
            report.accuracy, _ = controllability("label", responses, attrs, bundle.vocab,
                                                 eval_clf=eval_classifier_for(args, cfg, bundle, st))
        else:
            report.similarity, report.flagged = controllability("knowledge", responses, attrs, bundle.vocab,
                                                                embeddings=embeddings_for(args, bundle))
        report.ppl = _ppl(args, cfg, args.method, bundle)
    if args.bench is not None:
        bench = json.loads(_need(Path(args.bench)).read_text(encoding="utf-8"))
        if args.method in bench:
            report.seconds_per_token = bench[args.method]["seconds_per_token"]
    report.__post_init__()
    reports = [report]
    existing = st.out / "report.json"
    if args.append and existing.exists():
        reports = [r for r in ev.loads_reports(existing.read_text(encoding="utf-8")) if r.method != report.method]
        reports.append(report)
    st.path("report.json").write_text(ev.dumps_reports(reports), encoding="utf-8")
    table = ev.render_table(reports)
    st.path("report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    st.finish()


def cmd_bench_decode(args, cfg: ExperimentConfig) -> None:
    st = Stage("bench-decode", cfg)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bundle = None
    decoders = {}
    for m in methods:
        models = load_models(args, cfg, m, st)
        bundle = models.bundle
        decoders[m] = make_decoder(m, cfg, models)
    examples, _ = split_examples(_corpus(cfg, args.split), bundle.vocab, cfg.task)
    examples = examples[:10]
    seed = st.seed_for("decode")
    fns = {m: (lambda i, ex, fn=fn: fn(ex.context_ids(), ex.attribute, example_rng(seed, i)))
           for m, fn in decoders.items()}
    results = ev.decoding_benchmark(fns, examples, repetitions=args.repetitions)
    _dump_json(st.path("bench.json"), {m: asdict(r) for m, r in results.items()})
    for m, r in results.items():
        sys.stdout.write(f"{m}\t{r.seconds_per_token:.6f} s/tok\n")
    st.finish()


def cmd_grid_lambda(args, cfg: ExperimentConfig) -> None:
    st = Stage("grid-lambda", cfg)
    bundle, clf, train, val, val_dialogues = _side_setup(args, cfg, st)
    grid = list(cfg.grid) if cfg.grid is not None else list(default_grid(cfg.task))
    examples, records = split_examples(val_dialogues, bundle.vocab, cfg.task)
    n = min(args.val_generations, len(examples))
    examples, records = examples[:n], records[:n]
    eval_clf = eval_classifier_for(args, cfg, bundle, st) if cfg.task == "label" else None
    emb = embeddings_for(args, bundle) if cfg.task == "knowledge" else None
    candidates = ([0.0] if args.include_zero else []) + grid
    rows, best, best_side = [], None, None
    for lam in candidates:
        scores, first_side = [], None
        for s in range(args.seeds):
            tcfg = cfg.build("side", lam=lam, grid=tuple(grid), seed=stage_seed(st.seed + s, "side-train"))
            res = train_side(bundle.model, cfg.task, train, val, tcfg, clf=clf, grid_mode=True)
            models = Models(bundle, side=res.side)
            hyp = _decode_split("sidecontrol", cfg, models, examples, records, st.seed_for("decode"))
            score, _ = controllability(cfg.task, [h["response"] for h in hyp], [h["attribute"] for h in hyp],
                                       bundle.vocab, eval_clf=eval_clf, embeddings=emb)
            scores.append(score)
            first_side = first_side or res.side
        mean = float(np.mean(scores))
        rows.append({"lambda": lam, "scores": scores, "mean": mean, "in_grid": lam in grid})
        log.info("lambda %g: validation controllability %.4f", lam, mean)
        if lam in grid and (best is None or mean > best["mean"]):
            best, best_side = rows[-1], first_side
    _dump_json(st.path("grid.json"), {"rows": rows, "best_lambda": best["lambda"], "best_mean": best["mean"]})
    _save_side(st, bundle, best_side, best["lambda"], {"selected": best})
    st.metrics.update(best_lambda=best["lambda"], best_mean=best["mean"])
    sys.stdout.write(f"best lambda {best['lambda']:g} (validation controllability {best['mean']:.4f})\n")
    _chain_manifest(st, bundle)


# -------------------------------------------------------------------- REPL

class Session:
    """State of one interactive session; every input line yields a list of output lines."""

    def __init__(self, bundle: BaseBundle, side, task: str, cfg: ExperimentConfig, seed: int):
        self.bundle, self.side, self.task, self.cfg, self.seed = bundle, side, task, cfg, seed
        self.gen = cfg.build("generation")
        self.history: list[str] = []
        self.act = 0
        self.facts: list[str] = []
        self.alpha: float | None = None
        self.beta: float | None = None
        self.verbose = False
        self.turn = 0
        self.done = False

    def _attribute(self):
        if self.task == "label":
            return SemanticLabel(self.act)
        if not self.facts:
            raise CLIError("invalid", "no knowledge facts set; use :fact TEXT")
        return knowledge_doc(self.facts, self.bundle.vocab)

    def _command(self, line: str) -> list[str]:
        name, _, arg = line[1:].partition(" ")
        arg = arg.strip()
        try:
            if name == "quit":
                self.done = True
                return ["bye"]
            if name == "act":
                if self.task != "label":
                    return ["error: :act needs a label-task side network"]
                self.act = act_id(arg)
                return [f"act = {ACTS[self.act]} (id {self.act})"]
            if name == "fact":
                if self.task != "knowledge":
                    return ["error: :fact needs a knowledge-task side network"]
                if not self.bundle.vocab.encode(arg):
                    return ["error: fact is empty"]
                self.facts.append(arg)
                return [f"facts = {self.facts}"]
            if name == "clear":
                self.facts, self.history = [], []
                return ["cleared facts and history"]
            if name in ("alpha", "beta"):
                value = None if arg.lower() in ("off", "none", "") else float(arg)
                if value is not None and not 0.0 <= value <= 1.0:
                    return [f"error: {name} must lie in [0, 1] or be 'off'"]
                setattr(self, name, value)
                return [f"{name} = {'learned' if value is None else value}"]
            if name == "verbose":
                self.verbose = arg.lower() not in ("off", "0", "false")
                return [f"verbose = {'on' if self.verbose else 'off'}"]
        except ValueError as e:
            return [f"error: {e}"]
        return [f"error: unknown command :{name}; try :act :fact :clear :alpha :beta :verbose :quit"]

    def context_ids(self) -> list[int]:
        ids: list[int] = []
        for utt in self.history[-_window(self.task):]:
            ids.extend(self.bundle.vocab.encode(utt))
            ids.append(SEP)
        return ids

    def handle(self, line: str) -> list[str]:
        line = line.strip()
        if not line:
            return []
        if line.startswith(":"):
            return self._command(line)
        try:
            attr = self._attribute()
        except CLIError as e:
            return [f"error: {e}"]
        self.history.append(line)
        rng = example_rng(self.seed, self.turn)
        self.turn += 1
        out = generate_controlled(self.bundle.model, self.side, self.context_ids(), attr, self.gen, rng,
                                  alpha_override=self.alpha, beta_override=self.beta, trace=self.verbose)
        vocab = self.bundle.vocab
        text = vocab.decode(out.tokens)
        self.history.append(text)
        lines = [f"bot: {text}"]
        for i, s in enumerate(out.steps):
            beta = "-" if s.beta is None else f"{s.beta:.4f}"
            top = " ".join(f"{vocab.itos[j]}:{p:.3f}" for j, p in s.top)
            lines.append(f"  t={i + 1} token={vocab.itos[s.token]} alpha={s.alpha:.4f} beta={beta} top5={top}")
        return lines


def run_session(session: Session, inputs, out: TextIO, prompt: bool = False) -> list[dict]:
    transcript = []
    for line in inputs:
        if prompt:
            out.write("> ")
            out.flush()
        lines = session.handle(line.rstrip("\n"))
        for ln in lines:
            out.write(ln + "\n")
        out.flush()
        transcript.append({"input": line.rstrip("\n"), "output": lines})
        if session.done:
            break
    return transcript


def cmd_repl(args, cfg: ExperimentConfig) -> None:
    st = Stage("repl", cfg)
    bundle = load_base_dir(_arg_path(args, "base"))
    side, man = load_side_dir(_arg_path(args, "side"), bundle)
    seed = st.seed_for("decode")
    session = Session(bundle, side, man["task"], cfg, seed)
    header = {"seed": seed, "task": man["task"], "base_hash": bundle.model.digest, "side_hash": side.params.digest()}
    if args.replay is not None:
        rows = read_transcript(args.replay)
        if rows[0] != header:
            raise CLIError("hash-mismatch", "transcript was recorded with different checkpoints or seed")
        replayed = run_session(session, [r["input"] for r in rows[1:]], sys.stdout)
        for i, (old, new) in enumerate(zip(rows[1:], replayed), start=1):
            if old["output"] != new["output"]:
                raise CLIError("replay-mismatch", f"turn {i} ({old['input']!r}) produced different output")
        if len(replayed) != len(rows) - 1:
            raise CLIError("replay-mismatch", "replay ended early")
        sys.stdout.write(f"replay ok: {len(replayed)} inputs reproduced\n")
        transcript = replayed
    else:
        transcript = run_session(session, sys.stdin, sys.stdout, prompt=sys.stdin.isatty())
    path = st.path("transcript.jsonl")
    write_jsonl_raw(path, [header] + transcript)
    st.finish()


def write_jsonl_raw(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows),
                    encoding="utf-8")


def read_transcript(path) -> list[dict]:
    rows = [json.loads(x) for x in _need(Path(path)).read_text(encoding="utf-8").splitlines() if x.strip()]
    if not rows or "seed" not in rows[0]:
        raise CLIError("invalid", f"{path}: not a session transcript")
    return rows


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", f"{self.prog}: {message}")


COMMANDS = {
    "synth": (cmd_synth, "write a seeded synthetic corpus split into train/val/test"),
    "train-base": (cmd_train_base, "build the vocabulary, train the base LM, freeze and save it"),
    "train-classifier": (cmd_train_classifier, "fit and freeze the act classifier on base states (label task)"),
    "train-side": (cmd_train_side, "train a side network over the frozen base"),
    "finetune": (cmd_finetune, "fine-tune a copy of the base LM (baseline)"),
    "train-discriminator": (cmd_train_discriminator, "train the future-act discriminator for weighted decoding"),
    "generate": (cmd_generate, "decode a split with one method; write hyp.jsonl and ref.jsonl"),
    "evaluate": (cmd_evaluate, "score a hypothesis file; write report.json and report.txt"),
    "bench-decode": (cmd_bench_decode, "median seconds per token over 10 contexts"),
    "grid-lambda": (cmd_grid_lambda, "train one side network per lambda and keep the best on validation"),
    "repl": (cmd_repl, "interactive controlled generation with transcript save and replay"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sidecontrol", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON experiment config; flags override its fields")
        p.add_argument("--seed", type=int, help="master seed (required here or in the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--task", choices=("knowledge", "label"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. side.max_steps=500 or lam=1e5")
        if name == "synth":
            p.add_argument("--n", type=int, dest="n_dialogues", help="number of dialogues")
            continue
        if name != "repl":
            p.add_argument("--data", help="directory holding train.jsonl, val.jsonl and test.jsonl")
            for split in ("train", "val", "test"):
                p.add_argument(f"--{split}", help=f"{split} corpus (JSONL)")
        if name not in ("train-base", "evaluate"):
            p.add_argument("--base", help="train-base output directory", required=True)
        if name in ("train-side", "grid-lambda", "generate", "bench-decode"):
            p.add_argument("--classifier", help="train-classifier output directory (label task)")
        if name in ("train-side", "grid-lambda"):
            p.add_argument("--lam", type=float, help="control-loss weight")
        if name == "grid-lambda":
            p.add_argument("--grid", type=float, nargs="+", help="lambda values to try")
            p.add_argument("--seeds", type=int, default=1, help="side-training seeds averaged per lambda")
            p.add_argument("--val-generations", type=int, default=200, help="validation responses decoded per run")
            p.add_argument("--include-zero", action="store_true", help="also score lambda=0 (not selectable)")
        if name in ("generate", "bench-decode", "evaluate", "repl"):
            p.add_argument("--side", help="train-side or grid-lambda output directory")
        if name in ("generate", "bench-decode", "evaluate"):
            p.add_argument("--finetuned", help="finetune output directory")
        if name in ("generate", "bench-decode"):
            p.add_argument("--discriminator", help="train-discriminator output directory (label task)")
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--limit", type=int, help="decode at most this many examples")
        if name == "generate":
            p.add_argument("--method", choices=METHODS, required=True)
            p.add_argument("--alpha", type=float, help="diagnostic mixture override for sidecontrol")
        if name == "bench-decode":
            p.add_argument("--methods", default="base,sidecontrol", help="comma-separated methods")
            p.add_argument("--repetitions", type=int, default=3)
        if name == "evaluate":
            p.add_argument("--hyp", required=True, help="hypothesis JSONL")
            p.add_argument("--ref", required=True, help="reference JSONL")
            p.add_argument("--method", default="model", help="row name in the report")
            p.add_argument("--base", help="base directory (controllability and PPL need it)")
            p.add_argument("--no-ppl", action="store_true", help="skip perplexity")
            p.add_argument("--bench", help="bench-decode bench.json supplying s/tok")
            p.add_argument("--append", action="store_true", help="merge into an existing report.json")
        if name in ("evaluate", "grid-lambda"):
            p.add_argument("--eval-classifier", help="saved eval classifier (trained on the corpus if absent)")
            p.add_argument("--embeddings", help="GloVe-format vectors (default: base token embeddings)")
        if name == "repl":
            p.add_argument("--replay", help="transcript to replay and verify")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    flags = {"seed": args.seed, "out": args.out, "task": args.task,
             "n_dialogues": getattr(args, "n_dialogues", None), "lam": getattr(args, "lam", None),
             "grid": getattr(args, "grid", None), "limit": getattr(args, "limit", None)}
    data = getattr(args, "data", None)
    for split in ("train", "val", "test"):
        flags[split] = getattr(args, split, None) or (str(Path(data) / f"{split}.jsonl") if data else None)
    return apply_overrides(cfg, flags, args.set)


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, CLIError):
        return exc.kind
    if isinstance(exc, CompatibilityError):
        return "hash-mismatch"
    if isinstance(exc, FileNotFoundError):
        return "missing-artifact"
    if isinstance(exc, CorpusError):
        return "corpus"
    if isinstance(exc, (bl.FrozenModelError, FrozenClassifierError)):
        return "frozen"
    return "invalid"


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = argv[0] if argv and not argv[0].startswith("-") else None
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CLIError("usage", "sidecontrol: a subcommand is required (see --help)")
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        COMMANDS[command][0](args, resolve_config(args))
    except (CLIError, CompatibilityError, CorpusError, OSError, ValueError, TypeError, KeyError,
            bl.FrozenModelError, FrozenClassifierError) as exc:
        kind = _error_kind(exc)
        message = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        sys.stderr.write(json.dumps({"error": kind, "command": command, "message": message}) + "\n")
        return EXIT_CODES.get(kind, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
