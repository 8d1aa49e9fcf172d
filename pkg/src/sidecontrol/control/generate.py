"""Autoregressive controlled decoding with a frozen base and a trained side network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import diffcore as dc
from ..baselm import BaseLM, GenerationConfig, hidden_states, prompt_ids, sample_top_k
from ..textdata import EOS, KnowledgeDoc, SemanticLabel
from .nets import CompatibilityError, KnowledgeSideNet, LabelSideNet, _SideNet


@dataclass
class StepTrace:
    token: int
    alpha: float
    beta: float | None
    top: list[tuple[int, float]]


@dataclass
class ControlledOutput:
    tokens: list[int]
    steps: list[StepTrace] = field(default_factory=list)
    coverage: np.ndarray | None = None
    dists: list[np.ndarray] = field(default_factory=list)


class ControlledDecoder:
    """Holds the per-response side state (encoded knowledge, coverage) for step-wise decoding."""

    def __init__(self, side: _SideNet, attribute, alpha_override: float | None = None,
                 beta_override: float | None = None):
        self.side = side
        self.attribute = attribute
        self.alpha_override = alpha_override
        self.beta_override = beta_override
        self.coverage = None
        if isinstance(side, KnowledgeSideNet):
            if not isinstance(attribute, KnowledgeDoc):
                raise TypeError("knowledge control needs a KnowledgeDoc attribute")
            self.k_ids = np.array(attribute.tokens, dtype=np.int64)[None, :]
            with dc.no_grad():
                self.h_k = side.encode(self.k_ids)
            self.coverage = np.zeros(self.k_ids.shape[1])
        elif isinstance(side, LabelSideNet):
            if not isinstance(attribute, SemanticLabel):
                raise TypeError("label control needs a SemanticLabel attribute")
        else:
            raise TypeError("unknown side network")

    def dist(self, h_b: np.ndarray) -> tuple[np.ndarray, float, float | None]:
        """Final distribution for one base state (D,), plus the alpha and beta used."""
        h = h_b[None, None, :]
        with dc.no_grad():
            if isinstance(self.side, KnowledgeSideNet):
                out = self.side.step(self.h_k, h, None, self.alpha_override, self.beta_override)
                final = self.side.final_dist(out, self.k_ids).data[0, 0]
                a = out.a.data[0, 0]
                self.coverage = self.coverage + a
                return final, float(out.alpha.data.reshape(-1)[0]), float(out.beta.data.reshape(-1)[0])
            out = self.side.step(np.array([self.attribute.act]), h, self.alpha_override)
            final = self.side.final_dist(out).data[0, 0]
            return final, float(np.asarray(out.alpha.data).reshape(-1)[0]), None


def check_vocab(side_manifest: dict | None, vocab_hash: str | None) -> None:
    if side_manifest is None or vocab_hash is None:
        return
    if side_manifest.get("vocab_hash") != vocab_hash:
        raise CompatibilityError("vocabulary hash of the side checkpoint does not match")


def generate_controlled(base: BaseLM, side: _SideNet, context_ids: Sequence[int], attribute,
                        gen: GenerationConfig, rng: np.random.Generator | None = None,
                        alpha_override: float | None = None, beta_override: float | None = None,
                        side_manifest: dict | None = None, vocab_hash: str | None = None,
                        trace: bool = False, keep_dists: bool = False) -> ControlledOutput:
    """Top-k sampling from the fused (and, for knowledge, copy-mixed) head until EOS or max length."""
    check_vocab(side_manifest, vocab_hash)
    if side.base is not base and side.base.digest != base.digest:
        raise CompatibilityError("side network is attached to a different base model")
    rng = rng if rng is not None else np.random.default_rng(gen.seed)
    dec = ControlledDecoder(side, attribute, alpha_override, beta_override)
    ctx = prompt_ids(base, context_ids, gen.max_len)
    out = ControlledOutput([])
    for _ in range(gen.max_len):
        h = hidden_states(base, ctx, out.tokens)[-1]
        dist, alpha, beta = dec.dist(h)
        if keep_dists:
            out.dists.append(dist)
        tok = sample_top_k(dist, gen.top_k, rng)
        if trace:
            top = np.argsort(-dist, kind="stable")[:5]
            out.steps.append(StepTrace(tok, alpha, beta, [(int(i), float(dist[i])) for i in top]))
        if tok == EOS:
            break
        out.tokens.append(tok)
    out.coverage = dec.coverage
    return out
