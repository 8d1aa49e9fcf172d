"""Named parameters, the text checkpoint container and weight initialisation."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .graph import Node

CKPT_HEADER = "SCKPT 1"


class CheckpointError(ValueError):
    pass


@dataclass
class Parameter:
    name: str
    node: Node
    trainable: bool = True

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"parameter name must be non-empty without whitespace: {self.name!r}")
        self.node.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.node.data

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad

    @property
    def shape(self) -> tuple:
        return self.node.shape

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.node.requires_grad = flag
        self.node.zero_grad()


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamSet:
    """Ordered, uniquely-named collection of parameters for one model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, trainable: bool = True) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Node(np.array(data, dtype=np.float64)), trainable)
        self._params[name] = p
        return p.node

    def __getitem__(self, name: str) -> Node:
        return self._params[name].node

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def freeze(self) -> None:
        for p in self._params.values():
            p.set_trainable(False)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.node.zero_grad()

    def replace_data(self, name: str, data) -> None:
        """Swap in new values (nodes are immutable, so a new node is built)."""
        old = self._params[name]
        data = np.array(data, dtype=np.float64)
        if data.shape != old.shape:
            raise CheckpointError(f"{name}: shape {data.shape} != {old.shape}")
        old.node = Node(data, old.trainable)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.replace_data(n, arr)

    def num_values(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    # -------------------------------------------------------------- serialisation

    def dumps(self) -> str:
        return dumps(self._params.values())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def load_into(self, path_or_text, *, strict: bool = True) -> None:
        params = loads(_read(path_or_text))
        if strict and set(params) != set(self._params):
            missing = sorted(set(self._params) - set(params))
            extra = sorted(set(params) - set(self._params))
            raise CheckpointError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for name, (arr, trainable) in params.items():
            if name in self._params:
                self.replace_data(name, arr)
                self._params[name].set_trainable(trainable)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def _read(path_or_text) -> str:
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str)
                                          and not path_or_text.startswith(CKPT_HEADER)):
        return Path(path_or_text).read_text(encoding="utf-8")
    return path_or_text


def dumps(params: Iterable[Parameter]) -> str:
    buf = io.StringIO()
    buf.write(CKPT_HEADER + "\n")
    for p in params:
        dims = " ".join(str(d) for d in p.shape)
        buf.write(f"name {p.name} shape {dims} trainable {int(p.trainable)}\n".replace("  ", " "))
        buf.write(" ".join(f"{v:.17g}" for v in p.data.reshape(-1)) + "\n")
    return buf.getvalue()


def loads(text: str) -> dict[str, tuple[np.ndarray, bool]]:
    lines = text.split("\n")
    if not lines or lines[0].strip() != CKPT_HEADER:
        raise CheckpointError(f"missing {CKPT_HEADER!r} header")
    out: dict[str, tuple[np.ndarray, bool]] = {}
    i = 1
    while i < len(lines) and lines[i].strip():
        head = lines[i].split()
        if len(head) < 5 or head[0] != "name" or head[2] != "shape" or head[-2] != "trainable":
            raise CheckpointError(f"line {i + 1}: malformed parameter header")
        name = head[1]
        shape = tuple(int(d) for d in head[3:-2])
        trainable = head[-1] == "1"
        if i + 1 >= len(lines):
            raise CheckpointError(f"line {i + 2}: missing values for {name}")
        raw = lines[i + 1].split()
        values = np.array([float(v) for v in raw], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"line {i + 2}: {name} expects {np.prod(shape)} values, got {values.size}")
        if name in out:
            raise CheckpointError(f"duplicate parameter {name!r}")
        out[name] = (values.reshape(shape), trainable)
        i += 2
    return out
