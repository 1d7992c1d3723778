"""Text prompts describing a clip, and a closed-vocabulary tokenizer."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .data import Clip

ORDINAL = "this is the {ordinal} action in the video"
STATISTICAL = "this video clip contains {count} actions in total"
SEMANTIC = "{ordinal}, the person is performing the action step of {name}"
INTEGRATED_SEP = ". "

KINDS = ("ordinal", "statistical", "semantic", "integrated")
MAX_ORDINAL = 32

PAD, UNK = "<pad>", "<unk>"
_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def ordinal(i: int) -> str:
    """1 -> '1st', 2 -> '2nd', 11 -> '11th', 23 -> '23rd'."""
    if 10 <= i % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(i % 10, "th")
    return f"{i}{suffix}"


@dataclass(frozen=True)
class PromptRecord:
    kind: str
    text: str
    slots: tuple
    tokens: tuple[int, ...] = ()


def ordinal_prompt(i: int) -> str:
    return ORDINAL.format(ordinal=ordinal(i))


def statistical_prompt(n: int) -> str:
    return STATISTICAL.format(count=n)


def semantic_prompt(i: int, name: str) -> str:
    return SEMANTIC.format(ordinal=ordinal(i), name=name)


def integrated_prompt(names: Sequence[str]) -> str:
    return INTEGRATED_SEP.join(semantic_prompt(i, n) for i, n in enumerate(names, 1))


def tokenize_text(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Tokenizer:
    """Word-level vocabulary over every template, ordinal, count and class name."""

    def __init__(self, class_names: Sequence[str], max_count: int = MAX_ORDINAL):
        words: set[str] = set()
        for template in (ORDINAL, STATISTICAL, SEMANTIC, INTEGRATED_SEP):
            words.update(tokenize_text(re.sub(r"\{\w+\}", " ", template)))
        for i in range(1, max_count + 1):
            words.update(tokenize_text(ordinal(i)))
            words.update(tokenize_text(str(i)))
        for name in class_names:
            words.update(tokenize_text(name))
        self.vocab = [PAD, UNK, *sorted(words)]
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.index.get(w, self.unk_id) for w in tokenize_text(text))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab[i] for i in ids]


def render_prompts(clip: Clip, class_names: Sequence[str],
                   tokenizer: Tokenizer | None = None) -> list[PromptRecord]:
    """Ordinal prompts, one statistical prompt, semantic prompts, then the
    integrated prompt, in that order."""

    def rec(kind: str, text: str, slots: tuple) -> PromptRecord:
        return PromptRecord(kind, text, slots, tokenizer.encode(text) if tokenizer else ())

    names = [class_names[a] for a in clip.actions]
    out = [rec("ordinal", ordinal_prompt(i), (i,)) for i in range(1, len(names) + 1)]
    out.append(rec("statistical", statistical_prompt(len(names)), (len(names),)))
    out += [rec("semantic", semantic_prompt(i, n), (i, n)) for i, n in enumerate(names, 1)]
    out.append(rec("integrated", integrated_prompt(names), tuple(names)))
    return out
