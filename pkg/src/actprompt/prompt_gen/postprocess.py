"""Cleaning LLM sentences into final prompts."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Protocol

from ..errors import EmptyAfterProcessing

MAX_TOKENS = 30
PREFIX = "a video of {action}."


class Tokenizer(Protocol):
    name: str

    def tokenize(self, text: str) -> list[str]: ...

    def detokenize(self, tokens: list[str]) -> str: ...


class WhitespaceTokenizer:
    """Counts whitespace-delimited words."""

    name = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: list[str]) -> str:
        return " ".join(tokens)


DEFAULT_TOKENIZER = WhitespaceTokenizer()


@dataclass(frozen=True)
class ActionConditionedPrompt:
    action: str
    attribute: str
    template_id: int
    raw_text: str
    final_text: str
    token_count: int

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "attribute": self.attribute,
            "template_id": self.template_id,
            "raw_text": self.raw_text,
            "final_text": self.final_text,
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionConditionedPrompt":
        return cls(
            action=d["action"],
            attribute=d["attribute"],
            template_id=int(d["template_id"]),
            raw_text=d["raw_text"],
            final_text=d["final_text"],
            token_count=int(d["token_count"]),
        )


_QUOTES = str.maketrans({"’": "'", "‘": "'", "“": '"', "”": '"', " ": " "})
_TERMINAL = ".!?;:,…"
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def clean_sentence(text: str) -> str:
    """Collapse whitespace, tidy punctuation spacing, end with exactly one period."""
    text = text.translate(_QUOTES)
    text = re.sub(r"\s+", " ", text).strip()
    text = re.sub(r"\s+([,.;:!?])", r"\1", text)
    text = re.sub(r"([,;:])(?=[^\s\d])", r"\1 ", text)
    text = text.strip(" \"'")
    text = text.rstrip(_TERMINAL + " ")
    return f"{text}." if text else ""


def truncate(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER, max_tokens: int = MAX_TOKENS) -> str:
    """Keep whole sentences up to ``max_tokens``; cut mid-sentence only if the first one is too long."""
    if len(tokenizer.tokenize(text)) <= max_tokens:
        return text
    kept: list[str] = []
    for sent in _SENTENCE_END.split(text):
        candidate = " ".join(kept + [sent])
        if len(tokenizer.tokenize(candidate)) > max_tokens:
            break
        kept.append(sent)
    if kept:
        return " ".join(kept)
    return tokenizer.detokenize(tokenizer.tokenize(text)[:max_tokens])


def postprocess(
    action: str,
    attribute: str,
    sentence: str,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    *,
    template_id: int = 1,
    max_tokens: int = MAX_TOKENS,
) -> ActionConditionedPrompt:
    """Turn one raw LLM sentence into a prefixed prompt of at most ``max_tokens`` tokens.

    The token budget covers the description only, not the ``a video of ...`` prefix.
    """
    if not sentence or not sentence.strip():
        raise EmptyAfterProcessing(f"{action}/{attribute}: empty sentence")
    text = clean_sentence(sentence)
    if not text:
        raise EmptyAfterProcessing(f"{action}/{attribute}: nothing left after cleaning")
    text = clean_sentence(truncate(text, tokenizer, max_tokens))
    n = len(tokenizer.tokenize(text))
    if n == 0:
        raise EmptyAfterProcessing(f"{action}/{attribute}: nothing left after truncation")
    final = f"{PREFIX.format(action=action)} {text}"
    return ActionConditionedPrompt(action, attribute, template_id, sentence, final, n)
