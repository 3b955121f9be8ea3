"""Prompt bank: every generated prompt with its (action, attribute, template) provenance.

Within an action, prompts are ordered by template id, then by taxonomy
attribute order. Prompt-embedding matrices use the same row order.
"""

from __future__ import annotations

import datetime as _dt
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .._io import read_json, write_json
from ..errors import ActPromptError, BadParams, GenerationIncomplete, ManifestError
from .llm import LlmClient
from .parsing import parse_response
from .postprocess import DEFAULT_TOKENIZER, ActionConditionedPrompt, Tokenizer, postprocess
from .taxonomy import ALIAS_TABLE_VERSION, DEFAULT_TAXONOMY, AttributeTaxonomy
from .templates import DEFAULT_TEMPLATE_IDS, build_query, get_template

logger = logging.getLogger(__name__)

BANK_VERSION = f"1+aliases{ALIAS_TABLE_VERSION}"


def expected_prompt_count(n_actions: int, n_templates: int, n_attributes: int = 12) -> int:
    if n_actions < 1 or n_templates < 1:
        raise BadParams("need at least one action and one template")
    return n_templates * n_attributes * n_actions


def default_timestamp() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` when it is set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return t.isoformat().replace("+00:00", "Z")


@dataclass
class PromptBank:
    taxonomy: AttributeTaxonomy
    templates_used: list[int]
    entries: dict[str, list[ActionConditionedPrompt]]
    version: str = BANK_VERSION
    created_at: str = ""
    failures: list[dict] = field(default_factory=list)
    prompt_embeddings: str | None = None

    def __post_init__(self) -> None:
        seen = set()
        for action, prompts in self.entries.items():
            for p in prompts:
                key = (p.action, p.attribute, p.template_id)
                if p.action != action:
                    raise BadParams(f"prompt for {p.action!r} filed under {action!r}")
                if key in seen:
                    raise BadParams(f"duplicate prompt {key}")
                seen.add(key)

    @property
    def actions(self) -> list[str]:
        return list(self.entries)

    @property
    def complete(self) -> bool:
        want = len(self.taxonomy.attributes) * len(self.templates_used)
        return not self.failures and all(len(p) == want for p in self.entries.values())

    def __len__(self) -> int:
        return sum(len(p) for p in self.entries.values())

    def texts(self, action: str) -> list[str]:
        return [p.final_text for p in self.entries[action]]

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "created_at": self.created_at,
            "taxonomy": self.taxonomy.to_dict(),
            "templates_used": list(self.templates_used),
            "entries": {a: [p.to_dict() for p in ps] for a, ps in self.entries.items()},
            "failures": list(self.failures),
        }
        if self.prompt_embeddings is not None:
            d["prompt_embeddings"] = self.prompt_embeddings
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PromptBank":
        try:
            return cls(
                taxonomy=AttributeTaxonomy.from_dict(d["taxonomy"]),
                templates_used=[int(t) for t in d["templates_used"]],
                entries={a: [ActionConditionedPrompt.from_dict(x) for x in ps] for a, ps in d["entries"].items()},
                version=d.get("version", BANK_VERSION),
                created_at=d.get("created_at", ""),
                failures=list(d.get("failures", [])),
                prompt_embeddings=d.get("prompt_embeddings"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed prompt bank: {exc}") from exc

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "PromptBank":
        return cls.from_dict(read_json(path))


def _generate_pair(action, tid, taxonomy, client, tokenizer) -> list[ActionConditionedPrompt]:
    query = build_query(action, get_template(tid), taxonomy)
    reply = client.complete(query)
    sentences = parse_response(reply, taxonomy, action=action)
    return [postprocess(action, name, sentences[name], tokenizer, template_id=tid) for name in taxonomy.names]


def generate_bank(
    actions: Sequence[str],
    templates: Sequence[int] | None = None,
    taxonomy: AttributeTaxonomy = DEFAULT_TAXONOMY,
    client: LlmClient | None = None,
    *,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    allow_partial: bool = False,
    concurrency: int = 4,
    created_at: str | None = None,
) -> PromptBank:
    """Query the LLM for every (action, template) pair and assemble a bank.

    Requests run on up to ``concurrency`` threads; assembly follows input
    order, so the result is deterministic. Failed pairs raise
    :class:`GenerationIncomplete` unless ``allow_partial`` is set, in which
    case they are recorded in ``bank.failures``.
    """
    if client is None:
        raise BadParams("an LLM client is required")
    actions = [a.strip() for a in actions]
    if not actions or any(not a for a in actions):
        raise BadParams("actions must be a non-empty list of non-empty names")
    if len(set(actions)) != len(actions):
        raise BadParams("duplicate action names")
    tids = sorted(templates if templates else DEFAULT_TEMPLATE_IDS)
    for t in tids:
        get_template(t)
    pairs = [(a, t) for a in actions for t in tids]

    def job(pair):
        try:
            return _generate_pair(pair[0], pair[1], taxonomy, client, tokenizer), None
        except ActPromptError as exc:
            return None, f"{exc.code}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(job, pairs))

    entries: dict[str, list[ActionConditionedPrompt]] = {a: [] for a in actions}
    failures = []
    for (action, tid), (prompts, err) in zip(pairs, results):
        if err is not None:
            logger.warning("generation failed for %r with template %d: %s", action, tid, err)
            failures.append({"action": action, "template_id": tid, "reason": err})
        else:
            entries[action].extend(prompts)
    bank = PromptBank(
        taxonomy=taxonomy,
        templates_used=tids,
        entries={a: ps for a, ps in entries.items() if ps},
        created_at=created_at if created_at is not None else default_timestamp(),
        failures=failures,
    )
    if failures and not allow_partial:
        raise GenerationIncomplete([(f["action"], f["template_id"], f["reason"]) for f in failures], partial=bank)
    return bank
