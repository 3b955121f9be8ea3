"""LLM-prompt templates and query construction."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import BadParams
from .taxonomy import AttributeTaxonomy


@dataclass(frozen=True)
class LlmPromptTemplate:
    id: int
    pattern: str

    def __post_init__(self) -> None:
        if not 1 <= self.id <= 5:
            raise BadParams(f"template id must be in 1..5, got {self.id}")
        for ph in ("{action}", "{attribute}"):
            if self.pattern.count(ph) != 1:
                raise BadParams(f"template {self.id} must contain {ph} exactly once")

    def render(self, action: str, attribute: str) -> str:
        return self.pattern.replace("{action}", action).replace("{attribute}", attribute)


TEMPLATES: dict[int, LlmPromptTemplate] = {
    t.id: t
    for t in (
        LlmPromptTemplate(1, "Describe the following actions by adding one sentence about its {attribute} for {action}."),
        LlmPromptTemplate(2, "Visually describe {action} about its {attribute} in one sentence."),
        LlmPromptTemplate(3, "What are the primary characteristics of {action} in terms of its {attribute}, explain in one sentence."),
        LlmPromptTemplate(4, "Explain how {action} typically manifests in terms of its {attribute}, providing a descriptive sentence."),
        LlmPromptTemplate(5, "Analyze {action} in the context of its {attribute}, and describe it in one sentence."),
    )
}

DEFAULT_TEMPLATE_IDS = (1, 3, 4)


def get_template(tid: int) -> LlmPromptTemplate:
    try:
        return TEMPLATES[tid]
    except KeyError:
        raise BadParams(f"unknown template id {tid}; available: {sorted(TEMPLATES)}") from None


def parse_template_ids(text: str) -> list[int]:
    """``"1,3,4"`` -> ``[1, 3, 4]``."""
    try:
        ids = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise BadParams(f"bad template list {text!r}") from None
    for i in ids:
        get_template(i)
    if len(set(ids)) != len(ids) or not ids:
        raise BadParams(f"template list must be non-empty and unique: {text!r}")
    return ids


def build_query(action: str, template: LlmPromptTemplate, taxonomy: AttributeTaxonomy) -> str:
    """One chat message asking for one sentence per attribute, as a JSON object."""
    if not action or not action.strip():
        raise ValueError("action must be non-empty")
    action = action.strip()
    lines = [f"Action: {action}", ""]
    for i, attr in enumerate(taxonomy.attributes, 1):
        lines.append(f"{i}. {attr.name} (e.g. {attr.description}) {template.render(action, attr.name)}")
    names = ", ".join(f'"{n}"' for n in taxonomy.names)
    lines += [
        "",
        "Output the results in a JSON format: a single JSON object where each key is one of "
        f"the attribute names {names} and the corresponding value is the descriptive sentence "
        "for that attribute. Write exactly one sentence per key and nothing outside the JSON object.",
    ]
    return "\n".join(lines)
