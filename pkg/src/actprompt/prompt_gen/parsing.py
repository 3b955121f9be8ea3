"""Extracting attribute descriptions from free-form LLM replies."""

from __future__ import annotations

import json
from typing import Mapping

from ..errors import MalformedJson, MissingAttribute
from .taxonomy import AttributeTaxonomy, normalize_key, resolve_attribute

_decoder = json.JSONDecoder()


def extract_json_object(reply: str) -> dict:
    """Return the first decodable JSON object in ``reply``.

    Surrounding prose and Markdown code fences are skipped: every ``{`` is
    tried as a start position until one decodes to a dict.
    """
    pos = reply.find("{")
    while pos != -1:
        try:
            obj, _ = _decoder.raw_decode(reply, pos)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        pos = reply.find("{", pos + 1)
    raise MalformedJson("no JSON object found in reply")


def _select_block(obj: dict, taxonomy: AttributeTaxonomy, action: str | None) -> dict:
    # Replies are either {attribute: sentence} or {action: {attribute: sentence}}.
    if any(resolve_attribute(k, taxonomy) for k in obj):
        return obj
    nested = {k: v for k, v in obj.items() if isinstance(v, dict)}
    if not nested:
        return obj
    if action is not None:
        want = normalize_key(action)
        for k, v in nested.items():
            if normalize_key(k) == want:
                return v
    if len(nested) == 1:
        return next(iter(nested.values()))
    raise MalformedJson(f"reply holds several actions {sorted(nested)} and none matches {action!r}")


def _as_sentence(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, list) and all(isinstance(x, str) for x in value):
        return " ".join(value)
    raise MalformedJson(f"attribute value must be a string, got {type(value).__name__}")


def parse_response(reply: str, taxonomy: AttributeTaxonomy, action: str | None = None) -> dict[str, str]:
    """Map each taxonomy attribute to its sentence, in taxonomy order.

    Keys match attribute names case-insensitively or through the alias
    table. Raises :class:`MissingAttribute` for the first attribute absent
    from the reply.
    """
    block = _select_block(extract_json_object(reply), taxonomy, action)
    found: dict[str, str] = {}
    for key, value in block.items():
        name = resolve_attribute(key, taxonomy)
        if name is not None and name not in found:
            found[name] = _as_sentence(value)
    for name in taxonomy.names:
        if name not in found:
            raise MissingAttribute(name)
    return {name: found[name] for name in taxonomy.names}


def serialize_descriptions(descriptions: Mapping[str, str], action: str | None = None) -> str:
    """Inverse of :func:`parse_response` for well-formed maps."""
    obj = {action: dict(descriptions)} if action is not None else dict(descriptions)
    return json.dumps(obj, ensure_ascii=False, indent=2)
