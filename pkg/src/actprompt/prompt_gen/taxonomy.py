"""The attribute taxonomy used to structure prompt generation."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import BadParams

ASPECTS = ("Scene", "Actor", "Body")
ATTRIBUTES_PER_ASPECT = 4


@dataclass(frozen=True)
class Attribute:
    name: str
    aspect: str
    description: str


@dataclass(frozen=True)
class AttributeTaxonomy:
    aspects: tuple[str, ...]
    attributes: tuple[Attribute, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "aspects", tuple(self.aspects))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if len(self.aspects) != 3 or len(set(self.aspects)) != 3:
            raise BadParams(f"taxonomy needs 3 distinct aspects, got {self.aspects}")
        names = [a.name for a in self.attributes]
        if len({n.lower() for n in names}) != len(names):
            raise BadParams("attribute names must be unique")
        for aspect in self.aspects:
            n = sum(a.aspect == aspect for a in self.attributes)
            if n != ATTRIBUTES_PER_ASPECT:
                raise BadParams(f"aspect {aspect!r} has {n} attributes, need {ATTRIBUTES_PER_ASPECT}")
        if any(a.aspect not in self.aspects for a in self.attributes):
            raise BadParams("attribute refers to an unknown aspect")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def by_aspect(self, aspect: str) -> list[Attribute]:
        return [a for a in self.attributes if a.aspect == aspect]

    def get(self, name: str) -> Attribute:
        key = name.strip().lower()
        for a in self.attributes:
            if a.name.lower() == key:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "aspects": list(self.aspects),
            "attributes": [
                {"name": a.name, "aspect": a.aspect, "description": a.description} for a in self.attributes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeTaxonomy":
        return cls(
            aspects=tuple(d["aspects"]),
            attributes=tuple(Attribute(x["name"], x["aspect"], x["description"]) for x in d["attributes"]),
        )


DEFAULT_TAXONOMY = AttributeTaxonomy(
    aspects=ASPECTS,
    attributes=(
        Attribute("Scene Type", "Scene", "Soccer field, Kitchen, Street, Gymnasium, etc."),
        Attribute("Scene Elements", "Scene", "Soccer ball, Goalpost, Stove, Traffic sign, etc."),
        Attribute("Scene Conditions", "Scene", "Sunny, Rainy, Indoor, Outdoor, etc."),
        Attribute("Prop Usage", "Scene", "Soccer ball, Knife, Cookware, etc."),
        Attribute("Number of Actors", "Actor", "Single, Double, Multiple."),
        Attribute("Clothing", "Actor", "Sportswear, Chef's uniform, Police uniform, etc."),
        Attribute("Actor Identity", "Actor", "Athlete, Chef, Policeman, etc."),
        Attribute("Facial Expression", "Actor", "Happy, Sad, Angry, Surprised, etc."),
        Attribute("Body Move Speed", "Body", "Fast, Medium, Slow, etc."),
        Attribute("Body Part Movement", "Body", "Hand, Leg, Head, etc."),
        Attribute("Body Posture", "Body", "Standing, Sitting, Lying, Bending, etc."),
        Attribute("Body Position", "Body", "In contact with ground, Off the ground, etc."),
    ),
)

# Long-form keys seen in LLM replies, keyed by normalized form (see ``normalize_key``).
# Bump ALIAS_TABLE_VERSION whenever an entry changes meaning.
ALIAS_TABLE_VERSION = "1"
ALIASES: dict[str, str] = {
    "the usage of props in the action": "Prop Usage",
    "usage of props in the action": "Prop Usage",
    "usage of props": "Prop Usage",
    "props usage": "Prop Usage",
    "prop use": "Prop Usage",
    "props": "Prop Usage",
    "number of actor": "Number of Actors",
    "actor count": "Number of Actors",
    "clothes": "Clothing",
    "actor clothing": "Clothing",
    "identity of the actor": "Actor Identity",
    "body movement speed": "Body Move Speed",
    "movement speed": "Body Move Speed",
    "body parts movement": "Body Part Movement",
    "body part movements": "Body Part Movement",
    "posture": "Body Posture",
    "position": "Body Position",
}


def normalize_key(key: str) -> str:
    key = key.replace("’", "'").lower()
    key = re.sub(r"[^a-z0-9' ]+", " ", key)
    return re.sub(r"\s+", " ", key).strip()


def resolve_attribute(key: str, taxonomy: AttributeTaxonomy) -> str | None:
    """Map a reply key to a taxonomy attribute name, or None."""
    norm = normalize_key(key)
    for a in taxonomy.attributes:
        if normalize_key(a.name) == norm:
            return a.name
    alias = ALIASES.get(norm)
    if alias is not None and alias in taxonomy.names:
        return alias
    return None
