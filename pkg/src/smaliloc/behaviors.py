"""Malicious-behavior taxonomy and the family -> behavior lookup table."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .errors import InputError

CANONICAL_NAMES: tuple[str, ...] = (
    "Privacy Stealing",
    "SMS/CALL Abuse",
    "Remote Control",
    "Bank/Financial Stealing",
    "Ransom",
    "Accessibility Abuse",
    "Privilege Escalation",
    "Stealthy Download",
    "Aggressive Advertising",
    "Miner",
    "Tricky Behavior",
    "Premium Service Abuse",
)

ALL_BEHAVIORS = "all_behaviors"
ERROR = "error"


class BadTaxonomy(InputError):
    pass


class BadFamilyTable(InputError):
    pass


class UnknownFamily(InputError):
    pass


@dataclass(frozen=True)
class Behavior:
    id: int
    name: str
    description: str


@dataclass(frozen=True)
class FamilyTable:
    entries: Mapping[str, frozenset[int]]
    default_policy: str = ALL_BEHAVIORS

    def __post_init__(self):
        if self.default_policy not in (ALL_BEHAVIORS, ERROR):
            raise BadFamilyTable(f"unknown default_policy {self.default_policy!r}")
        normalized = {}
        for name, ids in self.entries.items():
            if not ids:
                raise BadFamilyTable(f"family {name!r} has no behaviors")
            bad = sorted(i for i in ids if not isinstance(i, int) or not 1 <= i <= len(CANONICAL_NAMES))
            if bad:
                raise BadFamilyTable(f"family {name!r} references unknown behavior ids {bad}")
            normalized[_family_key(name)] = frozenset(ids)
        object.__setattr__(self, "entries", normalized)


def _family_key(name: str) -> str:
    return name.strip().casefold()


def _read_yaml(path: Path | None, default_name: str, error: type[InputError]):
    if path is None:
        text = resources.files("smaliloc.data").joinpath(default_name).read_text(encoding="utf-8")
        origin = f"<default {default_name}>"
    else:
        path = Path(path)
        if not path.is_file():
            raise error(f"file not found: {path}")
        text = path.read_text(encoding="utf-8")
        origin = str(path)
    try:
        return yaml.safe_load(text), origin
    except yaml.YAMLError as exc:
        raise error(f"{origin}: invalid YAML: {exc}") from exc


def load_taxonomy(path: str | Path | None = None) -> list[Behavior]:
    """Load the 12-behavior taxonomy; ``None`` loads the bundled default."""
    data, origin = _read_yaml(path, "behaviors.yaml", BadTaxonomy)
    entries = data.get("behaviors") if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise BadTaxonomy(f"{origin}: expected a top-level 'behaviors' list")
    if len(entries) != len(CANONICAL_NAMES):
        raise BadTaxonomy(f"{origin}: expected {len(CANONICAL_NAMES)} behaviors, found {len(entries)}")

    behaviors: dict[int, Behavior] = {}
    for entry in entries:
        try:
            bid, name, desc = int(entry["id"]), str(entry["name"]).strip(), str(entry["description"]).strip()
        except (KeyError, TypeError, ValueError) as exc:
            raise BadTaxonomy(f"{origin}: malformed entry {entry!r}") from exc
        if bid in behaviors:
            raise BadTaxonomy(f"{origin}: duplicate behavior id {bid}")
        if not 1 <= bid <= len(CANONICAL_NAMES):
            raise BadTaxonomy(f"{origin}: behavior id {bid} out of range")
        if name != CANONICAL_NAMES[bid - 1]:
            raise BadTaxonomy(f"{origin}: unknown name {name!r} for id {bid}")
        if not desc:
            raise BadTaxonomy(f"{origin}: empty description for id {bid}")
        behaviors[bid] = Behavior(bid, name, desc)
    return [behaviors[i] for i in sorted(behaviors)]


def load_family_table(path: str | Path | None = None) -> FamilyTable:
    data, origin = _read_yaml(path, "families.yaml", BadFamilyTable)
    if not isinstance(data, dict):
        raise BadFamilyTable(f"{origin}: expected a mapping")
    families = data.get("families") or {}
    if not isinstance(families, dict):
        raise BadFamilyTable(f"{origin}: 'families' must be a mapping")
    return FamilyTable(
        entries={str(k): frozenset(v or ()) for k, v in families.items()},
        default_policy=data.get("default_policy", ALL_BEHAVIORS),
    )


def lookup_family(table: FamilyTable, family: str | None, taxonomy: list[Behavior]) -> list[Behavior]:
    """Behaviors to probe for ``family``, ordered by id."""
    ids = table.entries.get(_family_key(family)) if family else None
    if ids is None:
        if table.default_policy == ERROR:
            raise UnknownFamily(f"family {family!r} is not in the lookup table")
        return list(taxonomy)
    by_id = {b.id: b for b in taxonomy}
    return [by_id[i] for i in sorted(ids)]


def behavior_by_name(taxonomy: list[Behavior], name: str) -> Behavior | None:
    key = name.strip().casefold()
    for b in taxonomy:
        if b.name.casefold() == key:
            return b
    return None
