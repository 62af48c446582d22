"""Template-based text observations for gridworld events."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .gridworld import Event

HAZARD_NOUNS = ("lava", "water", "grass")


@dataclass(frozen=True)
class TextObservation:
    text: str
    source_event: Event


class TemplateTable:
    """Event -> sentence templates; the first template of each event is canonical."""

    def __init__(self, entries: dict[Event, list[str]]):
        missing = [e.value for e in Event if not entries.get(e)]
        if missing:
            raise ValueError(f"templates missing for events: {', '.join(missing)}")
        self._entries = {e: list(entries[e]) for e in Event}

    @classmethod
    def load(cls, path=None) -> "TemplateTable":
        if path is None:
            text = resources.files("safelang.data").joinpath("templates.tsv").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)

    @classmethod
    def parse(cls, text: str) -> "TemplateTable":
        entries: dict[Event, list[str]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, template = line.partition("\t")
            if not sep or not template.strip():
                raise ValueError(f"line {lineno}: expected '<event>\\t<template>'")
            try:
                event = Event(key.strip())
            except ValueError:
                raise ValueError(f"line {lineno}: unknown event {key.strip()!r}") from None
            entries.setdefault(event, []).append(template.strip())
        return cls(entries)

    def canonical(self, event: Event) -> str:
        return self._entries[Event(event)][0]

    def variants(self, event: Event) -> list[str]:
        return list(self._entries[Event(event)])

    def rows(self) -> list[tuple[Event, str]]:
        return [(e, self._entries[e][0]) for e in Event]


_DEFAULT: TemplateTable | None = None


def default_table() -> TemplateTable:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TemplateTable.load()
    return _DEFAULT


def template_table(table: TemplateTable | None = None) -> list[tuple[Event, str]]:
    return (table or default_table()).rows()


def describe(event, context: dict | None = None, *, table: TemplateTable | None = None,
             rng: np.random.Generator | None = None) -> TextObservation:
    """Render the sentence for ``event``.

    ``context`` fills ``{name}`` placeholders when a template uses them. Passing
    ``rng`` draws uniformly among the paraphrases (data generation only);
    without it the canonical sentence is returned.
    """
    event = Event(event)
    table = table or default_table()
    if rng is None:
        template = table.canonical(event)
    else:
        options = table.variants(event)
        template = options[int(rng.integers(len(options)))]
    text = template.format(**context) if context else template
    return TextObservation(text=text, source_event=event)
