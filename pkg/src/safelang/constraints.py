"""Constraint corpora, condensers and labelled constraint pairs.

A condenser maps a free-form constraint to a short canonical sentence. The
offline rule condenser looks for synonyms of each hazard and emits
``do not touch <hazard> tiles``; the remote condenser prompts a text
completion service. :class:`CondenserChain` tries them in order and keeps a
record of every fallback.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .remote import RemoteError, RemoteTextClient, ResponseCache, sha256

log = logging.getLogger(__name__)

HAZARD_LABELS = ("lava", "water", "grass")
DEFAULT_PROMPT = ("Summarize the following safety constraint as 'do not touch X tiles' "
                  "where X is the prohibited terrain: {constraint}")


class CorpusError(ValueError):
    pass


class NoMatch(LookupError):
    pass


class AmbiguousMatch(LookupError):
    pass


@dataclass(frozen=True)
class Constraint:
    id: str
    text: str
    prohibited: str

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError(f"constraint {self.id} has empty text")
        if self.prohibited not in HAZARD_LABELS:
            raise CorpusError(f"constraint {self.id} has unknown label {self.prohibited!r}")


@dataclass(frozen=True)
class CondensedConstraint:
    text: str
    origin: str


@dataclass(frozen=True)
class ConstraintPair:
    a: CondensedConstraint
    b: CondensedConstraint
    label: int


def canonical(hazard: str) -> str:
    return f"do not touch {hazard} tiles"


# --- corpus -------------------------------------------------------------------

def _data_text(name: str) -> str:
    return resources.files("safelang.data").joinpath(name).read_text()


def parse_corpus(text: str, prefix: str = "c") -> list[Constraint]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        label, sep, body = line.partition("\t")
        if not sep:
            raise CorpusError(f"line {lineno}: expected '<hazard>\\t<text>'")
        label = label.strip().lower()
        if not label:
            raise CorpusError(f"line {lineno}: missing hazard label")
        if not body.strip():
            raise CorpusError(f"line {lineno}: missing constraint text")
        out.append(Constraint(f"{prefix}{len(out):02d}", body.strip(), label))
    if not out:
        raise CorpusError("corpus is empty")
    missing = set(HAZARD_LABELS) - {c.prohibited for c in out}
    if missing:
        log.warning("corpus does not cover hazards: %s", ", ".join(sorted(missing)))
    return out


def load_corpus(path=None) -> list[Constraint]:
    """Read ``<hazard>\\t<text>`` records; ``None`` loads the shipped grid corpus."""
    if path is None:
        return parse_corpus(_data_text("grid_constraints.tsv"))
    return parse_corpus(Path(path).read_text())


# --- rule condenser -----------------------------------------------------------

class Lexicon:
    """Hazard synonym table compiled into one word-boundary regex per hazard."""

    def __init__(self, entries: dict[str, list[str]]):
        self.entries = {h: list(p) for h, p in entries.items()}
        self._patterns = {}
        for hazard, phrases in self.entries.items():
            alts = []
            for phrase in phrases:
                stem = phrase.rstrip("*")
                body = r"\s+".join(re.escape(w) for w in stem.split())
                alts.append(body + (r"\w*" if phrase.endswith("*") else "") + r"\b")
            self._patterns[hazard] = re.compile(r"\b(?:" + "|".join(alts) + ")", re.IGNORECASE)

    @classmethod
    def parse(cls, text: str) -> "Lexicon":
        entries: dict[str, list[str]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            hazard, sep, phrase = line.partition("\t")
            if not sep or not phrase.strip():
                raise CorpusError(f"lexicon line {lineno}: expected '<hazard>\\t<phrase>'")
            entries.setdefault(hazard.strip().lower(), []).append(phrase.strip().lower())
        return cls(entries)

    @classmethod
    def load(cls, path=None) -> "Lexicon":
        if path is None:
            return cls.parse(_data_text("lexicon.tsv"))
        return cls.parse(Path(path).read_text())

    def matches(self, text: str) -> list[str]:
        return [h for h, pat in self._patterns.items() if pat.search(text)]


def condense_rule(constraint: Constraint, lexicon: Lexicon) -> CondensedConstraint:
    hits = lexicon.matches(constraint.text)
    if not hits:
        raise NoMatch(f"no hazard mentioned in {constraint.text!r}")
    if len(hits) > 1:
        raise AmbiguousMatch(f"{constraint.text!r} mentions {', '.join(hits)}")
    return CondensedConstraint(canonical(hits[0]), constraint.id)


def condense_identity(constraint: Constraint) -> CondensedConstraint:
    return CondensedConstraint(constraint.text.strip(), constraint.id)


# --- remote condenser ---------------------------------------------------------

def first_sentence(text: str) -> str:
    line = next((ln for ln in text.strip().splitlines() if ln.strip()), "")
    line = line.strip().lstrip("\"'` ")
    m = re.match(r"(.+?[.!?])[\"'`]?(\s|$)", line)
    return (m.group(1) if m else line).strip().strip("\"'` ")


class RemoteCondenser:
    def __init__(self, client: RemoteTextClient, prompt: str = DEFAULT_PROMPT):
        self.client = client
        self.prompt = prompt
        self.cache = ResponseCache()

    @classmethod
    def from_config(cls, client: RemoteTextClient) -> "RemoteCondenser":
        path = client.config.prompt_path
        prompt = Path(path).read_text().strip() if path else DEFAULT_PROMPT
        return cls(client, prompt)

    def __call__(self, constraint: Constraint) -> CondensedConstraint:
        return condense_remote(constraint, self.client, self.prompt, self.cache)


def condense_remote(constraint: Constraint, client: RemoteTextClient,
                    prompt: str = DEFAULT_PROMPT,
                    cache: ResponseCache | None = None) -> CondensedConstraint:
    key = (sha256(prompt), sha256(constraint.text))
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return CondensedConstraint(hit, constraint.id)
    if "{constraint}" in prompt:
        full = prompt.replace("{constraint}", constraint.text)
    else:
        full = f"{prompt}\n{constraint.text}"
    text = first_sentence(client.complete(full))
    if not text:
        raise RemoteError("completion had no usable sentence")
    if cache is not None:
        text = cache.put(key, text)
    return CondensedConstraint(text, constraint.id)


# --- chains -------------------------------------------------------------------

class RuleCondenser:
    def __init__(self, lexicon: Lexicon | None = None):
        self.lexicon = lexicon or Lexicon.load()

    def __call__(self, constraint: Constraint) -> CondensedConstraint:
        return condense_rule(constraint, self.lexicon)


@dataclass
class CondenserChain:
    """Try condensers in order; a failure falls through to the next one.

    Results are memoized per constraint id, so each constraint is condensed
    once per chain.
    """

    stages: list
    names: list[str]
    fallbacks: list[dict] = field(default_factory=list)
    _memo: dict = field(default_factory=dict, repr=False)

    def __call__(self, constraint: Constraint) -> CondensedConstraint:
        if constraint.id in self._memo:
            return self._memo[constraint.id]
        errors = []
        for name, stage in zip(self.names, self.stages):
            try:
                out = stage(constraint)
            except (NoMatch, AmbiguousMatch, RemoteError) as exc:
                errors.append(f"{name}: {exc}")
                continue
            if errors:
                self.fallbacks.append({"constraint": constraint.id, "used": name,
                                       "errors": errors})
            self._memo[constraint.id] = out
            return out
        raise RuntimeError(f"every condenser failed for {constraint.id}: {errors}")


def make_condenser(kind: str = "rule", *, lexicon: Lexicon | None = None,
                   client: RemoteTextClient | None = None) -> CondenserChain:
    """``rule`` -> rule then identity; ``remote`` -> remote, rule, identity; ``identity``."""
    if kind == "identity":
        return CondenserChain([condense_identity], ["identity"])
    rule = RuleCondenser(lexicon)
    if kind == "rule":
        return CondenserChain([rule, condense_identity], ["rule", "identity"])
    if kind == "remote":
        if client is None:
            raise ValueError("remote condenser needs a client")
        return CondenserChain([RemoteCondenser.from_config(client), rule, condense_identity],
                              ["remote", "rule", "identity"])
    raise ValueError(f"unknown condenser {kind!r}")


# --- pairs --------------------------------------------------------------------

def generate_pairs(corpus: list[Constraint], count: int, seed, condense=None) -> list[ConstraintPair]:
    """Seeded, label-balanced pairs of condensed constraints.

    Half of the pairs (rounded up) share a prohibited hazard (label 1), the
    rest prohibit different hazards (label 0). Positives may pair a
    constraint with itself.
    """
    if len(corpus) < 2:
        raise CorpusError("need at least two constraints to form pairs")
    by_hazard: dict[str, list[Constraint]] = {}
    for c in corpus:
        by_hazard.setdefault(c.prohibited, []).append(c)
    hazards = sorted(by_hazard)
    if len(hazards) < 2:
        raise CorpusError("corpus covers a single hazard; negative pairs impossible")
    condense = condense or make_condenser("rule")
    rng = np.random.default_rng(seed)
    n_pos = (count + 1) // 2
    pairs = []
    for i in range(count):
        if i < n_pos:
            group = by_hazard[hazards[rng.integers(len(hazards))]]
            a, b = (group[j] for j in rng.integers(len(group), size=2))
        else:
            h1, h2 = rng.choice(len(hazards), size=2, replace=False)
            g1, g2 = by_hazard[hazards[h1]], by_hazard[hazards[h2]]
            a, b = g1[rng.integers(len(g1))], g2[rng.integers(len(g2))]
        pairs.append(ConstraintPair(condense(a), condense(b), int(a.prohibited == b.prohibited)))
    order = rng.permutation(count)
    return [pairs[i] for i in order]


def pair_label(corpus: list[Constraint], pair: ConstraintPair) -> int:
    labels = {c.id: c.prohibited for c in corpus}
    return int(labels[pair.a.origin] == labels[pair.b.origin])
