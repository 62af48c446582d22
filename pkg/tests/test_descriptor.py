import numpy as np
import pytest

from safelang.descriptor import HAZARD_NOUNS, TemplateTable, default_table, describe, template_table
from safelang.gridworld import Event


def test_canonical_sentences():
    assert describe(Event.ENTERED_LAVA).text == "You stepped onto a lava tile."
    assert describe(Event.MOVED).text == "You moved to an empty tile."
    assert describe("picked-key").text == "You picked up the key."
    assert describe(Event.BUMPED_WALL).source_event == Event.BUMPED_WALL


def test_table_is_total_and_distinct():
    rows = template_table()
    assert len(rows) >= 8
    assert sorted(e.value for e, _ in rows) == sorted(e.value for e in Event)
    hazard = {e: t for e, t in rows if e.value.startswith("entered-")}
    assert len(set(hazard.values())) == 3


@pytest.mark.parametrize("noun", HAZARD_NOUNS)
def test_hazard_templates_name_only_their_hazard(noun):
    event = Event(f"entered-{noun}")
    for text in default_table().variants(event):
        words = text.lower()
        assert noun in words
        assert not any(other in words for other in HAZARD_NOUNS if other != noun)


def test_neutral_templates_have_no_hazard_words():
    for event, text in template_table():
        if not event.value.startswith("entered-"):
            assert not any(n in text.lower() for n in HAZARD_NOUNS)


def test_unknown_event_is_rejected():
    with pytest.raises(ValueError):
        describe("entered-sand")


def test_paraphrase_draw_is_seeded():
    a = [describe(Event.ENTERED_WATER, rng=np.random.default_rng(3)).text for _ in range(1)]
    b = [describe(Event.ENTERED_WATER, rng=np.random.default_rng(3)).text for _ in range(1)]
    assert a == b
    rng = np.random.default_rng(0)
    seen = {describe(Event.ENTERED_WATER, rng=rng).text for _ in range(50)}
    assert seen == set(default_table().variants(Event.ENTERED_WATER))


def test_table_loads_from_file(tmp_path):
    lines = [f"{e.value}\t{e.value} happened to {{who}}." for e in Event]
    path = tmp_path / "t.tsv"
    path.write_text("\n".join(lines) + "\n")
    table = TemplateTable.load(path)
    assert describe(Event.MOVED, {"who": "you"}, table=table).text == "moved happened to you."


def test_table_rejects_incomplete_file():
    with pytest.raises(ValueError, match="missing"):
        TemplateTable.parse("moved\tYou moved.\n")
    with pytest.raises(ValueError, match="unknown event"):
        TemplateTable.parse("fell\tYou fell.\n")
