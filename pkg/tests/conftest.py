from __future__ import annotations

import random

import pytest

from es2emb.core import (
    CodeDictionary,
    EventRecord,
    FieldKind,
    FieldSchema,
    SchemaConfig,
    Task,
    TaskKind,
    UserSequence,
    canonical_decimal,
)

MCC_DICT = CodeDictionary(
    {
        "5411": "Grocery Stores, Supermarkets",
        "6011": "Financial Institutions, Cash",
        "5812": "Eating Places, Restaurants",
        "4814": "Telecommunication Services",
        "7011": 'Lodging "Hotels, Motels"',
    }
)

CHANNEL_DICT = CodeDictionary(
    {"POS": "Point of Sale", "ATM": "Cash Withdrawal", "DEP": "Deposit"}
)


def make_schema(task: Task | None = None) -> SchemaConfig:
    fields = (
        FieldSchema("event_time", FieldKind.TIMESTAMP, "days since epoch"),
        FieldSchema("amount", FieldKind.NUMERIC, "rubles"),
        FieldSchema("mcc", FieldKind.CATEGORICAL, None, "mcc.csv"),
        FieldSchema("channel", FieldKind.CATEGORICAL, None, "channel.csv"),
        FieldSchema("note", FieldKind.FREE_TEXT),
    )
    return SchemaConfig(
        fields=fields,
        timestamp_field="event_time",
        task=task or Task(TaskKind.BINARY, 2),
        dictionaries={"mcc.csv": MCC_DICT, "channel.csv": CHANNEL_DICT},
    )


@pytest.fixture
def schema() -> SchemaConfig:
    return make_schema()


_NOTE_ALPHABET = 'abc XYZ0189.,;:"|!?()-éж'
_CLEAN_NOTE_ALPHABET = "abc XYZ0189.,;:!?()-"


def random_note(rng: random.Random, clean: bool = False) -> str:
    alphabet = _CLEAN_NOTE_ALPHABET if clean else _NOTE_ALPHABET
    n = rng.randrange(0, 12)
    note = "".join(rng.choice(alphabet) for _ in range(n))
    if rng.random() < 0.2:
        note += ", "  # force the quoting path
    return note


def random_amount(rng: random.Random) -> str:
    if rng.random() < 0.5:
        return canonical_decimal(str(rng.randrange(0, 100000)))
    return canonical_decimal(f"{rng.uniform(-500, 5000):.2f}")


def random_sequence(
    rng: random.Random, user_id: str = "u0", label=None, clean: bool = False
) -> UserSequence:
    """Random valid sequence; clean=True avoids characters markup formats escape."""
    mcc_codes = list(MCC_DICT.entries) + ["0000", "9999"]  # unknowns take the fallback path
    if clean:
        mcc_codes = [c for c in mcc_codes if '"' not in (MCC_DICT.get(c) or "")]
    channel_codes = list(CHANNEL_DICT.entries)
    n_events = rng.randrange(0, 8)
    ts = rng.randrange(0, 20000)
    events = []
    for _ in range(n_events):
        ts += rng.randrange(0, 3)  # duplicates exercise stable ordering
        events.append(
            EventRecord(
                (
                    ts,
                    random_amount(rng),
                    rng.choice(mcc_codes),
                    rng.choice(channel_codes),
                    random_note(rng, clean=clean),
                )
            )
        )
    return UserSequence(user_id, tuple(events), label)


ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = getattr(report, "nodeid", "")
            if "test_acceptance.py::" in name:
                test = name.split("::")[-1]
                verdict = "PASS" if status == "passed" else "FAIL"
                lines.append((test, verdict))
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for test, verdict in sorted(lines):
        terminalreporter.write_line(f"{verdict}  {test}")
