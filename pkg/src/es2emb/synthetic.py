"""Seeded synthetic transaction datasets for demos and end-to-end checks.

Users belong to one of two classes that differ only in their merchant-category
mixture, so the label is decodable from the event-type composition of a
history but not from any single field value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, load_dataset

MCC_TABLE = [
    ("5411", "Grocery Stores, Supermarkets"),
    ("5499", "Food Stores, Convenience"),
    ("5812", "Eating Places, Restaurants"),
    ("5814", "Fast Food Restaurants"),
    ("5541", "Service Stations"),
    ("4121", "Taxicabs, Limousines"),
    ("4814", "Telecommunication Services"),
    ("5912", "Drug Stores, Pharmacies"),
    ("5999", "Retail Stores, Miscellaneous"),
    ("6011", "Financial Institutions, Cash"),
    ("7832", "Motion Picture Theaters"),
    ("5945", "Hobby, Toy, Game Shops"),
]

CHANNEL_TABLE = [
    ("POS", "Point of Sale"),
    ("ATM", "Cash Withdrawal"),
    ("WEB", "Online Purchase"),
    ("DEP", "Deposit"),
]

SCHEMA_TEXT = """\
# synthetic transaction schema
timestamp_field = event_time
task = binary-classification
field.event_time.kind = timestamp
field.event_time.unit = days since epoch
field.amount.kind = numeric
field.amount.unit = rubles
field.mcc.kind = categorical-coded
field.mcc.dictionary = mcc.csv
field.channel.kind = categorical-coded
field.channel.dictionary = channel.csv
"""


@dataclass(frozen=True)
class SyntheticPaths:
    events_csv: Path
    labels_csv: Path
    schema_cfg: Path


def _class_mixtures(gap: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(MCC_TABLE)
    base = np.ones(n)
    tilt = np.linspace(-1.0, 1.0, n)
    w0 = base + gap * tilt
    w1 = base - gap * tilt
    return w0 / w0.sum(), w1 / w1.sum()


def generate_synthetic(
    out_dir: Path | str,
    n_users: int = 50,
    seed: int = 0,
    unlabeled_fraction: float = 0.0,
    events_per_user: tuple[int, int] = (30, 60),
    class_gap: float = 0.85,
) -> SyntheticPaths:
    """Write events.csv, labels.csv, mcc.csv, channel.csv and schema.cfg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    w0, w1 = _class_mixtures(class_gap)
    mcc_codes = [code for code, _ in MCC_TABLE]
    channel_codes = [code for code, _ in CHANNEL_TABLE]
    channel_p = np.array([0.55, 0.15, 0.2, 0.1])

    width = max(4, len(str(n_users)))
    event_rows: list[tuple[str, int, str, str, str]] = []
    label_rows: list[tuple[str, int]] = []
    n_unlabeled = int(round(n_users * unlabeled_fraction))
    for u in range(n_users):
        uid = f"u{u:0{width}d}"
        label = int(rng.integers(0, 2))
        weights = w0 if label == 0 else w1
        n_events = int(rng.integers(events_per_user[0], events_per_user[1] + 1))
        day = 17000 + int(rng.integers(0, 200))
        for _ in range(n_events):
            day += int(rng.integers(0, 4))
            amount = max(1, int(round(float(rng.lognormal(2.3, 0.9)))))
            mcc = mcc_codes[int(rng.choice(len(mcc_codes), p=weights))]
            channel = channel_codes[int(rng.choice(len(channel_codes), p=channel_p))]
            event_rows.append((uid, day, str(amount), mcc, channel))
        if u >= n_unlabeled:
            label_rows.append((uid, label))

    # shuffled row order exercises the loader's grouping and sorting
    rng.shuffle(event_rows)

    events_csv = out / "events.csv"
    with events_csv.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["user_id", "event_time", "amount", "mcc", "channel"])
        writer.writerows(event_rows)

    labels_csv = out / "labels.csv"
    with labels_csv.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["user_id", "label"])
        writer.writerows(sorted(label_rows))

    for name, table in (("mcc.csv", MCC_TABLE), ("channel.csv", CHANNEL_TABLE)):
        with (out / name).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["code", "description"])
            writer.writerows(table)

    schema_cfg = out / "schema.cfg"
    schema_cfg.write_text(SCHEMA_TEXT, encoding="utf-8")
    return SyntheticPaths(events_csv, labels_csv, schema_cfg)


def load_synthetic(paths: SyntheticPaths) -> Dataset:
    return load_dataset(paths.events_csv, paths.labels_csv, paths.schema_cfg)
