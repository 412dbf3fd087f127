"""Dataset model: field schemas, code dictionaries, event records, CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .kvconfig import parse_kv_file


class SchemaError(ValueError):
    """Schema definition or CSV header problem; the message names the offender."""


class DataError(ValueError):
    """Row-level ingestion problem; the message carries the source line number."""


class FieldKind(Enum):
    CATEGORICAL = "categorical-coded"
    NUMERIC = "numeric"
    TIMESTAMP = "timestamp"
    FREE_TEXT = "free-text"


class TaskKind(Enum):
    BINARY = "binary-classification"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"


@dataclass(frozen=True)
class Task:
    kind: TaskKind
    n_classes: int = 0

    @staticmethod
    def parse(text: str) -> "Task":
        text = text.strip()
        if text == TaskKind.BINARY.value:
            return Task(TaskKind.BINARY, 2)
        if text == TaskKind.REGRESSION.value:
            return Task(TaskKind.REGRESSION, 0)
        if text.startswith("multiclass:"):
            try:
                n = int(text.split(":", 1)[1])
            except ValueError:
                raise SchemaError(f"task: bad class count in {text!r}") from None
            if n < 2:
                raise SchemaError("task: multiclass needs at least 2 classes")
            return Task(TaskKind.MULTICLASS, n)
        raise SchemaError(
            f"task: unknown task {text!r} (expected binary-classification, "
            "multiclass:<C>, or regression)"
        )

    @property
    def is_classification(self) -> bool:
        return self.kind in (TaskKind.BINARY, TaskKind.MULTICLASS)


def canonical_decimal(text: str) -> str:
    """Normalize a decimal string: no exponent, no trailing zeros, '4.50' -> '4.5'."""
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise ValueError(f"not a decimal number: {text!r}") from None
    if not value.is_finite():
        raise ValueError(f"not a finite number: {text!r}")
    plain = format(value, "f")
    if "." in plain:
        plain = plain.rstrip("0").rstrip(".")
    if plain in ("", "-", "-0"):
        plain = "0"
    return plain


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: FieldKind
    unit: str | None = None
    dictionary_ref: str | None = None


@dataclass(frozen=True)
class CodeDictionary:
    """code -> description mapping; unknown lookups return None, never ''."""

    entries: Mapping[str, str]

    def get(self, code: str) -> str | None:
        return self.entries.get(code)


UNKNOWN_PREFIX = "UNKNOWN("


def map_code(code: str, dictionary: CodeDictionary) -> str:
    """Description for a code, or the deterministic fallback 'UNKNOWN(<code>)'."""
    description = dictionary.get(code)
    if description is None:
        return f"UNKNOWN({code})"
    return description


def load_code_dictionary(path: Path | str) -> CodeDictionary:
    path = Path(path)
    entries: dict[str, str] = {}
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["code", "description"]:
            raise SchemaError(f"{path}: expected header 'code,description', got {header}")
        for row in reader:
            if len(row) != 2:
                raise SchemaError(f"{path}: line {reader.line_num}: expected 2 columns")
            code, description = row
            if code in entries:
                raise SchemaError(f"{path}: duplicate code {code!r}")
            if description == "":
                raise SchemaError(f"{path}: empty description for code {code!r}")
            entries[code] = description
    return CodeDictionary(entries)


# Values are stored pre-typed: timestamps as int, numerics as canonical decimal
# strings, categorical codes and free text as str.
Value = int | str


@dataclass(frozen=True)
class EventRecord:
    values: tuple[Value, ...]


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    events: tuple[EventRecord, ...]
    label: int | float | None = None


@dataclass(frozen=True)
class SchemaConfig:
    fields: tuple[FieldSchema, ...]
    timestamp_field: str
    task: Task
    dictionaries: Mapping[str, CodeDictionary]

    def field_index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise SchemaError(f"no field named {name!r}")


@dataclass(frozen=True)
class Dataset:
    schema: SchemaConfig
    sequences: tuple[UserSequence, ...]

    @property
    def task(self) -> Task:
        return self.schema.task

    def labeled(self) -> tuple[UserSequence, ...]:
        return tuple(s for s in self.sequences if s.label is not None)

    def by_user(self) -> dict[str, UserSequence]:
        return {s.user_id: s for s in self.sequences}


def load_schema_config(path: Path | str) -> SchemaConfig:
    """Parse the plain-text schema config and load referenced code dictionaries.

    Expected keys: ``timestamp_field``, ``task``, and per field (in declaration
    order) ``field.<name>.kind`` plus optional ``.unit`` / ``.dictionary``.
    Dictionary paths resolve relative to the config file.
    """
    path = Path(path)
    pairs = parse_kv_file(path)
    values = {k: v for k, v, _ in pairs}

    if "timestamp_field" not in values:
        raise SchemaError(f"{path}: missing key 'timestamp_field'")
    if "task" not in values:
        raise SchemaError(f"{path}: missing key 'task'")
    task = Task.parse(values["task"])

    order: list[str] = []
    attrs: dict[str, dict[str, str]] = {}
    for key, value, line in pairs:
        if not key.startswith("field."):
            continue
        parts = key.split(".")
        if len(parts) != 3:
            raise SchemaError(f"{path}: line {line}: bad field key {key!r}")
        _, name, attr = parts
        if attr not in ("kind", "unit", "dictionary"):
            raise SchemaError(f"{path}: line {line}: unknown field attribute {attr!r}")
        if name not in attrs:
            order.append(name)
            attrs[name] = {}
        attrs[name][attr] = value

    if not order:
        raise SchemaError(f"{path}: no fields declared")

    kinds = {k.value: k for k in FieldKind}
    fields: list[FieldSchema] = []
    dictionaries: dict[str, CodeDictionary] = {}
    for name in order:
        if not name:
            raise SchemaError(f"{path}: empty field name")
        if "|" in name or "\n" in name:
            raise SchemaError(f"{path}: field name {name!r} contains a reserved character")
        spec = attrs[name]
        if "kind" not in spec:
            raise SchemaError(f"{path}: field {name!r} missing 'kind'")
        if spec["kind"] not in kinds:
            raise SchemaError(f"{path}: field {name!r} has unknown kind {spec['kind']!r}")
        kind = kinds[spec["kind"]]
        dictionary_ref = spec.get("dictionary")
        if kind is FieldKind.CATEGORICAL and dictionary_ref is None:
            raise SchemaError(f"{path}: categorical field {name!r} needs a dictionary")
        if dictionary_ref is not None and dictionary_ref not in dictionaries:
            dictionaries[dictionary_ref] = load_code_dictionary(path.parent / dictionary_ref)
        fields.append(FieldSchema(name, kind, spec.get("unit"), dictionary_ref))

    names = [f.name for f in fields]
    if len(set(names)) != len(names):
        raise SchemaError(f"{path}: duplicate field names")
    ts = values["timestamp_field"]
    if ts not in names:
        raise SchemaError(f"{path}: timestamp_field {ts!r} is not a declared field")
    if fields[names.index(ts)].kind is not FieldKind.TIMESTAMP:
        raise SchemaError(f"{path}: timestamp_field {ts!r} must have kind 'timestamp'")

    return SchemaConfig(tuple(fields), ts, task, dictionaries)


def _parse_cell(raw: str, field_schema: FieldSchema, line_num: int) -> Value:
    if "\n" in raw or "\r" in raw:
        raise DataError(f"line {line_num}: field {field_schema.name!r} contains a newline")
    if field_schema.kind is FieldKind.TIMESTAMP:
        try:
            ts = int(raw)
        except ValueError:
            raise DataError(
                f"line {line_num}: field {field_schema.name!r}: "
                f"unparseable timestamp {raw!r}"
            ) from None
        if ts < 0:
            raise DataError(f"line {line_num}: field {field_schema.name!r}: negative timestamp")
        return ts
    if field_schema.kind is FieldKind.NUMERIC:
        try:
            return canonical_decimal(raw)
        except ValueError:
            raise DataError(
                f"line {line_num}: field {field_schema.name!r}: "
                f"unparseable number {raw!r}"
            ) from None
    return raw


def _parse_label(raw: str, task: Task, line_num: int) -> int | float:
    if task.is_classification:
        try:
            return int(raw)
        except ValueError:
            raise DataError(f"line {line_num}: unparseable class label {raw!r}") from None
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"line {line_num}: unparseable regression label {raw!r}") from None


def load_dataset(
    events_csv_path: Path | str,
    labels_csv_path: Path | str,
    schema_config: SchemaConfig | Path | str,
) -> Dataset:
    """Load events + labels CSVs into a Dataset, grouped by user and time-sorted.

    Events CSV needs a ``user_id`` column plus one column per schema field;
    extra columns are ignored. Labels CSV has columns ``user_id,label``; users
    absent from it are kept as unlabeled. Ties in the timestamp keep file order.
    """
    if not isinstance(schema_config, SchemaConfig):
        schema_config = load_schema_config(schema_config)
    schema = schema_config

    labels: dict[str, int | float] = {}
    labels_path = Path(labels_csv_path)
    with labels_path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        cols = reader.fieldnames or []
        for needed in ("user_id", "label"):
            if needed not in cols:
                raise SchemaError(f"{labels_path}: missing column {needed!r}")
        for row in reader:
            uid = row["user_id"]
            if uid in labels:
                raise DataError(f"{labels_path}: line {reader.line_num}: duplicate label for {uid!r}")
            labels[uid] = _parse_label(row["label"], schema.task, reader.line_num)

    events_path = Path(events_csv_path)
    grouped: dict[str, list[EventRecord]] = {}
    with events_path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        cols = reader.fieldnames or []
        for needed in ["user_id"] + [f.name for f in schema.fields]:
            if needed not in cols:
                raise SchemaError(f"{events_path}: missing column {needed!r}")
        for row in reader:
            uid = row["user_id"]
            values = tuple(
                _parse_cell(row[f.name], f, reader.line_num) for f in schema.fields
            )
            grouped.setdefault(uid, []).append(EventRecord(values))

    unknown = sorted(set(labels) - set(grouped))
    if unknown:
        raise DataError(f"{labels_path}: labels for users with no events: {unknown}")

    ts_idx = schema.field_index(schema.timestamp_field)
    sequences = tuple(
        UserSequence(
            user_id=uid,
            events=tuple(sorted(records, key=lambda e: e.values[ts_idx])),
            label=labels.get(uid),
        )
        for uid, records in grouped.items()
    )
    dataset = Dataset(schema, sequences)
    violations = validate_dataset(dataset)
    if violations:
        summary = "; ".join(str(v) for v in violations[:5])
        raise DataError(f"{events_path}: dataset invalid: {summary}")
    return dataset


@dataclass(frozen=True)
class Violation:
    user_id: str
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"[{self.rule}] user={self.user_id!r}: {self.detail}"


def validate_dataset(dataset: Dataset) -> list[Violation]:
    """Check every dataset invariant; returns one Violation per breach, [] if clean."""
    out: list[Violation] = []
    schema = dataset.schema
    names = [f.name for f in schema.fields]
    if len(set(names)) != len(names):
        out.append(Violation("", "schema.names", "duplicate field names"))
    for f in schema.fields:
        if not f.name:
            out.append(Violation("", "schema.names", "empty field name"))
        if f.kind is FieldKind.CATEGORICAL and not f.dictionary_ref:
            out.append(
                Violation("", "schema.dictionary_ref", f"categorical field {f.name!r} has no dictionary")
            )

    ts_idx = schema.field_index(schema.timestamp_field)
    seen: set[str] = set()
    task = dataset.task
    for seq in dataset.sequences:
        if seq.user_id in seen:
            out.append(Violation(seq.user_id, "dataset.duplicate_user", "user_id appears twice"))
        seen.add(seq.user_id)

        prev_ts: int | None = None
        for i, event in enumerate(seq.events):
            if len(event.values) != len(schema.fields):
                out.append(
                    Violation(
                        seq.user_id,
                        "event.arity",
                        f"event {i} has {len(event.values)} values, schema has {len(schema.fields)}",
                    )
                )
                continue
            for f, value in zip(schema.fields, event.values):
                if f.kind is FieldKind.TIMESTAMP:
                    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                        out.append(
                            Violation(seq.user_id, "event.timestamp", f"event {i}: bad timestamp {value!r}")
                        )
                elif f.kind is FieldKind.NUMERIC:
                    ok = isinstance(value, str)
                    if ok:
                        try:
                            ok = canonical_decimal(value) == value
                        except ValueError:
                            ok = False
                    if not ok:
                        out.append(
                            Violation(
                                seq.user_id, "event.numeric", f"event {i}: non-canonical number {value!r}"
                            )
                        )
                else:
                    if not isinstance(value, str):
                        out.append(Violation(seq.user_id, "event.text", f"event {i}: non-string {value!r}"))
                    elif "\n" in value or "\r" in value:
                        out.append(
                            Violation(seq.user_id, "event.newline", f"event {i}: value contains newline")
                        )
            ts = event.values[ts_idx]
            if isinstance(ts, int) and prev_ts is not None and ts < prev_ts:
                out.append(
                    Violation(seq.user_id, "sequence.sorted", f"event {i} timestamp {ts} < previous {prev_ts}")
                )
            if isinstance(ts, int):
                prev_ts = ts

        if seq.label is None:
            continue
        if task.is_classification:
            if not isinstance(seq.label, int) or isinstance(seq.label, bool):
                out.append(Violation(seq.user_id, "label.type", f"non-integer class label {seq.label!r}"))
            elif not 0 <= seq.label < task.n_classes:
                out.append(
                    Violation(
                        seq.user_id,
                        "label.range",
                        f"class index {seq.label} outside [0, {task.n_classes})",
                    )
                )
        else:
            if not isinstance(seq.label, (int, float)) or isinstance(seq.label, bool):
                out.append(Violation(seq.user_id, "label.type", f"non-numeric label {seq.label!r}"))
            elif isinstance(seq.label, float) and not (seq.label == seq.label and abs(seq.label) != float("inf")):
                out.append(Violation(seq.user_id, "label.type", f"non-finite label {seq.label!r}"))
    return out
