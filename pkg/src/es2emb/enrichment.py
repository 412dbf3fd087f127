"""Rewrite serialized histories into diverse training documents and assemble corpora.

A corpus is one plain-text document per (user, variant) plus a manifest CSV
with columns user_id, variant_index, dataset, format, path, seed,
prompt_digest, values_total, values_found. Rewriting goes through the chat
gateway; the deterministic display variants and the raw admixture bypass it.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .core import CodeDictionary, Dataset, FieldKind, SchemaConfig, UserSequence, map_code
from .gateway import ChatMessage, ChatRequest, GatewayError, ResponseCache, cache_key, cached_chat_complete
from .serializer import (
    ALL_FORMATS,
    PIPE_FORMAT,
    SerializedDoc,
    safe_filename,
    serialize_any,
    serialize_pipe,
)

log = logging.getLogger(__name__)

SYSTEM_PROMPT = """You are a specialized AI assistant designed for text data transformation.
Your task is to take a structured list of financial transactions and convert them into different text-based formats based on the user's request.
Ensure clarity, accuracy, and proper formatting while preserving all original data fields.
You are capable of transforming data into formats including:
- JSON, Markdown, HTML, Plain text, tables.
Always ensure the output is well-structured and visually clear.
If the user specifies a custom format, follow the instructions closely.
Ask for clarifications when the format is ambiguous."""

USER_PROMPT = """I have a list of financial transactions in a structured tabular format.
Please creatively transform this data into a different textual representation.
You can choose the format freely (JSON, HTML, Markdown, plain text, XML, YAML, or anything else).
Requirements:
- Randomize the text format and structure creatively.
- Paraphrase category names and transaction types while keeping the meaning clear.
- Ensure the data remains understandable but presented differently.
Generate the transformed output."""

DEFAULT_CHAR_BUDGET = 16000


@dataclass(frozen=True)
class Provenance:
    model_id: str
    prompt_digest: str
    temperature: float
    seed: int
    truncated: bool = False


@dataclass(frozen=True)
class FidelityCounts:
    values_total: int
    values_found: int


@dataclass(frozen=True)
class EnrichedDoc:
    user_id: str
    variant_index: int
    text: str
    provenance: Provenance
    fidelity: FidelityCounts


@dataclass(frozen=True)
class CorpusSpec:
    """Axes of a fine-tuning corpus: variants per user, raw admixture, format policy."""

    volume_multiplier: int = 1
    include_raw: bool = False
    format_mode: str = "mixed"  # "mixed" or "single:<format>"

    def __post_init__(self) -> None:
        if self.volume_multiplier < 1:
            raise ValueError("volume_multiplier must be >= 1")
        if self.format_mode != "mixed":
            if not self.format_mode.startswith("single:"):
                raise ValueError(f"format_mode must be 'mixed' or 'single:<fmt>', got {self.format_mode!r}")
            fmt = self.single_format
            if fmt not in ALL_FORMATS:
                raise ValueError(f"unsupported single format {fmt!r}; pick one of {ALL_FORMATS}")

    @property
    def single_format(self) -> str | None:
        if self.format_mode.startswith("single:"):
            return self.format_mode.split(":", 1)[1]
        return None


def _truncate_doc(text: str, char_budget: int) -> tuple[str, bool]:
    if len(text) <= char_budget:
        return text, False
    lines = text.split("\n")
    header, events = lines[0], lines[1:]
    kept: list[str] = []
    used = len(header)
    for line in reversed(events):  # keep the most recent events
        cost = len(line) + 1
        if used + cost > char_budget and kept:
            break
        if used + cost > char_budget:
            break
        kept.append(line)
        used += cost
    kept.reverse()
    return "\n".join([header] + kept), True


def build_enrichment_prompt(
    doc: SerializedDoc,
    model_id: str,
    temperature: float = 0.7,
    seed: int = 0,
    max_tokens: int = 4096,
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> tuple[ChatRequest, bool]:
    """ChatRequest carrying the fixed two-role prompt plus the document text.

    Documents over the character budget are cut down to the header plus the
    most recent event lines; the returned flag reports whether that happened.
    """
    if doc.format != PIPE_FORMAT:
        raise ValueError(f"enrichment expects a pipe document, got {doc.format!r}")
    body, truncated = _truncate_doc(doc.text, char_budget)
    request = ChatRequest(
        model_id=model_id,
        messages=(
            ChatMessage("system", SYSTEM_PROMPT),
            ChatMessage("user", USER_PROMPT + "\n\n" + body),
        ),
        temperature=temperature,
        seed=seed,
        max_tokens=max_tokens,
    )
    return request, truncated


def source_values(
    sequence: UserSequence,
    schema: SchemaConfig,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
) -> list[str]:
    """Every numeric rendering and mapped description, with multiplicity."""
    dicts = schema.dictionaries if dictionaries is None else dictionaries
    values: list[str] = []
    for event in sequence.events:
        for f, v in zip(schema.fields, event.values):
            if f.kind in (FieldKind.TIMESTAMP, FieldKind.NUMERIC):
                values.append(str(v))
            elif f.kind is FieldKind.CATEGORICAL:
                values.append(map_code(str(v), dicts[f.dictionary_ref or ""]))
    return values


def audit_fidelity(
    enriched_text: str,
    sequence: UserSequence,
    schema: SchemaConfig,
    dictionaries: Mapping[str, CodeDictionary] | None = None,
) -> FidelityCounts:
    """How many source values survive as substrings; reports, never fails."""
    values = source_values(sequence, schema, dictionaries)
    found = sum(1 for v in values if v in enriched_text)
    return FidelityCounts(values_total=len(values), values_found=found)


def enrich_user(
    sequence: UserSequence,
    schema: SchemaConfig,
    n_variants: int,
    gateway,
    cache: ResponseCache,
    model_id: str = "default",
    temperature: float = 0.7,
    max_tokens: int = 4096,
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> list[EnrichedDoc]:
    """n_variants rewritten documents for one user, seeds 0..n_variants-1, all cached."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    doc = serialize_pipe(sequence, schema)
    out: list[EnrichedDoc] = []
    for seed in range(n_variants):
        request, truncated = build_enrichment_prompt(
            doc, model_id, temperature=temperature, seed=seed,
            max_tokens=max_tokens, char_budget=char_budget,
        )
        text, _ = cached_chat_complete(request, cache, gateway)
        fidelity = audit_fidelity(text, sequence, schema)
        if fidelity.values_found < fidelity.values_total:
            log.warning(
                "[enrich] user %s variant %d lost %d of %d values",
                sequence.user_id, seed,
                fidelity.values_total - fidelity.values_found, fidelity.values_total,
            )
        out.append(
            EnrichedDoc(
                user_id=sequence.user_id,
                variant_index=seed,
                text=text,
                provenance=Provenance(model_id, cache_key(request), temperature, seed, truncated),
                fidelity=fidelity,
            )
        )
    return out


@dataclass(frozen=True)
class ManifestRow:
    user_id: str
    variant_index: int
    dataset: str
    format: str
    path: str
    seed: int | None
    prompt_digest: str
    values_total: int
    values_found: int


@dataclass(frozen=True)
class CorpusManifest:
    root: Path
    rows: tuple[ManifestRow, ...]

    @property
    def path(self) -> Path:
        return self.root / "corpus_manifest.csv"

    def document_texts(self) -> list[str]:
        return [(self.root / row.path).read_text(encoding="utf-8") for row in self.rows]


MANIFEST_COLUMNS = [
    "user_id", "variant_index", "dataset", "format", "path",
    "seed", "prompt_digest", "values_total", "values_found",
]


def _write_manifest(manifest: CorpusManifest) -> None:
    with manifest.path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            writer.writerow(
                [r.user_id, r.variant_index, r.dataset, r.format, r.path,
                 "" if r.seed is None else r.seed, r.prompt_digest,
                 r.values_total, r.values_found]
            )


def load_manifest(root: Path | str) -> CorpusManifest:
    root = Path(root)
    rows: list[ManifestRow] = []
    with (root / "corpus_manifest.csv").open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ValueError(f"{root}: unexpected manifest columns {reader.fieldnames}")
        for row in reader:
            rows.append(
                ManifestRow(
                    user_id=row["user_id"],
                    variant_index=int(row["variant_index"]),
                    dataset=row["dataset"],
                    format=row["format"],
                    path=row["path"],
                    seed=int(row["seed"]) if row["seed"] != "" else None,
                    prompt_digest=row["prompt_digest"],
                    values_total=int(row["values_total"]),
                    values_found=int(row["values_found"]),
                )
            )
    return CorpusManifest(root, tuple(rows))


def manifest_digest(manifest: CorpusManifest) -> str:
    return hashlib.sha256(manifest.path.read_bytes()).hexdigest()


def build_corpus(
    datasets: Sequence[tuple[str, Dataset]],
    spec: CorpusSpec,
    gateway,
    cache: ResponseCache,
    out_dir: Path | str,
    user_ids: Mapping[str, Sequence[str]] | None = None,
    model_id: str = "default",
    temperature: float = 0.7,
    max_tokens: int = 4096,
    char_budget: int = DEFAULT_CHAR_BUDGET,
    max_failure_fraction: float = 0.0,
) -> CorpusManifest:
    """Materialize a fine-tuning corpus on disk and return its manifest.

    ``datasets`` is a list of (name, dataset); more than one entry interleaves
    users from all sources. ``user_ids`` optionally restricts each dataset to a
    subset (e.g. to keep held-out users away from training). Documents land
    under <out_dir>/docs/<dataset>/, one file per (user, variant); gateway
    failures are tolerated up to ``max_failure_fraction`` of all documents.
    """
    root = Path(out_dir)
    rows: list[ManifestRow] = []
    failures: list[tuple[str, str]] = []

    tasks: list[tuple[str, Dataset, UserSequence]] = []
    for name, dataset in datasets:
        wanted = None if user_ids is None else set(user_ids.get(name, ()))
        for seq in dataset.sequences:
            if wanted is None or seq.user_id in wanted:
                tasks.append((name, dataset, seq))

    def one_user(task: tuple[str, Dataset, UserSequence]) -> list[ManifestRow]:
        name, dataset, seq = task
        schema = dataset.schema
        doc_dir = root / "docs" / name
        doc_dir.mkdir(parents=True, exist_ok=True)
        user_rows: list[ManifestRow] = []

        def emit(variant: int, fmt: str, text: str, seed: int | None, digest: str) -> None:
            rel = Path("docs") / name / f"{safe_filename(seq.user_id)}.v{variant}.txt"
            (root / rel).write_text(text, encoding="utf-8")
            fidelity = audit_fidelity(text, seq, schema)
            user_rows.append(
                ManifestRow(seq.user_id, variant, name, fmt, str(rel), seed, digest,
                            fidelity.values_total, fidelity.values_found)
            )

        if spec.single_format is not None:
            rendered = serialize_any(seq, schema, None, spec.single_format)
            for variant in range(spec.volume_multiplier):
                emit(variant, spec.single_format, rendered.text, None, "")
        else:
            try:
                docs = enrich_user(
                    seq, schema, spec.volume_multiplier, gateway, cache,
                    model_id=model_id, temperature=temperature,
                    max_tokens=max_tokens, char_budget=char_budget,
                )
            except GatewayError as exc:
                failures.append((seq.user_id, str(exc)))
                return []
            for doc in docs:
                emit(doc.variant_index, "enriched", doc.text, doc.provenance.seed,
                     doc.provenance.prompt_digest)
        if spec.include_raw:
            raw = serialize_pipe(seq, schema)
            emit(spec.volume_multiplier, PIPE_FORMAT, raw.text, None, "")
        return user_rows

    in_flight = getattr(getattr(gateway, "config", None), "in_flight", 4)
    if spec.single_format is None and in_flight > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=in_flight) as pool:
            for user_rows in pool.map(one_user, tasks):
                rows.extend(user_rows)
    else:
        for task in tasks:
            rows.extend(one_user(task))

    if failures:
        allowed = max_failure_fraction * len(tasks)
        if len(failures) > allowed:
            user, reason = failures[0]
            raise GatewayError(
                f"corpus build failed for {len(failures)}/{len(tasks)} users "
                f"(first: {user}: {reason})"
            )
        log.warning("[enrich] tolerated %d failed users", len(failures))

    rows.sort(key=lambda r: (r.user_id, r.dataset, r.variant_index))
    manifest = CorpusManifest(root, tuple(rows))
    root.mkdir(parents=True, exist_ok=True)
    _write_manifest(manifest)
    return manifest
