"""Pipeline configuration: plain-text key=value file with field-level validation.

Relative paths resolve against the config file's directory. The environment
variable ES2EMB_ENDPOINT, when set, overrides endpoint.base_url.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .enrichment import CorpusSpec
from .gateway import EndpointConfig
from .kvconfig import KVError, parse_kv_file
from .serializer import ALL_FORMATS
from .tinylm import LMConfig, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Carries one message per offending key."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class DatasetPaths:
    name: str
    events: Path
    labels: Path
    schema: Path


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    k: int
    output_dir: Path
    cache_dir: Path
    dataset: DatasetPaths
    dataset2: DatasetPaths | None
    corpus: CorpusSpec
    lm: LMConfig
    train: TrainConfig
    train_init: str
    pretrain_epochs: int
    pretrain_learning_rate: float
    endpoint: EndpointConfig
    enrich_char_budget: int
    enrich_max_failure_fraction: float
    serialize_formats: tuple[str, ...]
    eval_test_fraction: float
    eval_n_folds: int
    probe_l2: float
    include_embedding_layer: bool
    ablate_sizes: tuple[str, ...]
    ablate_format_rows: tuple[str, ...]
    ensemble_inputs: tuple[Path, ...]
    stub_llm: bool


class _Reader:
    def __init__(self, values: dict[str, str], base: Path):
        self.values = values
        self.base = base
        self.problems: list[str] = []
        self.used: set[str] = set()

    def _raw(self, key: str, default, required: bool):
        self.used.add(key)
        if key in self.values:
            return self.values[key]
        if required:
            self.problems.append(f"{key}: missing required key")
        return default

    def text(self, key: str, default: str | None = None, required: bool = False) -> str | None:
        return self._raw(key, default, required)

    def integer(self, key: str, default: int | None = None, required: bool = False) -> int | None:
        raw = self._raw(key, None, required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            self.problems.append(f"{key}: not an integer: {raw!r}")
            return default

    def number(self, key: str, default: float | None = None, required: bool = False) -> float | None:
        raw = self._raw(key, None, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            self.problems.append(f"{key}: not a number: {raw!r}")
            return default

    def flag(self, key: str, default: bool = False) -> bool:
        raw = self._raw(key, None, False)
        if raw is None:
            return default
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        self.problems.append(f"{key}: not a boolean: {raw!r}")
        return default

    def path(self, key: str, default: str | None = None, required: bool = False,
             must_exist: bool = False) -> Path | None:
        raw = self._raw(key, default, required)
        if raw is None:
            return None
        p = Path(raw)
        if not p.is_absolute():
            p = self.base / p
        if must_exist and not p.exists():
            self.problems.append(f"{key}: path does not exist: {p}")
        return p


def _dataset_paths(reader: _Reader, prefix: str, required: bool) -> DatasetPaths | None:
    keys = [f"{prefix}.events", f"{prefix}.labels", f"{prefix}.schema"]
    present = [k for k in keys if k in reader.values]
    if not required and not present:
        reader.used.update(keys + [f"{prefix}.name"])
        return None
    if not required and len(present) != len(keys):
        for k in keys:
            if k not in reader.values:
                reader.problems.append(f"{k}: required when any {prefix}.* key is set")
        return None
    events = reader.path(f"{prefix}.events", required=required, must_exist=True)
    labels = reader.path(f"{prefix}.labels", required=required, must_exist=True)
    schema = reader.path(f"{prefix}.schema", required=required, must_exist=True)
    name = reader.text(f"{prefix}.name", default=prefix) or prefix
    if events is None or labels is None or schema is None:
        return None
    return DatasetPaths(name, events, labels, schema)


def load_pipeline_config(path: Path | str) -> PipelineConfig:
    """Parse and validate; raises ConfigError listing every problem by key."""
    path = Path(path)
    try:
        pairs = parse_kv_file(path)
    except (OSError, KVError) as exc:
        raise ConfigError([str(exc)]) from None
    reader = _Reader({k: v for k, v, _ in pairs}, path.parent)

    version = reader.integer("config_version", required=True)
    if version is not None and version != CONFIG_VERSION:
        reader.problems.append(f"config_version: expected {CONFIG_VERSION}, got {version}")

    seed = reader.integer("seed", required=True)
    k = reader.integer("k", required=True)
    if k is not None and k < 1:
        reader.problems.append("k: must be >= 1")
    output_dir = reader.path("output_dir", required=True)
    cache_dir = reader.path("cache_dir") or (output_dir / "cache" if output_dir else None)

    dataset = _dataset_paths(reader, "dataset", required=True)
    dataset2 = _dataset_paths(reader, "dataset2", required=False)

    volume = reader.integer("corpus.volume_multiplier", default=1)
    include_raw = reader.flag("corpus.include_raw", default=False)
    format_mode = reader.text("corpus.format_mode", default="mixed") or "mixed"
    corpus = None
    try:
        corpus = CorpusSpec(volume or 1, include_raw, format_mode)
    except ValueError as exc:
        reader.problems.append(f"corpus.format_mode: {exc}")

    lm = None
    try:
        lm = LMConfig(
            n_layers=reader.integer("lm.n_layers", default=4) or 4,
            hidden_dim=reader.integer("lm.hidden_dim", default=128) or 128,
            n_heads=reader.integer("lm.n_heads", default=4) or 4,
            context_len=reader.integer("lm.context_len", default=1024) or 1024,
            vocab_size=reader.integer("lm.vocab_size", default=257) or 257,
            seed=seed or 0,
        )
    except ValueError as exc:
        reader.problems.append(f"lm.*: {exc}")

    train = None
    try:
        train = TrainConfig(
            epochs=reader.integer("train.epochs", default=30) or 30,
            learning_rate=reader.number("train.learning_rate", default=1e-5) or 1e-5,
            schedule=reader.text("train.schedule", default="cosine") or "cosine",
            weight_decay=_zero_ok(reader.number("train.weight_decay", default=1e-6), 1e-6),
            batch_size=reader.integer("train.batch_size", default=1) or 1,
            adam_beta1=reader.number("train.adam_beta1", default=0.9) or 0.9,
            adam_beta2=reader.number("train.adam_beta2", default=0.95) or 0.95,
            adam_epsilon=reader.number("train.adam_epsilon", default=1e-5) or 1e-5,
            seed=seed or 0,
        )
    except ValueError as exc:
        reader.problems.append(f"train.*: {exc}")

    train_init = reader.text("train.init", default="fresh") or "fresh"
    if train_init not in ("fresh", "generic"):
        reader.problems.append(f"train.init: expected 'fresh' or 'generic', got {train_init!r}")

    base_url = os.environ.get("ES2EMB_ENDPOINT") or (
        reader.text("endpoint.base_url", default="http://127.0.0.1:8000") or ""
    )
    endpoint = EndpointConfig(
        base_url=base_url,
        model_id=reader.text("endpoint.model_id", default="default") or "default",
        timeout=reader.number("endpoint.timeout", default=30.0) or 30.0,
        retries=reader.integer("endpoint.retries", default=3) or 3,
        backoff_base=reader.number("endpoint.backoff_base", default=1.0) or 1.0,
        temperature=_zero_ok(reader.number("endpoint.temperature", default=0.7), 0.7),
        max_tokens=reader.integer("endpoint.max_tokens", default=4096) or 4096,
        in_flight=reader.integer("endpoint.in_flight", default=4) or 4,
    )

    formats_raw = reader.text("serialize.formats", default="pipe") or "pipe"
    serialize_formats = tuple(f.strip() for f in formats_raw.split(",") if f.strip())
    for fmt in serialize_formats:
        if fmt not in ALL_FORMATS:
            reader.problems.append(f"serialize.formats: unknown format {fmt!r}")

    test_fraction = reader.number("eval.test_fraction", default=0.1) or 0.1
    if not 0.0 < test_fraction < 1.0:
        reader.problems.append("eval.test_fraction: must be in (0, 1)")
    n_folds = reader.integer("eval.n_folds", default=5) or 5
    if n_folds < 1:
        reader.problems.append("eval.n_folds: must be >= 1")

    sizes_raw = reader.text("ablate.sizes", default="") or ""
    ablate_sizes = tuple(s.strip() for s in sizes_raw.split(",") if s.strip())
    for s in ablate_sizes:
        if s != "full" and not s.isdigit():
            reader.problems.append(f"ablate.sizes: expected integers or 'full', got {s!r}")

    rows_raw = reader.text(
        "ablate.format_rows",
        default="single:pipe@1;single:html@1;single:json@1;mixed@1;mixed@7;mixed+raw@7",
    ) or ""
    ablate_format_rows = tuple(r.strip() for r in rows_raw.split(";") if r.strip())

    ensemble_raw = reader.text("ensemble.inputs", default="") or ""
    ensemble_inputs = tuple(
        (path.parent / p.strip()) if not Path(p.strip()).is_absolute() else Path(p.strip())
        for p in ensemble_raw.split(",")
        if p.strip()
    )

    cfg_kwargs = dict(
        enrich_char_budget=reader.integer("enrich.char_budget", default=16000) or 16000,
        enrich_max_failure_fraction=_zero_ok(
            reader.number("enrich.max_failure_fraction", default=0.0), 0.0
        ),
        probe_l2=reader.number("eval.probe_l2", default=1e-2) or 1e-2,
        include_embedding_layer=reader.flag("embed.include_embedding_layer", default=False),
        pretrain_epochs=reader.integer("pretrain.epochs", default=5) or 5,
        pretrain_learning_rate=reader.number("pretrain.learning_rate", default=3e-4) or 3e-4,
        stub_llm=reader.flag("stub_llm", default=False),
    )

    unknown = sorted(set(reader.values) - reader.used)
    for key in unknown:
        reader.problems.append(f"{key}: unknown key")

    if reader.problems or None in (seed, k, output_dir, cache_dir, dataset, corpus, lm, train):
        if not reader.problems:
            reader.problems.append("configuration incomplete")
        raise ConfigError(reader.problems)

    assert dataset is not None and corpus is not None and lm is not None and train is not None
    assert output_dir is not None and cache_dir is not None
    return PipelineConfig(
        seed=seed or 0,
        k=k or 8,
        output_dir=output_dir,
        cache_dir=cache_dir,
        dataset=dataset,
        dataset2=dataset2,
        corpus=corpus,
        lm=lm,
        train=train,
        train_init=train_init,
        endpoint=endpoint,
        serialize_formats=serialize_formats,
        eval_test_fraction=test_fraction,
        eval_n_folds=n_folds,
        ablate_sizes=ablate_sizes,
        ablate_format_rows=ablate_format_rows,
        ensemble_inputs=ensemble_inputs,
        **cfg_kwargs,
    )


def _zero_ok(value: float | None, default: float) -> float:
    return default if value is None else value
