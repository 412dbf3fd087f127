"""Stage orchestration: serialize, enrich, train, embed, ensemble, eval, ablations.

Each stage owns <output_dir>/<stage>/ and is skipped on rerun when its .done
marker exists; failures leave a .failed marker so partial output is never
mistaken for a result.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .config import ConfigError, DatasetPaths, PipelineConfig
from .core import Dataset, load_dataset
from .embedder import (
    EmbeddingMatrix,
    LocalModelBackend,
    build_matrix,
    concat_embeddings,
    embed_user,
    load_matrix,
    save_matrix,
)
from .enrichment import CorpusManifest, CorpusSpec, build_corpus, load_manifest
from .evaluator import (
    AblationPoint,
    EvalReport,
    ProbeConfig,
    SplitPlan,
    data_size_ablation,
    evaluate_cv,
    make_split_plan,
)
from .gateway import HttpGateway, ResponseCache, StubGateway
from .serializer import write_corpus
from .tinylm import (
    TinyLM,
    TrainConfig,
    load_checkpoint,
    pretrain_generic,
    save_checkpoint,
    save_history_csv,
    train,
)

log = logging.getLogger(__name__)


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class PipelineRun:
    """One configured run; stages share loaded datasets, gateway, and cache."""

    def __init__(self, config: PipelineConfig, stub_llm: bool = False, force: bool = False):
        self.config = config
        self.force = force
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = ResponseCache(config.cache_dir)
        if stub_llm or config.stub_llm:
            self.gateway: StubGateway | HttpGateway = StubGateway()
        else:
            self.gateway = HttpGateway(config.endpoint)

    @cached_property
    def dataset(self) -> Dataset:
        return _load(self.config.dataset)

    @cached_property
    def dataset2(self) -> Dataset | None:
        return _load(self.config.dataset2) if self.config.dataset2 else None

    @cached_property
    def split_plan(self) -> SplitPlan:
        return make_split_plan(
            self.dataset,
            test_fraction=self.config.eval_test_fraction,
            n_folds=self.config.eval_n_folds,
            seed=self.config.seed,
        )

    @property
    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(l2=self.config.probe_l2)

    def _training_user_ids(self) -> dict[str, list[str]]:
        """Everyone except the held-out test users; unlabeled users stay in."""
        test = set(self.split_plan.test_user_ids)
        ids = {
            self.config.dataset.name: [
                s.user_id for s in self.dataset.sequences if s.user_id not in test
            ]
        }
        if self.dataset2 is not None and self.config.dataset2 is not None:
            ids[self.config.dataset2.name] = [s.user_id for s in self.dataset2.sequences]
        return ids

    def _stage(self, name: str, build) -> Path:
        stage_dir = self.out / name
        done = stage_dir / ".done"
        failed = stage_dir / ".failed"
        if done.exists() and not failed.exists() and not self.force:
            log.info("[%s] up to date, skipping (use --force to rebuild)", name)
            return stage_dir
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True)
        try:
            build(stage_dir)
        except BaseException as exc:
            failed.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
            raise StageFailure(name, exc) from exc
        done.write_text("", encoding="utf-8")
        log.info("[%s] done", name)
        return stage_dir

    # --- stages -----------------------------------------------------------

    def serialize(self) -> Path:
        def build(stage_dir: Path) -> None:
            manifest = write_corpus(
                self.dataset.sequences, self.dataset.schema,
                self.config.serialize_formats, stage_dir,
            )
            log.info("[serialize] wrote %s", manifest)

        return self._stage("serialize", build)

    def enrich(self) -> Path:
        def build(stage_dir: Path) -> None:
            datasets: list[tuple[str, Dataset]] = [(self.config.dataset.name, self.dataset)]
            if self.dataset2 is not None and self.config.dataset2 is not None:
                datasets.append((self.config.dataset2.name, self.dataset2))
            manifest = build_corpus(
                datasets, self.config.corpus, self.gateway, self.cache, stage_dir,
                user_ids=self._training_user_ids(),
                model_id=self.config.endpoint.model_id,
                temperature=self.config.endpoint.temperature,
                max_tokens=self.config.endpoint.max_tokens,
                char_budget=self.config.enrich_char_budget,
                max_failure_fraction=self.config.enrich_max_failure_fraction,
            )
            log.info("[enrich] %d documents", len(manifest.rows))

        return self._stage("enrich", build)

    def _initial_model(self) -> TinyLM:
        if self.config.train_init == "generic":
            pre_cfg = TrainConfig(
                epochs=self.config.pretrain_epochs,
                learning_rate=self.config.pretrain_learning_rate,
                schedule="cosine",
                weight_decay=self.config.train.weight_decay,
                batch_size=1,
                adam_beta2=self.config.train.adam_beta2,
                adam_epsilon=self.config.train.adam_epsilon,
                seed=self.config.seed,
            )
            return pretrain_generic(self.config.lm, pre_cfg).model
        return TinyLM(self.config.lm)

    def train(self) -> Path:
        self.enrich()

        def build(stage_dir: Path) -> None:
            manifest = load_manifest(self.out / "enrich")
            model = self._initial_model()
            result = train(model, manifest.document_texts(), self.config.train)
            save_checkpoint(result.model, stage_dir / "model.tlm")
            save_history_csv(result.history, stage_dir / "loss_history.csv")
            if result.history:
                log.info(
                    "[train] %d steps, final per-token loss %.4f",
                    len(result.history), result.history[-1].per_token_loss,
                )

        return self._stage("train", build)

    def embed(self) -> Path:
        self.train()

        def build(stage_dir: Path) -> None:
            backend = LocalModelBackend(load_checkpoint(self.out / "train" / "model.tlm"))
            matrix = self._embed_with(backend)
            save_matrix(matrix, stage_dir / "embeddings.emb")
            meta = {
                "model_digest": backend.model_digest,
                "k": self.config.k,
                "n_users": len(matrix.user_ids),
                "dim": matrix.dim,
                "text_variant": "raw-pipe",
            }
            (stage_dir / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
            log.info("[embed] %d users, dim %d", len(matrix.user_ids), matrix.dim)

        return self._stage("embed", build)

    def _embed_with(self, backend) -> EmbeddingMatrix:
        embeddings = [
            embed_user(
                backend, seq, self.dataset.schema, k=self.config.k,
                include_embedding_layer=self.config.include_embedding_layer,
            )
            for seq in self.dataset.labeled()
        ]
        return build_matrix(embeddings, {"model_digest": backend.model_digest})

    def ensemble(self) -> Path:
        if not self.config.ensemble_inputs:
            raise ConfigError(["ensemble.inputs: missing required key"])
        missing = [str(p) for p in self.config.ensemble_inputs if not p.exists()]
        if missing:
            raise ConfigError([f"ensemble.inputs: path does not exist: {p}" for p in missing])

        def build(stage_dir: Path) -> None:
            matrices = [load_matrix(p) for p in self.config.ensemble_inputs]
            combined = concat_embeddings(*matrices)
            save_matrix(combined, stage_dir / "ensemble.emb")
            log.info("[ensemble] %d inputs -> dim %d", len(matrices), combined.dim)

        return self._stage("ensemble", build)

    def evaluate(self, embeddings_path: Path | None = None) -> Path:
        if embeddings_path is None:
            self.embed()
            embeddings_path = self.out / "embed" / "embeddings.emb"

        def build(stage_dir: Path) -> None:
            matrix = load_matrix(embeddings_path)
            report = evaluate_cv(matrix, self.dataset, self.split_plan, self.probe_config)
            _write_report(stage_dir, report)
            log.info("[eval] %s = %.4f +/- %.4f", report.metric, report.mean, report.std)

        return self._stage("eval", build)

    def pipeline(self) -> Path:
        self.serialize()
        return self.evaluate()

    # --- ablations --------------------------------------------------------

    def _row_cycle(self, stage_dir: Path, slug: str, spec: CorpusSpec, base: TinyLM,
                   datasets: list[tuple[str, Dataset]]) -> EvalReport:
        """corpus -> fine-tune -> embed -> evaluate for one ablation row."""
        import copy

        corpus_dir = stage_dir / f"corpus_{slug}"
        manifest = build_corpus(
            datasets, spec, self.gateway, self.cache, corpus_dir,
            user_ids=self._training_user_ids(),
            model_id=self.config.endpoint.model_id,
            temperature=self.config.endpoint.temperature,
            max_tokens=self.config.endpoint.max_tokens,
            char_budget=self.config.enrich_char_budget,
            max_failure_fraction=self.config.enrich_max_failure_fraction,
        )
        model = copy.deepcopy(base)
        result = train(model, manifest.document_texts(), self.config.train)
        matrix = self._embed_with(LocalModelBackend(result.model))
        return evaluate_cv(matrix, self.dataset, self.split_plan, self.probe_config)

    def ablate_components(self) -> Path:
        if self.dataset2 is None:
            raise ConfigError(
                ["dataset2.events: required for 'ablate components' (cross-dataset row)"]
            )

        def build(stage_dir: Path) -> None:
            base = self._pretrained_base()
            rows: list[tuple[str, EvalReport]] = []

            report = evaluate_cv(
                self._embed_with(LocalModelBackend(base)),
                self.dataset, self.split_plan, self.probe_config,
            )
            rows.append(("pretrained", report))

            primary = [(self.config.dataset.name, self.dataset)]
            assert self.dataset2 is not None and self.config.dataset2 is not None
            both = primary + [(self.config.dataset2.name, self.dataset2)]
            raw_spec = CorpusSpec(1, False, "single:pipe")
            enriched_spec = CorpusSpec(
                self.config.corpus.volume_multiplier, self.config.corpus.include_raw, "mixed"
            )
            rows.append(("finetuned-raw", self._row_cycle(stage_dir, "raw", raw_spec, base, primary)))
            rows.append(
                ("finetuned-enriched", self._row_cycle(stage_dir, "enriched", enriched_spec, base, primary))
            )
            rows.append(
                ("finetuned-cross", self._row_cycle(stage_dir, "cross", enriched_spec, base, both))
            )
            _write_rows(stage_dir, "components", [(name, r) for name, r in rows])

        return self._stage("ablate_components", build)

    def _pretrained_base(self) -> TinyLM:
        pre_cfg = TrainConfig(
            epochs=self.config.pretrain_epochs,
            learning_rate=self.config.pretrain_learning_rate,
            schedule="cosine",
            weight_decay=self.config.train.weight_decay,
            batch_size=1,
            adam_beta2=self.config.train.adam_beta2,
            adam_epsilon=self.config.train.adam_epsilon,
            seed=self.config.seed,
        )
        return pretrain_generic(self.config.lm, pre_cfg).model

    def ablate_formats(self) -> Path:
        def build(stage_dir: Path) -> None:
            base = self._pretrained_base()
            primary = [(self.config.dataset.name, self.dataset)]
            rows: list[tuple[str, EvalReport]] = []
            for row_spec in self.config.ablate_format_rows:
                mode, mult = _parse_format_row(row_spec)
                spec = CorpusSpec(mult, mode == "mixed+raw", "mixed" if mode.startswith("mixed") else mode)
                slug = row_spec.replace(":", "_").replace("@", "_x").replace("+", "_")
                rows.append((row_spec, self._row_cycle(stage_dir, slug, spec, base, primary)))
            _write_rows(stage_dir, "formats", rows)

        return self._stage("ablate_formats", build)

    def ablate_datasize(self) -> Path:
        self.embed()

        def build(stage_dir: Path) -> None:
            matrix = load_matrix(self.out / "embed" / "embeddings.emb")
            n_train = len(self.split_plan.train_user_ids)
            sizes = _resolve_sizes(self.config.ablate_sizes, n_train)
            points = data_size_ablation(
                matrix, self.dataset, self.split_plan, sizes,
                seed=self.config.seed, probe_config=self.probe_config,
            )
            _write_points(stage_dir, points)

        return self._stage("ablate_datasize", build)


def _load(paths: DatasetPaths) -> Dataset:
    return load_dataset(paths.events, paths.labels, paths.schema)


def _parse_format_row(row: str) -> tuple[str, int]:
    if "@" not in row:
        raise ConfigError([f"ablate.format_rows: expected '<mode>@<mult>', got {row!r}"])
    mode, mult_text = row.rsplit("@", 1)
    try:
        mult = int(mult_text)
    except ValueError:
        raise ConfigError([f"ablate.format_rows: bad multiplier in {row!r}"]) from None
    if mode not in ("mixed", "mixed+raw") and not mode.startswith("single:"):
        raise ConfigError([f"ablate.format_rows: unknown mode {mode!r}"])
    return mode, mult


def _resolve_sizes(tokens: tuple[str, ...], n_train: int) -> list[int]:
    if not tokens:
        sizes = sorted({max(2, n_train // 16), max(2, n_train // 4), n_train})
    else:
        sizes = sorted({n_train if t == "full" else int(t) for t in tokens})
    return [s for s in sizes if s <= n_train]


def _write_report(stage_dir: Path, report: EvalReport) -> None:
    (stage_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (stage_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")


def _write_rows(stage_dir: Path, name: str, rows: list[tuple[str, EvalReport]]) -> None:
    with (stage_dir / f"{name}.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row", "metric", "mean", "std"])
        for label, report in rows:
            writer.writerow([label, report.metric, f"{report.mean:.6f}", f"{report.std:.6f}"])
    payload = [
        {"row": label, "metric": r.metric, "mean": r.mean, "std": r.std,
         "per_fold": list(r.per_fold_metric)}
        for label, r in rows
    ]
    (stage_dir / f"{name}.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    for label, r in rows:
        log.info("[ablate] %-24s %s = %.4f +/- %.4f", label, r.metric, r.mean, r.std)


def _write_points(stage_dir: Path, points: list[AblationPoint]) -> None:
    with (stage_dir / "datasize.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["size", "mean", "std", "n_folds"])
        for p in points:
            writer.writerow([p.size, f"{p.mean:.6f}", f"{p.std:.6f}", p.n_folds])
    payload = [
        {"size": p.size, "mean": p.mean, "std": p.std, "n_folds": p.n_folds} for p in points
    ]
    (stage_dir / "datasize.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    for p in points:
        log.info("[ablate] size %-6d -> %.4f +/- %.4f (%d folds)", p.size, p.mean, p.std, p.n_folds)
