"""Pipeline stages behind the CLI: quantize, train, evaluate, retrieve, sweep."""

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import MODALITIES
from .artifacts import (
    atomic_write_text,
    read_token_file,
    write_codebook,
    write_histogram,
    write_id_map,
    write_json,
    write_jsonl,
    write_token_file,
)
from .backbones import Recommender, TokenItemEncoder, build_recommender
from .checkpoint import load_into, model_arrays, read_checkpoint, write_checkpoint
from .config import RunConfig
from .dataset import (
    FeatureMatrix,
    InteractionDataset,
    build_dataset,
    load_feature_matrix,
    load_interactions,
)
from .errors import (
    ConfigurationError,
    MissingInputError,
    ParameterAuditError,
    TrainingDivergedError,
    UnknownItemError,
)
from .evaluation import (
    Evaluator,
    MetricsReport,
    ParameterAudit,
    parameter_audit,
    per_user_lines,
    retrieve_similar_by_tokens,
    run_id,
    token_distinguishability,
    token_load_stats,
)
from .quantizer import (
    ModalCodebook,
    TokenAssignment,
    assign_tokens,
    fit_opq,
    fit_pq,
    quantization_error,
    token_histogram,
)
from .tcn import TokenCrossNetwork
from .token_store import init_modal_tables, token_matrix
from .trainer import fit

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.motr"
TRAIN_LOG_FILE = "train_log.jsonl"
REPORT_FILE = "report.json"
PER_USER_FILE = "per_user_metrics.tsv"
SWEEP_FILE = "sweep.json"
DIVERGED_FILE = "diverged_batch.json"
ITEM_IDS_FILE = "item_ids.tsv"
USER_IDS_FILE = "user_ids.tsv"

# Sub-seeds that keep independent random streams apart.
_SEED_QUANTIZE = 1
_SEED_TABLES = 2
_SEED_TCN = 3
_SEED_MODEL = 4


def codebook_path(out: Path, modality: str) -> Path:
    return out / f"codebook_{modality}.mcbk"


def tokens_path(out: Path, modality: str) -> Path:
    return out / f"tokens_{modality}.tsv"


def histogram_path(out: Path, modality: str) -> Path:
    return out / f"token_histogram_{modality}.tsv"


def default_threads() -> int:
    return os.cpu_count() or 1


# --- Data ---


def load_dataset(config: RunConfig) -> InteractionDataset:
    if config.paths.interactions is None:
        raise MissingInputError("paths.interactions", "interactions file")
    return build_dataset(load_interactions(config.paths.interactions), config.seed)


def load_features(
    config: RunConfig, dataset: InteractionDataset, modalities: tuple[str, ...]
) -> dict[str, FeatureMatrix]:
    """Feature matrices restricted and ordered to the dataset's items."""
    return {
        m: load_feature_matrix(config.feature_path(m), dataset.num_raw_items, m).select_rows(
            dataset.item_raw_index
        )
        for m in modalities
    }


def configured_modalities(config: RunConfig) -> tuple[str, ...]:
    return tuple(m for m in MODALITIES if m in config.paths.features)


# --- Quantize ---


@dataclass
class QuantizeResult:
    codebook: ModalCodebook
    assignment: TokenAssignment
    error: float

    def summary(self) -> dict[str, Any]:
        return {
            "num_slots": self.codebook.num_slots,
            "codebook_size": self.codebook.codebook_size,
            "dim": self.codebook.dim,
            "quantization_error": self.error,
            "orthonormality_residual": self.codebook.orthonormality_residual(),
            "distinguishability": token_distinguishability(self.assignment.tokens),
            "load": token_load_stats(self.assignment),
        }


def quantize_features(config: RunConfig, features: dict[str, FeatureMatrix]) -> dict[str, QuantizeResult]:
    q = config.quantizer
    results = {}
    for idx, (modality, matrix) in enumerate(features.items()):
        seed = (config.seed, _SEED_QUANTIZE, idx)
        num_slots = q.slots_for(modality)
        if q.opq:
            codebook = fit_opq(matrix, num_slots, q.codebook_size, q.outer_iters, q.kmeans_iters, seed)
        else:
            codebook = fit_pq(matrix, num_slots, q.codebook_size, q.kmeans_iters, seed)
        assignment = assign_tokens(matrix, codebook)
        error = quantization_error(matrix, codebook, assignment)
        logger.info("%s: D=%d K=%d quantization error %.6g", modality, num_slots,
                    q.codebook_size, error)
        results[modality] = QuantizeResult(codebook, assignment, error)
    return results


def run_quantize(config: RunConfig) -> dict[str, QuantizeResult]:
    """Fit codebooks for every configured modality and write tokens and histograms."""
    modalities = configured_modalities(config)
    if not modalities:
        raise MissingInputError("paths.features", "feature files", "Configure at least one modality.")
    dataset = load_dataset(config)
    results = quantize_features(config, load_features(config, dataset, modalities))
    out = config.output_dir
    for modality, result in results.items():
        write_codebook(codebook_path(out, modality), result.codebook)
        write_token_file(tokens_path(out, modality), result.assignment)
        write_histogram(histogram_path(out, modality), token_histogram(result.assignment))
    write_id_map(out / ITEM_IDS_FILE, dataset.item_ids)
    write_id_map(out / USER_IDS_FILE, dataset.user_ids)
    return results


def load_tokens(
    config: RunConfig, dataset: InteractionDataset, modalities: tuple[str, ...]
) -> dict[str, TokenAssignment]:
    return {
        m: read_token_file(
            tokens_path(config.output_dir, m), m, dataset.num_items, config.quantizer.codebook_size
        )
        for m in modalities
    }


# --- Model ---


def build_model(
    config: RunConfig,
    dataset: InteractionDataset,
    assignments: dict[str, TokenAssignment] | None = None,
    features: dict[str, FeatureMatrix] | None = None,
) -> Recommender:
    m = config.model
    tables = network = token_rows = None
    if m.mode == "id_free":
        if assignments is None:
            raise ConfigurationError("ID-free mode needs token assignments")
        modalities = m.active_modalities
        slots = {mod: assignments[mod].num_slots for mod in modalities}
        for mod, d in slots.items():
            if d != config.quantizer.slots_for(mod):
                raise ConfigurationError(
                    f"{mod} token file has D={d}, config says {config.quantizer.slots_for(mod)}"
                )
        tables = init_modal_tables(
            slots, config.quantizer.codebook_size, m.dim, (config.seed, _SEED_TABLES)
        )
        network = TokenCrossNetwork.for_layout(
            modalities,
            {mod: tables.slots_of(mod) for mod in modalities},
            m.dim,
            variant=m.tcn_variant,
            aggregator=m.aggregator,
            seed=(config.seed, _SEED_TCN),
        )
        token_rows = token_matrix(assignments, tables)

    item_features = None
    if m.backbone == "vbpr":
        if not features:
            raise ConfigurationError("vbpr needs feature files")
        item_features = np.concatenate([f.data for f in features.values()], axis=1)

    return build_recommender(
        m.backbone,
        dataset.num_users,
        dataset.num_items,
        m.dim,
        (config.seed, _SEED_MODEL),
        train_edges=dataset.train_edges,
        num_layers=m.num_layers,
        tables=tables,
        network=network,
        token_rows=token_rows,
        item_features=item_features,
    )


def prepare_model(config: RunConfig) -> tuple[InteractionDataset, Recommender, dict[str, TokenAssignment]]:
    """Load everything the configured model needs and allocate it."""
    dataset = load_dataset(config)
    assignments: dict[str, TokenAssignment] = {}
    if config.model.mode == "id_free":
        assignments = load_tokens(config, dataset, config.model.active_modalities)
    features = None
    if config.model.backbone == "vbpr":
        features = load_features(config, dataset, configured_modalities(config))
    return dataset, build_model(config, dataset, assignments, features), assignments


def audit_for(
    config: RunConfig, model: Recommender, dataset: InteractionDataset
) -> ParameterAudit:
    """
    Formula-based audit for the model the config describes.

    Raises:
        ParameterAuditError: If the formula counts differ from the arrays the
            model actually allocated.
    """
    vbpr_dim = model.projection.shape[0] if model.projection is not None else None
    slots = None
    if isinstance(model.encoder, TokenItemEncoder):
        tables = model.encoder.tables
        slots = {mod: len(tables.slots_of(mod)) for mod in tables.modalities}
    audit = parameter_audit(
        dataset.num_users,
        dataset.num_items,
        config.model.dim,
        mode=config.model.mode,
        slots=slots,
        codebook_size=config.quantizer.codebook_size,
        tcn_variant=config.model.tcn_variant,
        aggregator=config.model.aggregator,
        vbpr_feature_dim=vbpr_dim,
    )
    allocated = model.parameter_breakdown()
    if audit.counts() != allocated:
        raise ParameterAuditError(audit.counts(), allocated)
    return audit


# --- Train ---


@dataclass
class TrainOutcome:
    best_epoch: int
    best_metric: float
    epochs_run: int
    checkpoint: Path
    log: list[dict[str, Any]] = field(default_factory=list)


def run_train(config: RunConfig) -> TrainOutcome:
    """
    Train the configured model and write the best checkpoint and the epoch log.

    Raises:
        TrainingDivergedError: After writing the offending batch next to the outputs.
    """
    dataset, model, _ = prepare_model(config)
    out = config.output_dir
    evaluator = Evaluator(dataset, threads=config.threads or default_threads())
    try:
        result = fit(model, dataset, config.train, evaluator)
    except TrainingDivergedError as e:
        write_json(out / DIVERGED_FILE, e.batch)
        raise

    log = [r.to_dict() for r in result.log]
    write_jsonl(out / TRAIN_LOG_FILE, log)
    path = out / CHECKPOINT_FILE
    write_checkpoint(path, config.to_dict(), model_arrays(model, result.best_adam))
    return TrainOutcome(
        best_epoch=result.best_epoch,
        best_metric=result.best_metric,
        epochs_run=len(result.log),
        checkpoint=path,
        log=log,
    )


# --- Evaluate ---


def run_evaluate(config: RunConfig, per_user: bool = False) -> MetricsReport:
    """Score the test split with the trained checkpoint and write report.json."""
    dataset, model, assignments = prepare_model(config)
    out = config.output_dir
    path = out / CHECKPOINT_FILE
    checkpoint = read_checkpoint(path)
    load_into(model, checkpoint)

    evaluator = Evaluator(dataset, threads=config.threads or default_threads())
    result = evaluator.evaluate(*model.representations(), split="test")

    audit = audit_for(config, model, dataset)
    runtime = model.parameter_breakdown()

    analytics: dict[str, Any] = {}
    if isinstance(model.encoder, TokenItemEncoder):
        analytics["distinguishability"] = token_distinguishability(model.encoder.token_rows)
        analytics["load"] = {m: token_load_stats(a) for m, a in assignments.items()}

    echo = config.to_dict()
    report = MetricsReport(
        run_id=run_id(echo, path.read_bytes()),
        config=echo,
        result=result,
        audit=audit,
        runtime_audit=runtime,
        ablation={
            "backbone": config.model.backbone,
            "mode": config.model.mode,
            "aggregator": config.model.aggregator,
            "tcn_variant": config.model.tcn_variant,
            "token_modalities": list(config.model.active_modalities),
        },
        token_analytics=analytics,
    )
    write_json(out / REPORT_FILE, report.to_dict())
    if per_user:
        atomic_write_text(out / PER_USER_FILE, "\n".join(per_user_lines(result)) + "\n")
    return report


# --- Retrieve ---


def run_retrieve(config: RunConfig, item_id: str, top_n: int) -> list[tuple[str, int]]:
    """Items sharing the most token positions with item_id, as (item_id, overlap)."""
    dataset = load_dataset(config)
    query = dataset.item_index(item_id)
    if query is None:
        raise UnknownItemError(item_id)
    modalities = config.model.active_modalities
    assignments = load_tokens(config, dataset, modalities)
    token_rows = np.concatenate([assignments[m].tokens for m in modalities], axis=1)
    return [
        (dataset.item_ids[i], overlap)
        for i, overlap in retrieve_similar_by_tokens(token_rows, query, top_n)
    ]


# --- Composite runs ---


def run_all(config: RunConfig, per_user: bool = False) -> MetricsReport:
    if config.model.mode == "id_free":
        run_quantize(config)
    run_train(config)
    return run_evaluate(config, per_user=per_user)


def run_sweep(config: RunConfig, slot_counts: tuple[int, ...]) -> list[dict[str, Any]]:
    """Quantize, train and evaluate once per token count D; writes sweep.json."""
    rows = []
    for num_slots in slot_counts:
        sub = replace(
            config,
            quantizer=replace(config.quantizer, num_slots=num_slots),
            model=replace(config.model, mode="id_free"),
            paths=replace(config.paths, output_dir=str(config.output_dir / f"slots_{num_slots}")),
        )
        report = run_all(sub)
        audit = report.audit
        rows.append(
            {
                "num_slots": num_slots,
                "total_params": audit.total_params,
                "item_side_params": audit.item_side_params,
                "id_based_equivalent": audit.id_based_equivalent,
                "ratio": audit.ratio,
                "recall@20": report.result.metric("recall@20"),
                "ndcg@20": report.result.metric("ndcg@20"),
            }
        )
        logger.info("sweep D=%d: recall@20 %.5f", num_slots, rows[-1]["recall@20"])
    write_json(config.output_dir / SWEEP_FILE, {"config": config.to_dict(), "runs": rows})
    return rows
