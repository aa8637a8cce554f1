"""Tests for the pipeline stages on the tiny planted dataset."""

import json
from dataclasses import replace

import numpy as np
import pytest

from tokrec.checkpoint import read_checkpoint
from tokrec.config import load_config
from tokrec.errors import (
    CheckpointMismatchError,
    DivisibilityError,
    MissingInputError,
    ParameterAuditError,
    UnknownItemError,
)
from tokrec.pipeline import (
    CHECKPOINT_FILE,
    PER_USER_FILE,
    REPORT_FILE,
    SWEEP_FILE,
    TRAIN_LOG_FILE,
    audit_for,
    load_dataset,
    prepare_model,
    run_all,
    run_evaluate,
    run_quantize,
    run_retrieve,
    run_sweep,
    run_train,
)

from .conftest import write_tiny_planted


def _with_model(config, **changes):
    return replace(config, model=replace(config.model, **changes))


def _with_output(config, path):
    return replace(config, paths=replace(config.paths, output_dir=str(path)))


class TestQuantizeStage:
    def test_writes_token_artifacts(self, planted_config):
        config = load_config(planted_config)

        results = run_quantize(config)
        out = config.output_dir
        assert set(results) == {"vision", "text"}
        for modality in ("vision", "text"):
            assert (out / f"tokens_{modality}.tsv").is_file()
            assert (out / f"codebook_{modality}.mcbk").is_file()
            assert (out / f"token_histogram_{modality}.tsv").is_file()
            summary = results[modality].summary()
            assert summary["num_slots"] == 2
            assert summary["codebook_size"] == 4
            assert summary["orthonormality_residual"] < 1e-4
        assert (out / "item_ids.tsv").is_file()
        assert (out / "user_ids.tsv").is_file()

    def test_rerun_is_byte_identical(self, planted_config, temp_dir):
        config = load_config(planted_config)
        first = _with_output(config, temp_dir / "a")
        second = _with_output(config, temp_dir / "b")

        run_quantize(first)
        run_quantize(second)
        for name in ("tokens_vision.tsv", "codebook_text.mcbk", "token_histogram_vision.tsv"):
            assert (temp_dir / "a" / name).read_bytes() == (temp_dir / "b" / name).read_bytes()

    def test_slots_must_divide_feature_dim(self, temp_dir):
        config = load_config(write_tiny_planted(temp_dir / "data", {"quantizer": {"num_slots": 3}}))

        with pytest.raises(DivisibilityError) as exc_info:
            run_quantize(config)
        assert exc_info.value.exit_code == 2

    def test_needs_feature_files(self, planted_config):
        config = load_config(planted_config)
        config = replace(config, paths=replace(config.paths, features={}))

        with pytest.raises(MissingInputError):
            run_quantize(config)


class TestTrainAndEvaluate:
    def test_run_all_outputs(self, planted_config):
        config = load_config(planted_config)

        report = run_all(config, per_user=True)
        out = config.output_dir
        assert (out / CHECKPOINT_FILE).is_file()
        log_lines = (out / TRAIN_LOG_FILE).read_text().splitlines()
        assert 1 <= len(log_lines) <= 2
        assert set(json.loads(log_lines[0])) == {
            "epoch", "loss", "val_recall@20", "val_ndcg@20", "wall_time"
        }

        data = json.loads((out / REPORT_FILE).read_text())
        assert data["run_id"] == report.run_id
        assert set(data["metrics"]) == {"recall@10", "ndcg@10", "recall@20", "ndcg@20"}
        assert set(data["buckets"]) == {"0-5", "6-10", "11-20", "21-50", "51+"}
        assert data["parameter_audit"]["ratio"] < 1.0
        assert data["runtime_audit"] == report.audit.counts()
        assert data["ablation"]["mode"] == "id_free"
        assert "distinguishability" in data["token_analytics"]

        per_user = (out / PER_USER_FILE).read_text().splitlines()
        assert per_user[0].startswith("user\tnum_relevant")
        assert len(per_user) == report.result.num_evaluated_users + 1

    def test_id_based_needs_no_tokens(self, planted_config):
        config = _with_model(load_config(planted_config), mode="id_based")

        run_train(config)
        report = run_evaluate(config)
        assert not (config.output_dir / "tokens_vision.tsv").exists()
        assert report.audit.ratio == 1.0
        assert report.token_analytics == {}

    def test_evaluate_without_checkpoint(self, planted_config):
        config = _with_model(load_config(planted_config), mode="id_based")

        with pytest.raises(MissingInputError):
            run_evaluate(config)

    def test_id_free_train_without_tokens(self, planted_config):
        with pytest.raises(MissingInputError):
            run_train(load_config(planted_config))

    def test_checkpoint_mismatch(self, planted_config):
        config = load_config(planted_config)
        run_all(config)

        with pytest.raises(CheckpointMismatchError) as exc_info:
            run_evaluate(_with_model(config, dim=16))
        assert exc_info.value.exit_code == 3

    def test_tokens_changed_after_training(self, planted_config):
        config = load_config(planted_config)
        run_all(config)
        tokens = config.output_dir / "tokens_vision.tsv"
        lines = tokens.read_text().splitlines()
        item, first, *rest = lines[0].split("\t")
        lines[0] = "\t".join([item, str((int(first) + 1) % 4), *rest])
        tokens.write_text("\n".join(lines) + "\n")

        with pytest.raises(CheckpointMismatchError) as exc_info:
            run_evaluate(config)
        assert exc_info.value.name == "item_tokens"
        assert exc_info.value.exit_code == 3

    def test_audit_must_match_allocation(self, planted_config):
        config = load_config(planted_config)
        run_quantize(config)
        dataset, model, _ = prepare_model(config)

        assert audit_for(config, model, dataset).counts() == model.parameter_breakdown()
        wider = replace(config, quantizer=replace(config.quantizer, codebook_size=8))
        with pytest.raises(ParameterAuditError) as exc_info:
            audit_for(wider, model, dataset)
        assert exc_info.value.exit_code == 3

    def test_evaluation_independent_of_threads(self, planted_config):
        config = load_config(planted_config)
        run_all(config)

        single = run_evaluate(replace(config, threads=1))
        pooled = run_evaluate(replace(config, threads=4))
        assert single.result.metrics == pooled.result.metrics
        assert single.run_id == pooled.run_id

    def test_same_seed_same_checkpoint(self, planted_config, temp_dir):
        config = load_config(planted_config)
        first = _with_output(config, temp_dir / "a")
        second = _with_output(config, temp_dir / "b")
        run_quantize(first)
        run_quantize(second)

        a = run_train(first)
        b = run_train(second)
        assert a.log and [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
        # Config echoes differ in output_dir only.
        arrays_a = read_checkpoint(a.checkpoint).arrays
        arrays_b = read_checkpoint(b.checkpoint).arrays
        assert set(arrays_a) == set(arrays_b)
        for name, array in arrays_a.items():
            assert np.array_equal(array, arrays_b[name]), name


class TestAblations:
    def test_single_modality_tokens(self, planted_config):
        config = _with_model(load_config(planted_config), token_modalities=("vision",))

        report = run_all(config)
        assert report.ablation["token_modalities"] == ["vision"]
        assert report.audit.item_side_params == 2 * 4 * 8
        assert report.runtime_audit == report.audit.counts()

    @pytest.mark.parametrize("aggregator", ["mean", "linear"])
    def test_aggregators(self, planted_config, aggregator):
        config = _with_model(load_config(planted_config), aggregator=aggregator)

        report = run_all(config)
        assert report.ablation["aggregator"] == aggregator
        assert report.runtime_audit == report.audit.counts()

    def test_modal_agnostic(self, planted_config):
        config = _with_model(load_config(planted_config), tcn_variant="modal_agnostic")

        report = run_all(config)
        assert report.runtime_audit["tcn_params"] == report.audit.tcn_params

    @pytest.mark.parametrize("backbone", ["lightgcn", "vbpr"])
    @pytest.mark.parametrize("mode", ["id_free", "id_based"])
    def test_backbones(self, planted_config, backbone, mode):
        config = _with_model(load_config(planted_config), backbone=backbone, mode=mode)

        report = run_all(config)
        assert np.isfinite(report.result.metric("recall@20"))
        assert report.runtime_audit == report.audit.counts()
        if backbone == "vbpr":
            assert report.audit.backbone_extra_params == (8 + 4) * 8


class TestRetrieve:
    def test_top_matches(self, planted_config):
        config = load_config(planted_config)
        run_quantize(config)
        query = load_dataset(config).item_ids[0]

        matches = run_retrieve(config, query, 3)
        assert len(matches) == 3
        assert all(item != query for item, _ in matches)
        overlaps = [o for _, o in matches]
        assert overlaps == sorted(overlaps, reverse=True)
        assert all(0 <= o <= 4 for o in overlaps)

    def test_zero_top_n(self, planted_config):
        config = load_config(planted_config)
        run_quantize(config)
        query = load_dataset(config).item_ids[0]

        assert run_retrieve(config, query, 0) == []

    def test_unknown_item(self, planted_config):
        config = load_config(planted_config)
        run_quantize(config)

        with pytest.raises(UnknownItemError):
            run_retrieve(config, "no-such-item", 2)


class TestSweep:
    def test_one_run_per_slot_count(self, planted_config):
        config = load_config(planted_config)

        rows = run_sweep(config, (1, 2))
        out = config.output_dir
        assert [r["num_slots"] for r in rows] == [1, 2]
        assert (out / "slots_1" / REPORT_FILE).is_file()
        assert (out / "slots_2" / REPORT_FILE).is_file()
        assert rows[1]["item_side_params"] == 2 * rows[0]["item_side_params"]
        data = json.loads((out / SWEEP_FILE).read_text())
        assert data["runs"] == rows
