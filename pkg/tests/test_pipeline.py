import math

import numpy as np
import pytest
import torch

from vlpd.core import RunConfig, load_tensor_container
from vlpd.data import load_dataset, load_image, make_synthetic_dataset
from vlpd.encoders import parameter_hash
from vlpd.pipeline import (
    TrainingDivergedError,
    combined_loss,
    detect,
    frozen_encoder_for,
    generate_dataset_pseudo_labels,
    load_checkpoint,
    save_checkpoint,
    train,
)

torch.set_num_threads(2)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = make_synthetic_dataset(21, 2, (64, 64), tmp_path_factory.mktemp("ds"))
    return load_dataset(root)


def tiny_config(**kw) -> RunConfig:
    base = dict(
        seed=21,
        iterations=4,
        batch_size=2,
        learning_rate=1e-3,
        encoder_channels=(8, 12, 16, 24),
        d_prime=16,
        detection_channels=12,
        head_channels=12,
        log_every=0,
    )
    base.update(kw)
    return RunConfig(**base)


class TestCombinedLoss:
    def test_paper_default_weighting(self):
        cfg = RunConfig(lambda1=100.0, lambda2=1e-4)
        assert combined_loss(1.0, 0.01, 10.0, cfg) == pytest.approx(2.001, abs=1e-12)

    def test_all_zero(self):
        assert combined_loss(0.0, 0.0, 0.0, RunConfig()) == 0.0

    def test_ablation_identity(self):
        cfg = RunConfig(lambda1=0.0, lambda2=0.0)
        assert combined_loss(1.25, 9.0, 9.0, cfg) == 1.25

    def test_non_finite_term_named(self):
        with pytest.raises(TrainingDivergedError, match="vls"):
            combined_loss(1.0, float("nan"), 0.0, RunConfig())
        with pytest.raises(TrainingDivergedError, match="psc"):
            combined_loss(1.0, 0.0, float("inf"), RunConfig())


class TestTrain:
    def test_smoke_run_and_log_consistency(self, tiny_dataset):
        result = train(tiny_config(), tiny_dataset)
        assert len(result.log_rows) == 4
        assert result.frozen_hash_before == result.frozen_hash_after
        cfg = tiny_config()
        for row in result.log_rows:
            recomputed = row.detection + cfg.lambda1 * row.vls + cfg.lambda2 * row.psc
            assert row.combined == pytest.approx(recomputed, abs=1e-6)

    def test_vls_starts_at_zero(self, tiny_dataset):
        # The trainee encoder replicates the frozen one, so the first
        # score-map prediction equals the pseudo label exactly.
        result = train(tiny_config(iterations=1), tiny_dataset)
        assert result.log_rows[0].vls <= 1e-10

    def test_ablation_run_still_reports_terms(self, tiny_dataset):
        result = train(tiny_config(lambda1=0.0, lambda2=0.0, iterations=2), tiny_dataset)
        row = result.log_rows[-1]
        assert row.combined == pytest.approx(row.detection, abs=1e-9)
        assert row.psc > 0.0  # raw term still computed and logged

    def test_deterministic_replay(self, tiny_dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("VLPD_DETERMINISTIC", "1")
        logs = []
        for run_dir in ("a", "b"):
            cfg = tiny_config(dtype="float64", out_dir=str(tmp_path / run_dir))
            train(cfg, tiny_dataset)
            logs.append((tmp_path / run_dir / "loss_log.tsv").read_bytes())
        assert logs[0] == logs[1]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_config(), [])

    def test_missing_dataset_config_rejected(self):
        with pytest.raises(ValueError, match="dataset"):
            train(tiny_config())

    def test_augmentation_smoke(self, tiny_dataset):
        cfg = tiny_config(
            iterations=2, augment_hflip=True, augment_crop=True, crop_dims=(32, 32)
        )
        result = train(cfg, tiny_dataset)
        assert all(math.isfinite(r.combined) for r in result.log_rows)


class TestPseudoLabelCache:
    def test_cache_matches_on_the_fly(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        paths = generate_dataset_pseudo_labels(tiny_dataset, cfg, tmp_path)
        assert [p.name for p in paths] == ["img_0000.vls", "img_0001.vls"]
        # Training from cache reproduces the uncached run exactly.
        cached_records = load_dataset(tiny_dataset[0].image_path.parent.parent, tmp_path)
        assert all(r.pseudo_path is not None for r in cached_records)
        a = train(cfg, cached_records)
        b = train(cfg, tiny_dataset)
        assert [r.format() for r in a.log_rows] == [r.format() for r in b.log_rows]


class TestCheckpoint:
    def test_save_load_detect_bit_exact_f64(self, tiny_dataset, tmp_path):
        cfg = tiny_config(dtype="float64", iterations=2)
        result = train(cfg, tiny_dataset)
        ckpt = save_checkpoint(tmp_path / "ckpt", result.model, cfg, 2)
        model, cfg2, iteration = load_checkpoint(ckpt)
        assert iteration == 2
        assert cfg2 == cfg
        assert parameter_hash(model) == parameter_hash(result.model)
        image = load_image(tiny_dataset[0].image_path)
        before = detect(result.model, image, cfg, threshold=0.3)
        after = detect(model, image, cfg2, threshold=0.3)
        assert before == after

    def test_manifest_params_are_containers(self, tiny_dataset, tmp_path):
        cfg = tiny_config(iterations=1)
        result = train(cfg, tiny_dataset)
        ckpt = save_checkpoint(tmp_path / "c", result.model, cfg, 1)
        state = result.model.state_dict()
        import json

        manifest = json.loads((ckpt / "manifest.json").read_text())
        assert {e["name"] for e in manifest["params"]} == set(state)
        entry = manifest["params"][0]
        arr = load_tensor_container(ckpt / entry["file"])
        assert arr.shape == tuple(state[entry["name"]].shape)


class TestDetect:
    def test_non_divisible_dims_padded_and_clipped(self, tiny_dataset, rng):
        cfg = tiny_config(iterations=1)
        result = train(cfg, tiny_dataset)
        image = rng.uniform(0, 1, size=(3, 100, 130)).astype(np.float32)
        boxes = detect(result.model, image, cfg, threshold=0.01)
        for b in boxes:
            assert 0 <= b.x and b.x + b.w <= 130
            assert 0 <= b.y and b.y + b.h <= 100

    def test_deterministic(self, tiny_dataset):
        cfg = tiny_config(iterations=1)
        result = train(cfg, tiny_dataset)
        image = load_image(tiny_dataset[0].image_path)
        assert detect(result.model, image, cfg) == detect(result.model, image, cfg)

    def test_untrained_model_blank_image_contract(self):
        from vlpd.model import VlpdModel

        cfg = tiny_config()
        model = VlpdModel(cfg)
        blank = np.full((3, 64, 64), 0.4, dtype=np.float32)
        a = detect(model, blank, cfg, threshold=0.9)
        b = detect(model, blank, cfg, threshold=0.9)
        assert a == b
        for box in a:
            assert box.w > 0 and box.h > 0 and 0.0 <= box.score <= 1.0

    def test_frozen_hash_stable_across_training(self, tiny_dataset):
        cfg = tiny_config(iterations=3)
        frozen = frozen_encoder_for(cfg)
        before = parameter_hash(frozen)
        train(cfg, tiny_dataset)
        assert parameter_hash(frozen_encoder_for(cfg)) == before
