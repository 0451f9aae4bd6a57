import logging

import numpy as np
import pytest
import torch

from oracles import cosine_map_oracle
from vlpd.cross_modal import (
    ClassPolicy,
    PolicyError,
    compact_classes,
    cosine_score_map,
    generate_pseudo_labels,
    load_pseudo_labels,
    pseudo_label_path,
    save_pseudo_labels,
)
from vlpd.encoders import ToyVisualEncoder, encode_class_prompts


class TestCompactClasses:
    def test_default_policy_is_nine_names_in_order(self):
        names = compact_classes(ClassPolicy.default())
        assert names == [
            "ground",
            "building",
            "tree",
            "human",
            "traffic sign",
            "car",
            "bicycle",
            "bus",
            "truck",
        ]

    def test_identity_policy(self):
        assert compact_classes(ClassPolicy({"a": "a", "b": "b"})) == ["a", "b"]

    def test_all_discarded_rejected(self):
        with pytest.raises(PolicyError, match="empty"):
            compact_classes(ClassPolicy({"a": None, "b": None}))

    def test_inconsistent_remap_rejected(self):
        # "b" is a target of "a" but itself maps elsewhere.
        with pytest.raises(PolicyError):
            compact_classes(ClassPolicy({"a": "b", "b": "c"}))

    def test_compacted_name_may_collide_with_original(self):
        names = compact_classes(ClassPolicy({"pole": "traffic sign", "traffic sign": "traffic sign"}))
        assert names == ["traffic sign"]


class TestCosineScoreMap:
    def test_self_similarity_is_one(self):
        l = torch.zeros(2, 4, dtype=torch.float64)
        l[0, 0] = 1.0
        l[1, 1] = 2.0
        v = torch.zeros(1, 1, 4, dtype=torch.float64)
        v[0, 0, 0] = 3.0  # same direction as class 0
        s = cosine_score_map(v, l)
        assert float(s[0, 0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_is_zero(self):
        l = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        v = torch.tensor([[[0.0, 5.0]]], dtype=torch.float64)
        assert float(cosine_score_map(v, l)[0, 0, 0]) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force_oracle(self, rng):
        v = rng.standard_normal((2, 2, 4))
        l = rng.standard_normal((3, 4))
        got = cosine_score_map(torch.from_numpy(v), torch.from_numpy(l)).numpy()
        want = cosine_map_oracle(v, l)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_range_and_scale_invariance(self, rng):
        v = rng.standard_normal((4, 5, 8))
        l = rng.standard_normal((6, 8))
        s1 = cosine_score_map(torch.from_numpy(v), torch.from_numpy(l))
        assert float(s1.abs().max()) <= 1.0 + 1e-6
        s2 = cosine_score_map(torch.from_numpy(2.7 * v), torch.from_numpy(l))
        assert float((s1 - s2).abs().max()) < 1e-6

    def test_zero_norm_scores_zero_with_diagnostic(self, caplog):
        l = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        v = torch.zeros(1, 2, 2, dtype=torch.float64)
        v[0, 1] = torch.tensor([1.0, 1.0])
        with caplog.at_level(logging.WARNING):
            s = cosine_score_map(v, l)
        assert float(s[0, 0, 0]) == 0.0
        assert "zero-norm" in caplog.text

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine_score_map(torch.zeros(1, 1, 4), torch.zeros(2, 8))


class TestPseudoLabels:
    @pytest.fixture
    def setup(self):
        frozen = ToyVisualEncoder(seed=2).freeze()
        names = compact_classes(ClassPolicy.default())
        vectors = encode_class_prompts(names, d_prime=64, seed=2)
        return frozen, vectors

    def test_deterministic(self, setup):
        frozen, vectors = setup
        image = torch.rand(3, 96, 128)
        a = generate_pseudo_labels(image, frozen, vectors)
        b = generate_pseudo_labels(image.clone(), frozen, vectors)
        assert a.tobytes() == b.tobytes()

    def test_shape_contract(self, setup):
        frozen, vectors = setup
        labels = generate_pseudo_labels(torch.rand(3, 96, 128), frozen, vectors)
        assert labels.shape == (6, 8, 9)

    def test_content_sensitivity(self, setup):
        frozen, vectors = setup
        blank = torch.full((3, 96, 128), 0.3)
        scene = blank.clone()
        scene[:, 20:70, 40:60] = 0.95
        a = generate_pseudo_labels(blank, frozen, vectors)
        b = generate_pseudo_labels(scene, frozen, vectors)
        assert np.max(np.abs(a - b)) > 0

    def test_requires_frozen_encoder(self, setup):
        _, vectors = setup
        thawed = ToyVisualEncoder(seed=2)
        with pytest.raises(ValueError, match="frozen"):
            generate_pseudo_labels(torch.rand(3, 32, 32), thawed, vectors)

    def test_cache_roundtrip(self, setup, tmp_path):
        frozen, vectors = setup
        labels = generate_pseudo_labels(torch.rand(3, 96, 128), frozen, vectors)
        path = pseudo_label_path("images/img_0007.png", tmp_path)
        assert path.name == "img_0007.vls"
        save_pseudo_labels(labels, path)
        assert np.array_equal(load_pseudo_labels(path), labels)
