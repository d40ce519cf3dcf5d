from __future__ import annotations

import pytest
import torch

from portraitqa.backbone import (
    SwinBackbone,
    ToyBackbone,
    build_backbone,
    extract_features,
    load_weights,
    read_weights,
    save_weights,
    write_weights,
)
from portraitqa.errors import (
    ArchitectureMismatch,
    ChecksumMismatch,
    NonFiniteActivation,
    ShapeMismatch,
)


@pytest.fixture
def toy():
    return build_backbone("toy", feature_dim=16, seed=0)


class TestForwardContract:
    def test_zero_batch_gives_finite_features(self, toy):
        out = extract_features(toy, torch.zeros(2, 3, 384, 384))
        assert out.shape == (2, 16)
        assert torch.isfinite(out).all()

    def test_eval_mode_deterministic(self, toy):
        toy.eval()
        x = torch.randn(3, 3, 96, 96, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            a = extract_features(toy, x)
            b = extract_features(toy, x)
        assert torch.equal(a, b)

    def test_batch_of_twelve(self, toy):
        out = extract_features(toy, torch.zeros(12, 3, 96, 96))
        assert out.shape[0] == 12

    def test_configured_dimension(self):
        small = build_backbone("toy", feature_dim=16, seed=3)
        out = extract_features(small, torch.zeros(1, 3, 384, 384))
        assert out.shape == (1, 16)
        assert small.feature_dim == 16

    def test_shape_mismatch(self, toy):
        with pytest.raises(ShapeMismatch):
            extract_features(toy, torch.zeros(2, 1, 96, 96))
        with pytest.raises(ShapeMismatch):
            extract_features(toy, torch.zeros(3, 96, 96))

    def test_non_finite_weights_detected(self, toy):
        with torch.no_grad():
            toy.proj.weight.fill_(float("nan"))
        with pytest.raises(NonFiniteActivation):
            extract_features(toy, torch.zeros(1, 3, 96, 96))


class TestIndependence:
    def test_different_seeds_differ(self):
        a = build_backbone("toy", feature_dim=16, seed=0)
        b = build_backbone("toy", feature_dim=16, seed=1)
        x = torch.randn(1, 3, 96, 96, generator=torch.Generator().manual_seed(2))
        assert not torch.equal(a(x), b(x))

    def test_same_seed_identical(self):
        a = build_backbone("toy", feature_dim=16, seed=5)
        b = build_backbone("toy", feature_dim=16, seed=5)
        x = torch.randn(1, 3, 96, 96, generator=torch.Generator().manual_seed(2))
        assert torch.equal(a(x), b(x))

    def test_branches_hold_disjoint_parameters(self):
        full = build_backbone("toy", feature_dim=16, seed=0)
        facial = build_backbone("toy", feature_dim=16, seed=1)
        x = torch.randn(1, 3, 96, 96, generator=torch.Generator().manual_seed(3))
        before = facial(x).detach().clone()
        with torch.no_grad():
            for p in full.parameters():
                p.add_(1.0)
        assert torch.equal(facial(x), before)


class TestGradients:
    def test_input_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        model = ToyBackbone(feature_dim=4, patch_size=8, width=6).double()
        x = torch.randn(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
        w = torch.randn(4, dtype=torch.float64)
        (model(x) @ w).sum().backward()
        h = 1e-6
        idx = (0, 1, 5, 7)
        for _ in range(5):
            with torch.no_grad():
                xp = x.detach().clone()
                xp[idx] += h
                xm = x.detach().clone()
                xm[idx] -= h
                fd = ((model(xp) @ w).sum() - (model(xm) @ w).sum()) / (2 * h)
            assert float(x.grad[idx]) == pytest.approx(float(fd), rel=1e-3)
            idx = (0, int(torch.randint(0, 3, ())), int(torch.randint(0, 16, ())),
                   int(torch.randint(0, 16, ())))
            x.grad = None
            (model(x) @ w).sum().backward()


class TestWeightBlobs:
    def test_round_trip_byte_identical(self, toy):
        manifest, blob = save_weights(toy, branch="full", source="face-IQA-pretrained")
        fresh = build_backbone("toy", feature_dim=16, seed=9)
        load_weights(fresh, manifest, blob)
        _, blob2 = save_weights(fresh, branch="full", source="face-IQA-pretrained")
        assert blob == blob2
        x = torch.randn(1, 3, 96, 96, generator=torch.Generator().manual_seed(4))
        assert torch.equal(toy(x), fresh(x))

    def test_architecture_mismatch(self, toy):
        manifest, blob = save_weights(toy, branch="full", source="random")
        other = build_backbone("toy", feature_dim=32, seed=0)
        with pytest.raises(ArchitectureMismatch):
            load_weights(other, manifest, blob)

    def test_checksum_mismatch(self, toy):
        manifest, blob = save_weights(toy, branch="full", source="random")
        tampered = blob[:-1] + bytes([blob[-1] ^ 0xFF])
        with pytest.raises(ChecksumMismatch):
            load_weights(toy, manifest, tampered)

    def test_file_round_trip(self, toy, tmp_path):
        manifest, blob = save_weights(toy, branch="facial", source="face-IQA-pretrained")
        path = tmp_path / "facial.weights"
        write_weights(path, manifest, blob)
        manifest2, blob2 = read_weights(path)
        assert manifest2 == manifest
        assert blob2 == blob
        assert manifest2.source == "face-IQA-pretrained"

    def test_unknown_backbone_name(self):
        with pytest.raises(ValueError):
            build_backbone("resnet", feature_dim=16, seed=0)


class TestSwinAdapter:
    def test_pooled_feature_dim_and_forward(self):
        model = build_backbone("swin-b", feature_dim=1024, seed=0)
        assert isinstance(model, SwinBackbone)
        assert model.feature_dim == 1024
        assert model.signature() == "swin-b-v1:d=1024"
        model.eval()
        with torch.no_grad():
            out = extract_features(model, torch.zeros(1, 3, 384, 384))
        assert out.shape == (1, 1024)
        assert torch.isfinite(out).all()
