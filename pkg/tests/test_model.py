import numpy as np
import pytest
import torch

from nscfate.errors import (
    CompatibilityError,
    ConfigError,
    CorruptCheckpointError,
    NumericError,
    ShapeError,
    WeightArtifactError,
)
from nscfate.model import (
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
)


def small_config(**overrides):
    kwargs = dict(
        backbone="small_cnn",
        input_shape=(32, 32, 1),
        pretrained_init=False,
        backbone_frozen=False,
        dense1_units=32,
        dense2_units=16,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


class TestModelConfig:
    def test_defaults_match_required_head(self):
        config = ModelConfig()
        assert config.backbone == "resnet50"
        assert config.dense1_units == 1024
        assert config.dropout_rate == 0.5
        assert config.dense2_units == 512
        assert config.feature_width == 2048

    def test_invalid_dropout(self):
        with pytest.raises(ConfigError):
            ModelConfig(dropout_rate=1.0)

    def test_invalid_backbone(self):
        with pytest.raises(ConfigError):
            ModelConfig(backbone="vgg")


class TestBuildModel:
    def test_default_head_shapes_four_classes(self, taxonomy4):
        state = build_model(ModelConfig(pretrained_init=False), taxonomy4, seed=1)
        assert tuple(state.net.dense1.weight.shape) == (1024, 2048)
        assert tuple(state.net.dense2.weight.shape) == (512, 1024)
        assert tuple(state.net.output.weight.shape) == (4, 512)

    def test_seed_determinism(self, taxonomy4):
        a = build_model(small_config(), taxonomy4, seed=5)
        b = build_model(small_config(), taxonomy4, seed=5)
        c = build_model(small_config(), taxonomy4, seed=6)
        for (na, pa), (_, pb) in zip(
            sorted(a.net.named_parameters()), sorted(b.net.named_parameters())
        ):
            assert torch.equal(pa, pb), na
        assert not torch.equal(a.net.dense1.weight, c.net.dense1.weight)

    def test_zero_dropout_is_identity_in_both_modes(self, taxonomy4, rng):
        state = build_model(small_config(dropout_rate=0.0), taxonomy4, seed=2)
        batch = rng.random((3, 32, 32, 1))
        p_train, _ = forward(state, batch, training_mode=True, rng_stream=1)
        p_eval, _ = forward(state, batch, training_mode=False)
        assert np.allclose(p_train, p_eval)

    def test_pretrained_without_artifact_fails(self, taxonomy4, tmp_path, monkeypatch):
        monkeypatch.setenv("PIPELINE_CACHE_DIR", str(tmp_path))
        config = ModelConfig(pretrained_init=True, pretrained_checksum="ab" * 32)
        with pytest.raises(WeightArtifactError, match="resnet50_imagenet.pt"):
            build_model(config, taxonomy4, seed=1)

    def test_pretrained_artifact_checksum_mismatch(self, taxonomy4, tmp_path):
        bogus = tmp_path / "weights.pt"
        bogus.write_bytes(b"junk")
        config = ModelConfig(
            pretrained_init=True,
            pretrained_weights_path=str(bogus),
            pretrained_checksum="0" * 64,
        )
        with pytest.raises(WeightArtifactError, match="checksum mismatch"):
            build_model(config, taxonomy4, seed=1)

    def test_pretrained_artifact_roundtrip(self, taxonomy4, tmp_path):
        import hashlib

        donor = build_model(ModelConfig(pretrained_init=False), taxonomy4, seed=9)
        artifact = tmp_path / "resnet50_imagenet.pt"
        torch.save(donor.net.backbone.state_dict(), artifact)
        digest = hashlib.sha256(artifact.read_bytes()).hexdigest()
        config = ModelConfig(
            pretrained_init=True,
            pretrained_weights_path=str(artifact),
            pretrained_checksum=digest,
        )
        state = build_model(config, taxonomy4, seed=10)
        assert torch.equal(
            state.net.backbone.layer4[0].conv1.weight,
            donor.net.backbone.layer4[0].conv1.weight,
        )
        # classic transfer learning: frozen backbone by default
        assert not any(p.requires_grad for p in state.net.backbone.parameters())
        assert all(p.requires_grad for p in state.net.dense1.parameters())


class TestForward:
    def test_rows_are_probability_vectors(self, small_state, rng):
        probs, _ = forward(small_state, rng.random((4, 32, 32, 1)))
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_inference_deterministic(self, small_state, rng):
        batch = rng.random((2, 32, 32, 1))
        a, _ = forward(small_state, batch)
        b, _ = forward(small_state, batch)
        assert np.array_equal(a, b)

    def test_gap_of_constant_feature_map(self, small_state):
        fmap = torch.full((1, 64, 4, 4), 3.25)
        assert torch.allclose(fmap.mean(dim=(2, 3)), torch.full((1, 64), 3.25))

    def test_zero_output_layer_gives_uniform(self, taxonomy4, rng):
        state = build_model(small_config(), taxonomy4, seed=3)
        with torch.no_grad():
            state.net.output.weight.zero_()
            state.net.output.bias.zero_()
        probs, _ = forward(state, rng.random((3, 32, 32, 1)))
        assert np.allclose(probs, 0.25, atol=1e-7)

    def test_shape_mismatch(self, small_state, rng):
        with pytest.raises(ShapeError):
            forward(small_state, rng.random((2, 16, 16, 1)))

    def test_nonfinite_input(self, small_state):
        batch = np.full((1, 32, 32, 1), np.nan)
        with pytest.raises(NumericError):
            forward(small_state, batch)

    def test_dropout_expectation(self, taxonomy4):
        # Inverted dropout is unbiased: averaging many stochastic passes of
        # the dropout layer recovers the deterministic pass within 2%.
        p = 0.5
        x = torch.linspace(0.5, 4.0, 64)
        total = torch.zeros_like(x)
        n = 10_000
        gen = torch.Generator().manual_seed(123)
        for _ in range(n):
            keep = (torch.rand(x.shape, generator=gen) >= p).to(x.dtype)
            total += x * keep / (1.0 - p)
        rel = ((total / n - x).norm() / x.norm()).item()
        assert rel < 0.02

    def test_dropout_expectation_through_network(self, rng):
        # End-to-end check of the real dropout path: with identity dense2
        # and output layers, logits equal the dropout layer's output.
        from nscfate.data import LabelTaxonomy

        tax8 = LabelTaxonomy("multiclass", tuple(f"c{i}" for i in range(8)))
        state = build_model(
            small_config(dense1_units=8, dense2_units=8, dropout_rate=0.5), tax8, seed=4
        )
        with torch.no_grad():
            state.net.dense2.weight.copy_(torch.eye(8))
            state.net.dense2.bias.zero_()
            state.net.output.weight.copy_(torch.eye(8))
            state.net.output.bias.zero_()
        batch = rng.random((1, 32, 32, 1))
        _, base = forward(state, batch, training_mode=False)
        total = np.zeros_like(base)
        n = 4000
        for i in range(n):
            _, logits = forward(state, batch, training_mode=True, rng_stream=i)
            total += logits
        mean = total / n
        active = base[base > 1e-3]
        assert np.abs(mean[base > 1e-3] - active).max() / active.max() < 0.05


class TestPredict:
    def test_argmax(self, small_state, rng):
        preds = predict(small_state, rng.random((3, 32, 32, 1)))
        for p in preds:
            assert p.predicted_index == int(np.argmax(p.probabilities))
            assert p.scores_raw.shape == (4,)

    def test_tie_break_lowest_index(self):
        probs = np.array([0.5, 0.5])
        assert int(np.argmax(probs)) == 0

    def test_logit_shift_invariance(self, rng):
        # softmax(z + c) == softmax(z); argmax unchanged exactly.
        logits = rng.normal(size=(20, 4))
        shifted = logits + 7.3
        sm = lambda z: np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert np.allclose(sm(logits), sm(shifted), atol=1e-6)
        assert np.array_equal(np.argmax(logits, axis=1), np.argmax(shifted, axis=1))


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, small_state, tmp_path, rng):
        path = tmp_path / "model.nsck"
        save_checkpoint(small_state, path)
        loaded = load_checkpoint(path)
        batch = rng.random((2, 32, 32, 1))
        a, _ = forward(small_state, batch)
        b, _ = forward(loaded, batch)
        assert np.array_equal(a, b)
        assert loaded.taxonomy.class_names == small_state.taxonomy.class_names
        assert loaded.weights_checksum() == small_state.weights_checksum()

    def test_truncated_file_rejected(self, small_state, tmp_path):
        path = tmp_path / "model.nsck"
        save_checkpoint(small_state, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_flipped_byte_rejected(self, small_state, tmp_path):
        path = tmp_path / "model.nsck"
        save_checkpoint(small_state, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_taxonomy_mismatch(self, small_state, tmp_path, taxonomy2):
        path = tmp_path / "model.nsck"
        save_checkpoint(small_state, path)
        with pytest.raises(CompatibilityError):
            load_checkpoint(path, expected_taxonomy=taxonomy2)

    def test_resnet_checkpoint_roundtrip(self, taxonomy4, tmp_path, rng):
        state = build_model(ModelConfig(pretrained_init=False), taxonomy4, seed=8)
        path = tmp_path / "resnet.nsck"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        batch = rng.random((1, 224, 224, 3)).astype(np.float32)
        a, _ = forward(state, batch)
        b, _ = forward(loaded, batch)
        assert np.array_equal(a, b)
