import numpy as np
import pytest
import torch

from seqssl.errors import ValidationError
from seqssl.model_core import (Checkpoint, ModelSpec, build_model, checkpoint_from_model, count_parameters,
                               load_checkpoint, load_model, save_checkpoint)


@pytest.fixture(scope="module")
def resnet18():
    return build_model(ModelSpec("resnet18"), 0).eval()


@pytest.fixture(scope="module")
def tiny():
    return build_model(ModelSpec("resnet_tiny"), 0).eval()


def test_spec_defaults():
    spec = ModelSpec("resnet18")
    assert (spec.embed_dim, spec.proj_dim, spec.pred_hidden_dim, spec.n_classes) == (512, 128, 32, 9)
    assert ModelSpec("resnet_tiny", proj_dim=30).pred_hidden_dim == 8
    with pytest.raises(ValidationError):
        build_model(ModelSpec("vgg16"))


@pytest.mark.parametrize("size", [80, 84, 256])
@pytest.mark.parametrize("batch", [1, 3])
def test_resnet18_shapes(resnet18, size, batch):
    with torch.no_grad():
        e = resnet18.forward_embed(torch.randn(batch, 1, size, size))
        assert e.shape == (batch, 512)
        assert resnet18.forward_project(e).shape == (batch, 128)
        assert resnet18.forward_predict(resnet18.forward_project(e)).shape == (batch, 128)
        assert resnet18.forward_classify(e).shape == (batch, 9)
        assert torch.isfinite(e).all()


@pytest.mark.parametrize("size", [32, 80, 84, 256])
def test_tiny_shapes(tiny, size):
    with torch.no_grad():
        assert tiny.forward_embed(torch.randn(2, 1, size, size)).shape == (2, 128)


def test_shape_errors(tiny):
    with pytest.raises(ValidationError):
        tiny.forward_embed(torch.randn(2, 1, 16, 16))
    with pytest.raises(ValidationError):
        tiny.forward_embed(torch.randn(2, 3, 84, 84))
    with pytest.raises(ValidationError):
        tiny.forward_project(torch.randn(2, 512))
    with pytest.raises(ValidationError):
        tiny.forward_classify(torch.randn(2, 64))


def test_predictor_zero_input_is_finite():
    m = build_model(ModelSpec("resnet_tiny"), 0)
    for mode in (m.train, m.eval):
        mode()
        with torch.no_grad():
            assert torch.isfinite(m.forward_predict(torch.zeros(4, 128))).all()


def test_parameter_counts(resnet18, tiny):
    assert abs(count_parameters(resnet18.backbone) - 11.2e6) / 11.2e6 <= 0.02
    assert count_parameters(tiny) <= 1_000_000


def test_deterministic_init():
    a = build_model(ModelSpec("resnet_tiny"), 5).state_dict()
    b = build_model(ModelSpec("resnet_tiny"), 5).state_dict()
    c = build_model(ModelSpec("resnet_tiny"), 6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_batch_independence_in_eval(tiny):
    x = torch.randn(5, 1, 40, 40)
    with torch.no_grad():
        full = tiny.forward_embed(x)
        single = torch.cat([tiny.forward_embed(x[i:i + 1]) for i in range(5)])
    torch.testing.assert_close(full, single, rtol=1e-5, atol=1e-6)


def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny):
    ck = checkpoint_from_model(tiny, "finetuned", 3, 7, note="x")
    path = save_checkpoint(ck, tmp_path / "ck")
    assert path.suffix == ".npz" and path.with_suffix(".json").exists()
    back = load_checkpoint(path)
    assert back.metadata == ck.metadata
    assert set(back.arrays) == set(ck.arrays)
    for k in ck.arrays:
        assert back.arrays[k].tobytes() == ck.arrays[k].tobytes()
    x = torch.randn(3, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(load_model(back).eval()(x), tiny(x))


def test_checkpoint_payload_is_little_endian_float32(tmp_path, tiny):
    path = save_checkpoint(checkpoint_from_model(tiny, "pretrained", 1, 0), tmp_path / "p")
    with np.load(path) as npz:
        assert all(npz[k].dtype == np.dtype("<f4") for k in npz.files)
        assert not any(k.startswith("classifier.") for k in npz.files)


def test_checkpoint_validation():
    good = {"a": np.zeros(2, dtype=np.float32)}
    meta = {"training_stage": "pretrained", "model_spec": ModelSpec("resnet_tiny").to_dict()}
    Checkpoint(good, meta).validate()
    with pytest.raises(ValidationError):
        Checkpoint({"a": np.array([np.nan], dtype=np.float32)}, meta).validate()
    with pytest.raises(ValidationError):
        Checkpoint({"classifier.weight": np.zeros(2, dtype=np.float32)}, meta).validate()


def test_load_model_spec_mismatch(tiny):
    ck = checkpoint_from_model(tiny, "pretrained", 1, 0)
    with pytest.raises(ValidationError):
        load_model(ck, ModelSpec("resnet_tiny", proj_dim=64))
