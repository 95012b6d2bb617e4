import numpy as np
import pytest

from config.settings import get_preset
from network.cascade import cascade_forward, ema_model
from network.checkpoint import (
    Checkpoint, checkpoint_from_model, decode_checkpoint, encode_checkpoint, load_ensemble,
    model_from_checkpoint, read_checkpoint, write_checkpoint,
)
from network.optim import OptimizerState, adam_step, update_ema
from utils.errors import BadMagic, TruncatedFile


def test_first_adam_step_moves_by_learning_rate():
    params = {"w": np.array([0.5, -0.25]), "b": np.array([1.0])}
    opt = OptimizerState.create(params, lr=0.001)
    adam_step(opt, params, {"w": np.array([2.0, -3.0])})
    assert params["w"] == pytest.approx([0.499, -0.249], abs=1e-9)
    assert params["b"][0] == 1.0
    assert opt.step == 1


def test_ema_converges_towards_frozen_parameters():
    params = {"w": np.array([0.0])}
    opt = OptimizerState.create(params, ema_decay=0.999, ema_warmup=False)
    params["w"][...] = 1.0
    for _ in range(10):
        update_ema(opt, params)
    assert opt.ema["w"][0] == pytest.approx(1.0 - 0.999 ** 10, rel=1e-12)


def test_default_ema_follows_the_plain_decay_rule():
    train = get_preset("desk").train
    params = {"w": np.array([0.0])}
    opt = OptimizerState.create(params, ema_decay=train.ema_decay, ema_warmup=train.ema_warmup)
    params["w"][...] = 1.0
    update_ema(opt, params)
    assert opt.ema["w"][0] == pytest.approx(0.001, rel=1e-9)
    assert OptimizerState().effective_decay() == 0.999


def test_ema_warmup_schedule():
    opt = OptimizerState(ema_decay=0.999, ema_warmup=True)
    assert opt.effective_decay() == pytest.approx(0.1)
    opt.step = 90
    assert opt.effective_decay() == pytest.approx(91 / 100)
    opt.step = 100000
    assert opt.effective_decay() == 0.999


def _trained_state(model):
    params = model.parameters()
    opt = OptimizerState.create(params)
    rng = np.random.default_rng(3)
    grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
    adam_step(opt, params, grads)
    update_ema(opt, params)
    return opt


def test_checkpoint_roundtrip(tiny_cascade, tmp_path):
    opt = _trained_state(tiny_cascade)
    ckpt = checkpoint_from_model(tiny_cascade, opt)
    path = str(tmp_path / "member_0.crck")
    write_checkpoint(ckpt, path)
    back = read_checkpoint(path)

    assert back.arch == tiny_cascade.arch()
    assert back.step == 1
    assert set(back.params) == set(tiny_cascade.parameters())
    for name, value in tiny_cascade.parameters().items():
        assert np.array_equal(back.params[name], value.astype(np.float32))
        assert np.array_equal(back.ema[name], opt.ema[name].astype(np.float32))


def test_equal_models_encode_to_equal_bytes(tiny_cascade):
    a = encode_checkpoint(checkpoint_from_model(tiny_cascade))
    b = encode_checkpoint(checkpoint_from_model(tiny_cascade.with_parameters(tiny_cascade.parameters())))
    assert a == b


def test_corrupt_checkpoints(tiny_cascade):
    content = encode_checkpoint(checkpoint_from_model(tiny_cascade))
    with pytest.raises(BadMagic):
        decode_checkpoint(b"XXXXXX" + content[6:])
    with pytest.raises(TruncatedFile):
        decode_checkpoint(content[:-4])
    with pytest.raises(TruncatedFile):
        decode_checkpoint(content[:8])


def test_restored_model_reproduces_forward(tiny_cascade):
    x = np.random.default_rng(4).normal(size=(1, 1, 4, 4, 4))
    ckpt = decode_checkpoint(encode_checkpoint(checkpoint_from_model(tiny_cascade)))
    restored = model_from_checkpoint(ckpt, use_ema=False, dtype=np.float64)
    expected = tiny_cascade.with_parameters(
        {k: v.astype(np.float32) for k, v in tiny_cascade.parameters().items()}
    )
    a, b = cascade_forward(expected, x), cascade_forward(restored, x)
    assert np.array_equal(a.p3, b.p3)


def test_ema_is_the_default_inference_copy(tiny_cascade, tmp_path):
    opt = _trained_state(tiny_cascade)
    path = str(tmp_path / "m.crck")
    write_checkpoint(checkpoint_from_model(tiny_cascade, opt), path)
    (loaded,) = load_ensemble([path])
    shadow = ema_model(tiny_cascade, opt).parameters()
    for name, value in loaded.parameters().items():
        assert np.allclose(value, shadow[name], atol=1e-6)


def test_checkpoint_without_ema_falls_back_to_params(tiny_cascade):
    ckpt = Checkpoint(tiny_cascade.arch(), 0, checkpoint_from_model(tiny_cascade).params)
    model = model_from_checkpoint(ckpt)
    name = "stage2/head.weight"
    assert np.array_equal(model.parameters()[name], ckpt.params[name])
