import dataclasses
import math

import numpy as np
import pytest

from avfd.encoders import Projections, RawFeatures, ToyTextEncoder
from avfd.errors import ConfigError, NonFinite, ParseError, ValidationError
from avfd.fapl import PromptHierarchy
from avfd.mmdwl import WeightGenerator
from avfd.training import (
    Adam, Checkpoint, DetectorParams, Encoders, TrainConfig, extract_all, format_config, read_config_file,
    total_loss, total_loss_and_grads, train,
)


def micro_setup(coeffs=(1.0, 1.0)):
    d = 4
    text = ToyTextEncoder(seed=0, d=d, d_tok=3)
    prompts = PromptHierarchy.create(["same"], ["same"], 3, 2, seed=0)
    prompts.neg_tokens = prompts.pos_tokens.copy()
    params = DetectorParams(prompts, np.eye(d), Projections.identity(d), WeightGenerator.init(d, 4))
    cfg = TrainConfig(tau_av=1.0, d=d, loss_coeff_av=coeffs[0], loss_coeff_ft=coeffs[1])
    raw = RawFeatures(face=np.eye(d)[0], visual=np.eye(d)[:2], audio=np.eye(d)[:2])
    return [raw], params, cfg, text


def test_micro_batch_sum():
    batch, params, cfg, text = micro_setup()
    total, l_av, l_ft = total_loss(batch, params, cfg, text)
    assert abs(l_av - math.log1p(math.exp(-1))) < 1e-12
    assert abs(l_ft - math.log(2)) < 1e-12
    assert abs(total - (l_av + l_ft)) < 1e-12
    assert abs(total - 1.0064) < 1e-4


@pytest.mark.parametrize("coeffs,pick", [((1.0, 0.0), 1), ((0.0, 1.0), 2)])
def test_coefficients_isolate(coeffs, pick):
    batch, params, cfg, text = micro_setup(coeffs)
    losses = total_loss(batch, params, cfg, text)
    assert losses[0] == losses[pick]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_coeff_av=float("inf"))
    with pytest.raises(ConfigError):
        TrainConfig(alpha="1,2")
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"epochs": "many"})


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(epochs=3, alpha=(0.1, 0.1, -0.1), prompt_text=False, learning_rate=1e-3)
    path = tmp_path / "run.cfg"
    path.write_text("# comment\n" + format_config(cfg.to_mapping()))
    assert TrainConfig.from_mapping(read_config_file(path)) == cfg
    path.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.loss_coeff_av, cfg.loss_coeff_ft) == (9e-4, 512, 1.0, 1.0)
    assert cfg.alpha == (-0.1, 0.1, 0.1) and cfg.tau == 0.07 and cfg.tau_av == 0.1 and cfg.window == 15


def test_unknown_region_is_config_error():
    with pytest.raises(ConfigError):
        DetectorParams.init(TrainConfig(prompt_regions="face,nose"), Encoders.toy(0, 16))


def test_adam_matches_hand_step():
    p = {"x": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1)
    opt.step({"x": np.array([0.5, -0.25])})
    # first bias-corrected step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p["x"], [0.9, -1.9], atol=1e-6)


def test_zero_epochs_returns_init(small_synth, toy_setup):
    cfg, enc, _ = toy_setup
    train_m, _ = small_synth
    zero = TrainConfig(epochs=0)
    ckpt = train(train_m, zero, enc)
    init = DetectorParams.init(zero, enc).arrays()
    assert ckpt.loss_history == []
    for k, v in init.items():
        assert np.array_equal(ckpt.arrays[k], v)


def test_loss_decreases_and_generator_frozen(small_synth, toy_setup):
    _, enc, _ = toy_setup
    train_m, _ = small_synth
    cfg = TrainConfig(epochs=10, batch_size=4)
    ckpt = train(train_m, cfg, enc)
    hist = np.array(ckpt.loss_history)[:, 0]
    k = max(1, len(hist) // 5)
    assert hist[-k:].mean() < hist[:k].mean()
    init = DetectorParams.init(cfg, enc)
    for key in ("gen_w1", "gen_b1", "gen_w2", "gen_b2"):
        assert np.array_equal(ckpt.arrays[key], init.arrays()[key])
    assert not np.array_equal(ckpt.arrays["W"], init.W)


def test_fake_in_train_rejected_before_work(small_synth, toy_setup):
    _, enc, _ = toy_setup
    _, test_m = small_synth
    bad = dataclasses.replace(test_m, records=tuple(dataclasses.replace(r, split="train") for r in test_m.records))
    fake_id = next(r.id for r in bad.records if r.label == "fake")

    class Boom:
        def __getattr__(self, name):
            raise AssertionError("encoder touched")

    with pytest.raises(ValidationError, match=fake_id):
        train(bad, TrainConfig(), Encoders(Boom(), Boom(), Boom()))


def test_deterministic_and_checkpoint_round_trip(small_synth, toy_setup, tmp_path):
    _, enc, _ = toy_setup
    train_m, _ = small_synth
    cfg = TrainConfig(epochs=3, batch_size=5, seed=4)
    feats = extract_all(train_m.split("train"), enc, workers=3)
    assert all(np.array_equal(a.audio, b.audio) for a, b in zip(feats, extract_all(train_m.split("train"), enc)))
    a = train(train_m, cfg, enc, feats)
    b = train(train_m, cfg, enc, feats)
    assert a.to_bytes() == b.to_bytes()
    path = a.save(tmp_path / "ck.avfd")
    assert path.with_suffix(".json").exists()
    loaded = Checkpoint.load(path)
    assert loaded.to_bytes() == a.to_bytes()
    assert loaded.train_config() == cfg
    before = total_loss(feats, a.params(), cfg, enc.text)
    after = total_loss(feats, loaded.params(), cfg, enc.text)
    assert np.allclose(before, after, atol=1e-6, rtol=0)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ParseError):
        Checkpoint.load(tmp_path / "x")


def test_nonfinite_aborts(small_synth, toy_setup):
    _, enc, _ = toy_setup
    train_m, _ = small_synth
    feats = extract_all(train_m.split("train"), enc)
    feats[0].visual = feats[0].visual * np.nan
    with pytest.raises(NonFinite):
        train(train_m, TrainConfig(epochs=1), enc, feats)


def test_gradients_match_finite_differences():
    enc = Encoders.toy(1, d=8)
    enc.text = ToyTextEncoder(1, d=8, d_tok=5)
    cfg = TrainConfig(d=8, num_tokens=2, hidden=4, tau=0.3, tau_av=0.5, window=2, prompt_regions="face,eyes")
    params = DetectorParams.init(cfg, enc)
    params.prompts.pos_tokens *= 30
    params.prompts.neg_tokens *= 30
    rng = np.random.default_rng(0)
    batch = [RawFeatures(f / np.linalg.norm(f), rng.standard_normal((4, 16)), rng.standard_normal((4, 16)))
             for f in rng.standard_normal((3, 8))]
    _, grads = total_loss_and_grads(batch, params, cfg, enc.text)
    arrays = params.arrays()
    for key in ("pos_tokens", "neg_tokens", "W", "proj_visual", "proj_audio"):
        x = arrays[key]
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + 1e-6
            hi = total_loss(batch, params, cfg, enc.text)[0]
            x[idx] = old - 1e-6
            lo = total_loss(batch, params, cfg, enc.text)[0]
            x[idx] = old
            num[idx] = (hi - lo) / 2e-6
        assert np.linalg.norm(grads[key] - num) / np.linalg.norm(num) < 1e-4, key
