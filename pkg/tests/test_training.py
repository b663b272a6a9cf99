import struct

import numpy as np
import pytest

from socprob.convlstm import forward_sequence
from socprob.errors import (CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError,
                            ConfigError, DimensionError)
from socprob.prob_map import GridSpec, ProbMap, encode_positions, fit_grid
from socprob.synthetic import make_scene
from socprob.tensor_core import finite_diff_grad, relative_error
from socprob.training import (TrainConfig, batch_loss_and_grad, l2_loss, load_checkpoint, make_training_pair,
                              sample_groups, save_checkpoint, train, training_arrays, write_loss_log)
from socprob.trajectory_data import build_samples


@pytest.fixture(scope="module")
def tiny_setup():
    cfg = TrainConfig(width=12, height=12, channels=(3, 2), epochs=2, batch_size=2, seed=5, lr=1e-2)
    scene = make_scene("t", n_peds=6, n_frames=40, seed=7)
    groups = sample_groups([scene], cfg, max_samples=6)
    return cfg, groups


def test_l2_loss():
    spec = GridSpec(4, 4, (0, 0), 1.0)
    a = ProbMap(np.zeros((1, 4, 4)), spec)
    b = ProbMap(np.full((1, 4, 4), 0.5), spec)
    assert l2_loss(a, b) == 0.25
    assert l2_loss(a, a) == 0.0
    with pytest.raises(DimensionError):
        l2_loss(a, ProbMap(np.zeros((1, 4, 4)), GridSpec(4, 4, (0, 0), 2.0)))


def test_training_pair_layout():
    scene = make_scene("t", n_peds=5, n_frames=40, seed=1)
    cfg = TrainConfig(width=20, height=20)
    spec = fit_grid(scene, 20, 20)
    s = build_samples(scene)[0]
    inputs, targets = make_training_pair(s, cfg, spec)
    assert len(inputs) == 19 and len(targets) == 12
    # targets contain the target pedestrian only, peaked at its cell
    for j, t in enumerate(targets):
        assert np.unravel_index(np.argmax(t.values), spec.shape) == spec.world_to_grid(s.future[j])
    # input t is the ground-truth map of window step t: target at 0.1, others at 0.3
    xs, _ = training_arrays(s, cfg, spec, np.float64)
    for t in (0, 7, 18):
        pos = s.positions_at_step(t)
        sig = {pid: 0.3 for pid in pos}
        sig[s.target_id] = 0.1
        np.testing.assert_array_equal(xs[t, 0], encode_positions(pos, sig, spec))


def test_no_integration_drops_neighbours():
    scene = make_scene("t", n_peds=8, n_frames=40, seed=1)
    spec = fit_grid(scene, 24, 24)
    s = next(s for s in build_samples(scene) if s.neighbor_ids())
    on, _ = training_arrays(s, TrainConfig(width=24, height=24), spec)
    off, _ = training_arrays(s, TrainConfig(width=24, height=24, integrate_neighbors=False), spec)
    assert np.any(on != off)
    assert np.all(on >= off)


def test_batch_gradient_matches_finite_differences(rng):
    from socprob.gradcheck import random_stack
    params = random_stack((2,), 5, 5, seed=0, scale=0.3)
    xs = rng.random((4, 2, 1, 5, 5))
    ts = rng.random((2, 2, 1, 5, 5))
    loss, grads = batch_loss_and_grad(params, xs, ts, obs_len=3)
    ys, _, _ = forward_sequence(xs, params)
    assert loss == pytest.approx(np.sum((ys[2:] - ts) ** 2) / (25 * 2))
    name = "layer0.w_hc"
    numeric = finite_diff_grad(
        lambda a: batch_loss_and_grad(params.with_tensors({name: a}), xs, ts, 3)[0], params.named()[name])
    assert relative_error(grads[name], numeric) < 1e-6


def test_train_is_deterministic(tiny_setup):
    cfg, groups = tiny_setup
    a = train(groups, cfg)
    b = train(groups, cfg)
    assert a.loss_log == b.loss_log
    for k, v in a.params.named().items():
        np.testing.assert_array_equal(v, b.params.named()[k])
    assert [e for e, _ in a.loss_log] == [1, 2]
    assert a.adam["head.b"].step_count == 2 * 3


def test_resume_equals_uninterrupted(tiny_setup, tmp_path):
    cfg, groups = tiny_setup
    full = train(groups, cfg)
    half_cfg = TrainConfig.from_mapping({"epochs": 1}, cfg)
    half = train(groups, half_cfg)
    save_checkpoint(tmp_path / "h.sprb", half)
    resumed = train(groups, cfg, resume=load_checkpoint(tmp_path / "h.sprb"))
    assert resumed.loss_log == pytest.approx(full.loss_log, rel=1e-6)
    for k, v in full.params.named().items():
        np.testing.assert_allclose(resumed.params.named()[k], v, atol=1e-6)


def test_train_rejects_wrong_grid(tiny_setup):
    cfg, groups = tiny_setup
    with pytest.raises(DimensionError):
        train(groups, TrainConfig.from_mapping({"width": 13}, cfg))
    with pytest.raises(ConfigError):
        train([], cfg)


def test_checkpoint_roundtrip_and_rejections(tiny_setup, tmp_path):
    cfg, groups = tiny_setup
    ck = train(groups, TrainConfig.from_mapping({"epochs": 1}, cfg))
    path = tmp_path / "c.sprb"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.config == ck.config and back.epoch == 1 and back.loss_log == ck.loss_log
    for k, v in ck.params.named().items():
        assert back.params.named()[k].tobytes() == v.astype("<f4").tobytes()
        assert back.adam[k].second_moment.tobytes() == ck.adam[k].second_moment.astype("<f4").tobytes()
    data = path.read_bytes()
    bad = tmp_path / "bad.sprb"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)
    bad.write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    bad.write_bytes(data[:-3])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)
    with pytest.raises(DimensionError):
        load_checkpoint(path, expect=TrainConfig.from_mapping({"width": 40, "height": 40}, cfg))


def test_config_text_roundtrip():
    cfg = TrainConfig(width=64, channels=(16, 8), integrate_neighbors=False, lr=3e-4)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_text("nonsense=1")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("width=abc")
    with pytest.raises(ConfigError):
        TrainConfig(kernel=4)


def test_loss_log_file(tmp_path):
    write_loss_log(tmp_path / "l.csv", [(1, 0.5), (2, 0.25)])
    assert (tmp_path / "l.csv").read_text() == "epoch,mean_loss\n1,0.5\n2,0.25\n"


def test_subsampling_is_seeded():
    scene = make_scene("t", n_peds=8, n_frames=50, seed=2)
    cfg = TrainConfig(width=10, height=10)
    a = sample_groups([scene], cfg, max_samples=5)
    b = sample_groups([scene], cfg, max_samples=5)
    assert sum(len(s) for _, s in a) == 5
    assert [(s.target_id, s.anchor_frame) for s in a[0][1]] == [(s.target_id, s.anchor_frame) for s in b[0][1]]
