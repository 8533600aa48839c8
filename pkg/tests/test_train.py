import numpy as np
import pytest

from bayernet import geometry as G
from bayernet import tensor as T
from bayernet import train as train_mod
from bayernet.bayer import BayerImage
from bayernet.network import DESCRIPTOR_PREFIX, DETECTOR_PREFIX, ForwardResult, load_checkpoint, save_checkpoint
from bayernet.synthetic import SyntheticSample, generate_synthetic
from bayernet.tensor import ConfigurationError, Tensor
from bayernet.train import (
    LOG_HEADER,
    Adam,
    TrainConfig,
    TrainingDiverged,
    descriptor_trainable,
    detector_targets,
    homographic_adaptation,
    make_network,
    parse_key_values,
    sample_triplets,
    train_descriptor,
    train_detector,
)

from oracles import naive_adaptation

SMALL = TrainConfig(width_multiplier=0.25, image_size=32, monitor_samples=2, triplet_k=8)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(0, 3, 32)


def params_bytes(net, keep=lambda n: True):
    return {n: p.data.tobytes() for n, p in net.named_parameters() if keep(n)}


# ------------------------------------------------------------------ config


def test_config_text_round_trip():
    cfg = TrainConfig(lr=0.005, descriptor_scope="shared", epochs=2)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_unknown_and_malformed_values():
    with pytest.raises(ConfigurationError):
        TrainConfig().with_overrides({"learning_rate": "1"})
    with pytest.raises(ConfigurationError):
        TrainConfig().with_overrides({"epochs": "many"})
    with pytest.raises(ConfigurationError):
        TrainConfig(descriptor_scope="all")
    with pytest.raises(ConfigurationError):
        TrainConfig(peak_block=4)


def test_key_value_parsing():
    assert parse_key_values("# header\nlr = 0.1  # inline\n\nepochs=3\n") == {"lr": "0.1", "epochs": "3"}
    with pytest.raises(ConfigurationError):
        parse_key_values("just words")


def test_default_detection_constants():
    cfg = TrainConfig()
    assert (cfg.threshold, cfg.max_keypoints, cfg.nms_radius) == (0.1, 2048, 4)
    assert (cfg.eps_repeatability, cfg.eps_homography, cfg.margin, cfg.negative_radius) == (3.0, 5.0, 1.0, 8.0)


# --------------------------------------------------------------- optimiser


def test_adam_first_step_moves_by_lr_against_the_gradient():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)
    assert opt.state.m["p"].shape == p.shape == opt.state.v["p"].shape
    assert opt.state.step == 1


def test_adam_zero_lr_leaves_parameters_bit_equal():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    before = p.data.tobytes()
    opt = Adam({"p": p}, lr=0.0)
    for _ in range(3):
        p.grad = rng.standard_normal((3, 3))
        opt.step()
    assert p.data.tobytes() == before


# ----------------------------------------------------------------- adaptation


def smooth_score(img: BayerImage) -> np.ndarray:
    d = img.data.astype(np.float64)
    return 0.5 + 0.4 * np.sin(3 * d) * np.cos(d)


def test_adaptation_with_one_view_is_the_raw_score(data):
    img = data[0].bayer
    label = homographic_adaptation(img, smooth_score, n=1)
    assert label.n_used == 1
    np.testing.assert_array_equal(label.values, np.clip(smooth_score(img), 0, 1))


def test_adaptation_with_identity_views_is_exact(data):
    img = data[1].bayer
    label = homographic_adaptation(img, smooth_score, n=4, homographies=[np.eye(3)] * 3)
    np.testing.assert_array_equal(label.values, smooth_score(img))


def test_adaptation_of_constant_score_is_constant(data):
    label = homographic_adaptation(data[0].bayer, lambda im: np.full(im.shape, 0.3), n=5, seed=2)
    np.testing.assert_allclose(label.values, 0.3, atol=1e-12)


def test_adaptation_matches_naive_loop():
    img = BayerImage(np.random.default_rng(3).uniform(0, 1, (16, 16)))
    shifts = [
        np.array([[1.0, 0, 1.5], [0, 1, -0.5], [0, 0, 1]]),
        np.array([[1.0, 0, -2.0], [0, 1, 1.25], [0, 0, 1]]),
        G.build_homography(G.HomographyParams(angle_deg=7.0, scale=1.05), (16, 16)),
    ]
    label = homographic_adaptation(img, smooth_score, n=4, homographies=shifts)
    expect = naive_adaptation(smooth_score, img, [np.eye(3)] + shifts)
    np.testing.assert_allclose(label.values, expect, atol=1e-6)


def test_pseudo_label_bounded_by_contributions(data):
    net = make_network(SMALL)
    label = homographic_adaptation(data[2].bayer, net, n=3, seed=0)
    score, _ = net.infer(data[2].bayer)
    assert label.values.min() >= 0 and label.values.max() <= 1
    assert label.values.max() <= max(score.max(), 1e-3) * 1.5


def test_adaptation_needs_at_least_one_view(data):
    with pytest.raises(ConfigurationError):
        homographic_adaptation(data[0].bayer, smooth_score, n=0)


def test_targets_from_corners_and_from_adaptation(data):
    target, centres = detector_targets(data[0], SMALL)
    assert target.shape == (32, 32) and np.array_equal(centres, data[0].corners)
    label, _ = detector_targets(data[0], SMALL.with_overrides({"adaptation_n": "2"}), make_network(SMALL), 0)
    assert label.shape == (32, 32)


# ------------------------------------------------------------------ triplets


def desc_output(desc):
    d = np.asarray(desc, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=0)
    return ForwardResult(Tensor(np.zeros((1,) + d.shape[1:])), Tensor(d, dtype=np.float64), {})


def test_identity_positives_equal_anchors():
    d = np.random.default_rng(0).standard_normal((8, 32, 32))
    out = desc_output(d)
    b = sample_triplets(out, out, np.eye(3), 2, 0, keypoints=np.array([[3, 4], [20, 25]]))
    np.testing.assert_allclose(b.positive.data, b.anchor.data, atol=1e-12)
    # two rows: each row's negative is the other row's positive
    assert b.negative_index.tolist() == [1, 0]
    np.testing.assert_array_equal(b.negative.data[0], b.positive.data[1])


def test_triplet_rows_are_unit_norm_and_distinct():
    rng = np.random.default_rng(1)
    out1, out2 = desc_output(rng.standard_normal((8, 32, 32))), desc_output(rng.standard_normal((8, 32, 32)))
    h = G.sample_homography(0, (32, 32), G.TrainingRange())[0]
    kps = rng.integers(8, 24, (20, 2))
    b = sample_triplets(out1, out2, h, 20, 0, keypoints=kps)
    for t in (b.anchor, b.positive, b.negative):
        np.testing.assert_allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-4)
    assert len(b) > 0
    assert np.all(b.negative_index != b.row_index)
    assert np.all(np.linalg.norm(b.positive_xy - b.negative_xy, axis=1) > 8.0)


def test_triplet_sampling_is_reproducible():
    rng = np.random.default_rng(2)
    out = desc_output(rng.standard_normal((4, 32, 32)))
    kps = rng.integers(0, 32, (15, 2))
    a = sample_triplets(out, out, np.eye(3), 15, 5, keypoints=kps)
    b = sample_triplets(out, out, np.eye(3), 15, 5, keypoints=kps)
    assert a.negative_index.tolist() == b.negative_index.tolist()


def test_triplet_shrinks_k_with_a_warning():
    out = desc_output(np.random.default_rng(3).standard_normal((4, 32, 32)))
    b = sample_triplets(out, out, np.eye(3), 10, 0, keypoints=np.array([[2, 2], [20, 20], [2, 28]]))
    assert len(b) == 3 and b.warnings


def test_rows_without_a_far_negative_are_dropped():
    out = desc_output(np.random.default_rng(4).standard_normal((4, 32, 32)))
    b = sample_triplets(out, out, np.eye(3), 3, 0, keypoints=np.array([[2, 2], [4, 4], [25, 25]]))
    assert b.anchor_xy.tolist() == [[2, 2], [4, 4], [25, 25]]
    assert b.negative_index[:2].tolist() == [2, 2] and b.negative_index[2] in (0, 1)
    single = sample_triplets(out, out, np.eye(3), 1, 0, keypoints=np.array([[5, 5]]))
    assert single is None


def test_training_triplets_from_detections(data):
    net = make_network(SMALL)
    net.params["det.score.bias"].data[:] = 3.0  # make the untrained detector fire
    out = net(data[0].bayer)
    b = sample_triplets(out, out, np.eye(3), 5, 0)
    assert b is not None and len(b) <= 5


# ------------------------------------------------------------ detector loop


def test_detector_zero_lr_and_zero_epochs_keep_initialisation(data):
    for cfg, epochs in ((SMALL.with_overrides({"lr": "0"}), 1), (SMALL, 0)):
        net = make_network(cfg)
        init = save_checkpoint(net)
        res = train_detector(net, data, cfg, epochs=epochs)
        assert res.checkpoint == init


def test_detector_training_freezes_descriptor_head_and_logs(data, tmp_path):
    net = make_network(SMALL)
    head = params_bytes(net, lambda n: n.startswith(DESCRIPTOR_PREFIX))
    body = params_bytes(net, lambda n: not n.startswith(DESCRIPTOR_PREFIX))
    res = train_detector(net, data, SMALL, epochs=2, log_path=tmp_path / "log.tsv")
    assert params_bytes(net, lambda n: n.startswith(DESCRIPTOR_PREFIX)) == head
    after = params_bytes(net, lambda n: not n.startswith(DESCRIPTOR_PREFIX))
    assert any(after[n] != body[n] for n in body)
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 3
    assert lines[1].split("\t")[0] == "1" and len(lines[1].split("\t")) == 5
    assert res.log_text().splitlines()[0] == LOG_HEADER


def test_detector_training_is_deterministic(data):
    runs = [train_detector(make_network(SMALL), data, SMALL, epochs=1).checkpoint for _ in range(2)]
    assert runs[0] == runs[1]


def test_batched_and_adaptation_epochs_run(data):
    cfg = SMALL.with_overrides({"batch_size": "2", "adaptation_epochs": "1", "adaptation_n": "2"})
    res = train_detector(make_network(cfg), data, cfg, epochs=1)
    assert len(res.history) == 2


def test_non_finite_loss_aborts_with_last_good_checkpoint(data, monkeypatch):
    real = train_mod.bce_loss
    calls = []

    def poisoned(pred, target):
        calls.append(1)
        loss = real(pred, target)
        # the first calls measure the monitor set before any step
        return T.scale(loss, np.nan) if len(calls) == SMALL.monitor_samples + 3 else loss

    monkeypatch.setattr(train_mod, "bce_loss", poisoned)
    net = make_network(SMALL)
    init = save_checkpoint(net)
    with pytest.raises(TrainingDiverged) as info:
        train_detector(net, data, SMALL, epochs=1)
    # two good steps were taken before the poisoned one
    assert info.value.checkpoint != init
    assert save_checkpoint(net) == info.value.checkpoint


# ---------------------------------------------------------- descriptor loop


@pytest.fixture(scope="module")
def firing_checkpoint():
    net = make_network(SMALL)
    net.params["det.score.bias"].data[:] = 2.0
    return save_checkpoint(net)


def test_siamese_branches_share_one_parameter_store(data, firing_checkpoint):
    net = load_checkpoint(firing_checkpoint)
    seen = []

    def check(a, b):
        assert a is b and a.params is b.params
        seen.append(1)

    train_descriptor(net, data[:2], SMALL, epochs=1, on_step=check)
    assert len(seen) == 2
    out_a, out_b = net.infer(data[0].bayer), net.infer(data[0].bayer)
    assert out_a[1].tobytes() == out_b[1].tobytes()


def test_descriptor_zero_lr_keeps_parameters(data, firing_checkpoint):
    net = load_checkpoint(firing_checkpoint)
    cfg = SMALL.with_overrides({"lr": "0"})
    assert train_descriptor(net, data[:2], cfg, epochs=1).checkpoint == firing_checkpoint


@pytest.mark.parametrize("scope", ["shared", "head"])
def test_descriptor_training_scope(data, firing_checkpoint, scope):
    net = load_checkpoint(firing_checkpoint)
    cfg = SMALL.with_overrides({"descriptor_scope": scope})
    before = params_bytes(net)
    res = train_descriptor(net, data[:2], cfg, epochs=1)
    after = params_bytes(net)
    changed = {n for n in before if before[n] != after[n]}
    assert changed and res.history[0].triplet > 0
    assert not any(n.startswith(DETECTOR_PREFIX) for n in changed)
    if scope == "head":
        assert all(n.startswith(DESCRIPTOR_PREFIX) for n in changed)
    assert set(descriptor_trainable(net, scope)) >= changed


def test_descriptor_training_is_deterministic(data, firing_checkpoint):
    runs = [train_descriptor(load_checkpoint(firing_checkpoint), data[:2], SMALL, epochs=1).checkpoint for _ in range(2)]
    assert runs[0] == runs[1]
