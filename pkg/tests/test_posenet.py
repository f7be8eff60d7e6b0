import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from midpose.binning import assign_bin, azimuth_spec, elevation_spec
from midpose.errors import BadMagicError, ConfigurationError, TruncatedFileError
from midpose.posenet import (CandidateSet, FeatureFuser, Gallery, Prediction, Stage1Data, Stage1Net, Stage2Data,
                             Stage2Net, build_stage2_pairs, decode_checkpoint, encode_checkpoint, evaluate,
                             evaluate_predictions, fuse_features, load_checkpoint, save_checkpoint, select_pose,
                             stage1_forward, stage1_logits, stage2_forward, stage2_input, stage2_scores,
                             top_k_candidates, train_stage1, train_stage2, _stage1_eval)
from midpose.silhouette import Mask
from midpose.tensorkit import TrainConfig, softmax, upsample_bilinear

AZ, EL = azimuth_spec(), elevation_spec()


def feats(rng, n=None):
    shape = (16, 16, 8) if n is None else (n, 16, 16, 8)
    return rng.standard_normal(shape).astype(np.float32), rng.standard_normal(shape).astype(np.float32)


def select_oracle(probs, verified):
    """Direct evaluation of argmax_i [verified_i] * P_i with the top-1 fallback."""
    scores = [p * v for p, v in zip(probs, verified)]
    if max(scores) == 0:
        return 0
    return int(np.argmax(scores))


# fusion

def test_fuse_zeros_gives_zeros():
    z = np.zeros((16, 16, 8), np.float32)
    out = fuse_features(z, z)
    assert out.shape == (128, 128, 8)
    assert not out.any()


def test_fuse_matches_upsample_then_pointwise_conv():
    rng = np.random.default_rng(1)
    n, r = feats(rng)
    fuser = FeatureFuser(np.random.default_rng(7))
    out = fuser(n, r)
    up = upsample_bilinear(np.concatenate([n, r], -1)[None].astype(np.float64), 128, 128)[0]
    w = fuser.conv.params["weight"][0, 0].astype(np.float64)
    np.testing.assert_allclose(out, up @ w + fuser.conv.params["bias"], atol=1e-4)


def test_fuse_channel_order():
    rng = np.random.default_rng(2)
    n, r = feats(rng)
    a = FeatureFuser.concat(n, r)
    b = FeatureFuser.concat(r, n)
    np.testing.assert_array_equal(a[..., :8], n)
    np.testing.assert_array_equal(b, a[..., list(range(8, 16)) + list(range(8))])


def test_fuse_rejects_wrong_shapes():
    with pytest.raises(ConfigurationError):
        fuse_features(np.zeros((16, 16, 4)), np.zeros((16, 16, 8)))


def test_fuse_batched_equals_single():
    rng = np.random.default_rng(3)
    n, r = feats(rng, 3)
    fuser = FeatureFuser(np.random.default_rng(0))
    batched = fuser(n, r)
    np.testing.assert_allclose(batched[1], fuser(n[1], r[1]), atol=1e-6)


# stage 1

def test_stage1_head_sizes_and_determinism():
    rng = np.random.default_rng(4)
    net = Stage1Net(seed=1)
    n, r = feats(rng, 4)
    fused = net.fuse(n, r)
    az, el = stage1_forward(net, fused[0])
    assert az.shape == (9,) and el.shape == (5,)
    az2, el2 = stage1_forward(net, fused[0])
    assert az.tobytes() == az2.tobytes() and el.tobytes() == el2.tobytes()
    a, e = net.forward(n, r)
    assert a.shape == (4, 9) and e.shape == (4, 5)
    np.testing.assert_allclose(softmax(a.astype(np.float64)).sum(1), 1, atol=1e-6)
    np.testing.assert_allclose(softmax(e.astype(np.float64)).sum(1), 1, atol=1e-6)


def test_stage1_other_bin_counts():
    net = Stage1Net(13, 3, seed=0)
    a, e = net.forward(*feats(np.random.default_rng(0), 2))
    assert a.shape == (2, 13) and e.shape == (2, 3)


def test_stage1_initial_loss_is_uniform(synth_data):
    _, _, samples = synth_data
    data = Stage1Data.from_samples(samples[:64])
    hist = train_stage1(Stage1Net(seed=0), data, AZ, EL, TrainConfig(max_epochs=1, batch_size=32))
    assert hist.initial_loss == pytest.approx(math.log(9) + math.log(5), abs=0.02)
    assert len(hist.epochs) == 1


def test_stage1_identical_seeds_identical_history(synth_data):
    _, _, samples = synth_data
    data = Stage1Data.from_samples(samples[:40])
    cfg = TrainConfig(max_epochs=2, batch_size=16, seed=3)
    h1 = train_stage1(Stage1Net(seed=2), data, AZ, EL, cfg)
    h2 = train_stage1(Stage1Net(seed=2), data, AZ, EL, cfg)
    assert h1.to_dict() == h2.to_dict()


def test_stage1_loss_decreases_on_small_set(synth_data):
    _, _, samples = synth_data
    data = Stage1Data.from_samples(samples[:60])
    cfg = TrainConfig(learning_rate=0.02, lr_decay_factor=1.0, dropout_p=0.0, batch_size=60, max_epochs=6)
    hist = train_stage1(Stage1Net(seed=0), data, AZ, EL, cfg)
    losses = [hist.initial_loss] + [e.train_loss for e in hist.epochs]
    assert all(b <= a + 1e-9 for a, b in zip(losses[2:], losses[3:]))
    assert losses[-1] < losses[0]


def test_stage1_early_stopping_restores_best(synth_data):
    _, _, samples = synth_data
    train = Stage1Data.from_samples(samples[:40])
    val = Stage1Data.from_samples(samples[40:60])
    cfg = TrainConfig(learning_rate=0.5, max_epochs=8, early_stop_patience=1, batch_size=20)
    net = Stage1Net(seed=0)
    hist = train_stage1(net, train, AZ, EL, cfg, val_data=val)
    best = min(e.val_loss for e in hist.epochs)
    assert hist.epochs[hist.best_epoch].val_loss == best
    if hist.stopped_early:
        assert len(hist.epochs) < 8
    assert _stage1_eval(net, val, AZ, EL)[0] == pytest.approx(best, rel=1e-6)


def test_stage1_rejects_bad_data(synth_data):
    _, _, samples = synth_data
    with pytest.raises(ConfigurationError):
        Stage1Data.from_samples([])
    data = Stage1Data.from_samples(samples[:4])
    data.elevation[0] = -5.0
    with pytest.raises(ConfigurationError):
        train_stage1(Stage1Net(), data, AZ, EL, TrainConfig(max_epochs=1))


# candidates and selection

def test_top_k_examples():
    logits = np.zeros(9)
    logits[4] = 2.0
    assert top_k_candidates(logits).bins[0] == 4
    c = top_k_candidates(np.zeros(9))
    assert c.bins == (0, 1, 2)
    assert c.probs == pytest.approx((1 / 9,) * 3)
    with pytest.raises(ConfigurationError):
        top_k_candidates(np.zeros(2))


@given(arrays(np.float64, 9, elements=st.floats(-20, 20)))
def test_top_k_sort_oracle(logits):
    c = top_k_candidates(logits)
    p = softmax(logits)
    assert len(set(c.bins)) == 3
    np.testing.assert_allclose(c.probs, np.sort(p)[::-1][:3], rtol=1e-12)
    assert list(c.probs) == sorted(c.probs, reverse=True)
    # ties resolve to the lower bin
    for (b1, p1), (b2, p2) in zip(c, list(c)[1:]):
        assert p1 > p2 or b1 < b2


@pytest.mark.parametrize("verified,expected", [((0, 1, 1), 1), ((1, 1, 1), 0), ((0, 0, 0), 0), ((0, 0, 1), 2)])
def test_select_pose_examples(verified, expected):
    cands = CandidateSet((6, 2, 8), (0.5, 0.3, 0.2))
    probs = [0.9 if v else 0.1 for v in verified]
    assert select_pose(cands, probs) == cands.bins[expected]


def test_select_pose_threshold_is_inclusive():
    cands = CandidateSet((6, 2, 8), (0.5, 0.3, 0.2))
    assert select_pose(cands, [0.49, 0.5, 0.0]) == 2
    with pytest.raises(ConfigurationError):
        select_pose(cands, [1.0, 1.0])


def test_select_pose_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for pattern in itertools.product((0, 1), repeat=3):
        for _ in range(200):
            p = np.sort(rng.dirichlet(np.ones(9)))[::-1][:3]
            cands = CandidateSet((3, 7, 1), tuple(p))
            s2 = np.where(pattern, rng.uniform(0.5, 1.0, 3), rng.uniform(0.0, 0.5, 3))
            assert select_pose(cands, list(s2)) == cands.bins[select_oracle(p, pattern)]


# stage 2

def test_stage2_zero_mask_keeps_only_dmask_channel():
    rng = np.random.default_rng(5)
    fused = rng.standard_normal((128, 128, 8)).astype(np.float32)
    dm = rng.random((128, 128)) < 0.3
    x = stage2_input(fused, Mask(np.zeros((128, 128), bool)), Mask(dm))
    assert x.shape == (128, 128, 9)
    assert not x[..., :8].any()
    np.testing.assert_array_equal(x[..., 8], dm)


def test_stage2_output_range_and_determinism():
    rng = np.random.default_rng(6)
    net = Stage2Net(seed=1)
    for _ in range(3):
        fused = rng.standard_normal((128, 128, 8)).astype(np.float32) * 3
        pm, dm = rng.random((128, 128)) < 0.5, rng.random((128, 128)) < 0.5
        p = stage2_forward(net, fused, pm, dm)
        assert 0 < p < 1
        assert stage2_forward(net, fused, pm, dm) == p


def test_stage2_mask_size_mismatch():
    with pytest.raises(ConfigurationError):
        stage2_input(np.zeros((128, 128, 8)), np.zeros((64, 64), bool), np.zeros((128, 128), bool))


def test_stage2_pairs_labels_and_initial_loss(synth_data, dmask_library):
    _, _, samples = synth_data
    samples = samples[:24]
    pairs = build_stage2_pairs(None, samples, dmask_library, AZ, EL, seed=0)
    assert len(pairs.labels) == 48
    assert pairs.labels.tolist() == [1.0, 0.0] * 24
    for k, i in enumerate(pairs.sample_index):
        s = samples[i]
        gt = dmask_library[s.mesh_id].get(assign_bin(s.azimuth, AZ), assign_bin(s.elevation, EL)).bits
        assert np.array_equal(pairs.dmasks[k], gt) == bool(pairs.labels[k]) or not pairs.labels[k]
    stage1 = Stage1Net(seed=0)
    s2data = Stage2Data.from_samples(samples)
    hist = train_stage2(Stage2Net(seed=0), stage1, s2data, pairs, TrainConfig(max_epochs=1, batch_size=16))
    assert hist.initial_loss == pytest.approx(math.log(2), abs=0.02)


def test_stage2_negatives_from_stage1_top3(synth_data, dmask_library):
    _, _, samples = synth_data
    samples = samples[:16]
    stage1 = Stage1Net(seed=0)
    data = Stage1Data.from_samples(samples)
    pairs = build_stage2_pairs(data, samples, dmask_library, AZ, EL, seed=0, stage1=stage1)
    az, _ = stage1_logits(stage1, data)
    for k in range(1, len(pairs.labels), 2):
        i = pairs.sample_index[k]
        s = samples[i]
        allowed = [b for b in top_k_candidates(az[i]).bins if b != assign_bin(s.azimuth, AZ)]
        e = assign_bin(s.elevation, EL)
        assert any(np.array_equal(pairs.dmasks[k], dmask_library[s.mesh_id].get(b, e).bits) for b in allowed)


def test_stage2_missing_dmask_set_names_mesh(synth_data, dmask_library):
    _, _, samples = synth_data
    lib = dict(dmask_library)
    del lib[samples[0].mesh_id]
    with pytest.raises(ConfigurationError, match=samples[0].mesh_id):
        build_stage2_pairs(None, samples[:3], lib, AZ, EL)


def test_stage2_scores_match_single_forward(synth_data, dmask_library):
    _, _, samples = synth_data
    samples = samples[:3]
    pairs = build_stage2_pairs(None, samples, dmask_library, AZ, EL)
    stage1, net = Stage1Net(seed=0), Stage2Net(seed=0)
    s2data = Stage2Data.from_samples(samples)
    probs = stage2_scores(net, stage1, s2data, pairs)
    i = pairs.sample_index[1]
    fused = stage1.fuse(samples[i].normal, samples[i].reshading)
    assert probs[1] == pytest.approx(stage2_forward(net, fused, samples[i].mask, pairs.dmasks[1]), rel=1e-5)


# evaluation

def test_oracle_predictions_score_100(synth_data):
    anns, _, _ = synth_data
    preds = [Prediction(a.sample_id, a.category, assign_bin(a.azimuth_deg, AZ), assign_bin(a.elevation_deg, EL),
                        a.azimuth_deg, a.elevation_deg) for a in anns]
    report = evaluate_predictions(preds, AZ, EL)
    assert report.az_acc == 100.0 and report.el_acc == 100.0
    assert all(line.endswith(",100.00,100.00") for line in report.to_csv().splitlines()[1:])


def test_constant_predictor_hits_one_bin_width():
    rng = np.random.default_rng(0)
    az = rng.uniform(0, 360, 20000)
    preds = [Prediction(str(i), "c", 0, 0, a, 9.0) for i, a in enumerate(az)]
    acc = evaluate_predictions(preds, AZ, EL).az_acc / 100
    # bin 0 accepts 45 of 360 degrees with the overlap, 40 without
    assert acc == pytest.approx(45 / 360, abs=3 * math.sqrt(0.125 * 0.875 / 20000))
    assert abs(acc - 1 / 9) < 0.02


def test_report_csv_format():
    preds = [Prediction("a", "chair", 0, 0, 0.0, 9.0), Prediction("b", "chair", 1, 0, 0.0, 9.0),
             Prediction("c", "bed", 0, 1, 10.0, 9.0)]
    csv = evaluate_predictions(preds, AZ, EL).to_csv()
    assert csv == ("category,n,az_acc,el_acc\n"
                   "bed,1,100.00,0.00\n"
                   "chair,2,50.00,100.00\n"
                   "mean,3,66.67,66.67\n")


def test_evaluate_pipeline_within_top3(synth_data, dmask_library):
    _, _, samples = synth_data
    samples = samples[:12]
    stage1, stage2 = Stage1Net(seed=0), Stage2Net(seed=0)
    report = evaluate(stage1, samples, AZ, EL, stage2=stage2, dmask_library=dmask_library,
                      gallery=Gallery.from_samples(samples))
    assert report.total[0] == 12
    for p in report.predictions:
        assert p.az_bin in p.candidates and len(p.candidates) == 3
    again = evaluate(stage1, samples, AZ, EL, stage2=stage2, dmask_library=dmask_library,
                     gallery=Gallery.from_samples(samples))
    assert again.to_csv() == report.to_csv()


def test_gallery_retrieves_own_mesh(synth_data):
    _, _, samples = synth_data
    gallery = Gallery.from_samples(samples[:10])
    for s in samples[:3]:
        assert gallery.retrieve(s.mask, s.category) == s.mesh_id


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    for net in (Stage1Net(seed=4), Stage2Net(seed=4), Stage1Net(13, 3, seed=1)):
        blob = encode_checkpoint(net)
        assert blob[:4] == b"PNV1"
        back = decode_checkpoint(blob)
        assert type(back) is type(net)
        assert encode_checkpoint(back) == blob
        for k, v in net.state().items():
            assert back.state()[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "n.ckpt", net)
    assert encode_checkpoint(load_checkpoint(tmp_path / "n.ckpt")) == encode_checkpoint(net)


def test_checkpoint_errors(tmp_path):
    blob = encode_checkpoint(Stage2Net())
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(ConfigurationError):
        Stage1Net().load_state(Stage2Net().state())
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")
