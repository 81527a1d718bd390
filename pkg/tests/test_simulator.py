import json

import numpy as np
import pytest

from vidrecon import blobs
from vidrecon import simulator as sim
from vidrecon.simulator import SceneSpec, VideoClip


# --------------------------------------------------------------------------
# NVRD1 blobs
# --------------------------------------------------------------------------

def test_blob_roundtrip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    digest = blobs.save(tmp_path / "a.nvrd", a)
    b = blobs.load(tmp_path / "a.nvrd")
    np.testing.assert_array_equal(a, b)
    assert digest == blobs.checksum(tmp_path / "a.nvrd")


def test_blob_layout():
    buf = blobs.encode(np.ones((2, 1), np.float32))
    assert buf[:6] == b"NVRD1\0"
    assert int.from_bytes(buf[6:10], "little") == 2
    assert buf[18] == 0
    assert len(buf) == 6 + 4 + 8 + 1 + 8


@pytest.mark.parametrize("bad", [b"XXXXX\0", b"NVRD1\0\x01\0\0\0", b""])
def test_blob_rejects_garbage(bad):
    with pytest.raises(blobs.BlobFormatError):
        blobs.decode(bad)


# --------------------------------------------------------------------------
# HRF
# --------------------------------------------------------------------------

def test_hrf_tap_count():
    assert len(sim.canonical_hrf(1.0, 20.0, 5.0).taps) == 21


@pytest.mark.parametrize("tr,dur,peak", [(1, 20, 5), (2, 20, 5), (0.5, 12, 4), (2, 30, 6)])
def test_hrf_normalized(tr, dur, peak):
    assert sim.canonical_hrf(tr, dur, peak).taps.sum() == pytest.approx(1.0, abs=1e-9)


def test_hrf_peak_at_tr2():
    h = sim.canonical_hrf(2.0, 20.0, 5.0)
    assert np.argmax(h.taps) * 2.0 in (4.0, 6.0)
    # the undershoot pulls the dense peak slightly earlier than 5 s
    t = np.arange(0, 20, 0.001)
    assert t[np.argmax(sim.hrf_curve(t, 5.0))] == pytest.approx(5.0, abs=0.05)


@pytest.mark.parametrize("args", [(0, 20, 5), (2, 0, 5), (2, 20, -1), (2, 3, 5)])
def test_hrf_invalid(args):
    with pytest.raises(ValueError):
        sim.canonical_hrf(*args)


def test_hrf_is_low_pass(rng):
    x = rng.standard_normal(1000)
    y = sim.convolve_causal(x, sim.canonical_hrf().taps)
    assert y.var() < x.var()


# --------------------------------------------------------------------------
# Video
# --------------------------------------------------------------------------

def test_video_shape_and_range():
    v = sim.generate_video(SceneSpec(), 8.0, seed=1)
    assert v.frames.shape == (64, 32, 32, 3)
    assert v.frames.min() >= 0 and v.frames.max() <= 1


def test_video_deterministic():
    a = sim.generate_video(SceneSpec(), 2.0, seed=5)
    b = sim.generate_video(SceneSpec(), 2.0, seed=5)
    assert np.array_equal(a.frames, b.frames)


def test_static_scene():
    v = sim.generate_video(SceneSpec(sprite_speed=0.0, pan_speed=0.0), 2.0, seed=2)
    assert np.all(v.frames == v.frames[0])


def test_zero_canvas_rejected():
    with pytest.raises(ValueError):
        sim.generate_video(SceneSpec(height=0), 1.0, seed=0)


def test_non_integer_frame_count_rejected():
    with pytest.raises(ValueError):
        sim.generate_video(SceneSpec(), 1.01, seed=0)


def test_clip_invariants():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((0, 4, 4, 3)), 8.0)
    with pytest.raises(ValueError):
        VideoClip(np.zeros((1, 4, 4, 3)), 0.0)
    v = VideoClip(np.random.default_rng(0).random((4, 4, 4, 3)), 8.0)
    assert np.array_equal(v.hflip().hflip().frames, v.frames)


# --------------------------------------------------------------------------
# Forward model
# --------------------------------------------------------------------------

def test_constant_video_gives_constant_series():
    subject = sim.make_subject(16, noise_sigma=0.0, seed=0)
    v = VideoClip(np.full((16 * 20, 32, 32, 3), 0.4), 8.0)
    y = sim.simulate_fmri(subject, v).samples
    n_taps = len(subject.hrf.taps)
    assert np.allclose(y[n_taps:], y[n_taps])


def test_single_feature_subject_matches_direct_convolution():
    w = np.zeros((1, 48))
    w[0, 5] = 1.0
    hrf = sim.canonical_hrf()
    subject = sim.VirtualSubject(w, hrf, 0, 0.0, 0)
    v = sim.generate_segment(SceneSpec(), 48.0, 6.0, seed=3)
    feats = sim.tr_features(v, 2.0)[:, 5]
    direct = np.array([sum(hrf.taps[k] * feats[t - k] for k in range(len(hrf.taps)) if t - k >= 0)
                       for t in range(len(feats))])
    np.testing.assert_allclose(sim.simulate_fmri(subject, v).samples[:, 0], direct, atol=1e-10)


def test_feature_dimension_mismatch():
    subject = sim.VirtualSubject(np.ones((3, 5)), sim.canonical_hrf())
    with pytest.raises(ValueError):
        sim.simulate_fmri(subject, sim.generate_video(SceneSpec(), 2.0, 0))


def test_noise_scaling():
    v = sim.generate_segment(SceneSpec(), 48.0, 6.0, seed=4)
    ratios = []
    for trial in range(100):
        a = sim.make_subject(8, noise_sigma=0.3, seed=1)
        b = sim.make_subject(8, noise_sigma=0.6, seed=1)
        clean = sim.noiseless_response(a, v)
        ra = sim.simulate_fmri(a, v, noise_seed=trial).samples - clean
        rb = sim.simulate_fmri(b, v, noise_seed=10_000 + trial).samples - clean
        ratios.append(rb.std() / ra.std())
    assert np.mean(ratios) == pytest.approx(2.0, rel=0.2)


def test_luminance_channel_linear():
    # one readout on a luminance cell: the response scales with the video
    w = np.zeros((1, 48))
    w[0, 3] = 1.0
    subject = sim.VirtualSubject(w, sim.canonical_hrf())
    v = sim.generate_segment(SceneSpec(), 32.0, 6.0, seed=6)
    v = sim.scale_video(v, 0.8)
    center = sim.FEATURE_CENTER[0] / sim.FEATURE_SCALE[0]
    base = sim.noiseless_response(subject, v)[:, 0]
    taps_sum = np.cumsum(np.r_[subject.hrf.taps, np.zeros(len(base))])[:len(base)]
    base = base + center * taps_sum
    half = sim.noiseless_response(subject, sim.scale_video(v, 0.5))[:, 0] + center * taps_sum
    np.testing.assert_allclose(half, 0.5 * base, atol=1e-9)


def test_delay_equivariance():
    v = sim.generate_segment(SceneSpec(), 48.0, 6.0, seed=7)
    y0 = sim.noiseless_response(sim.make_subject(8, delay_trs=0, seed=2), v)
    y2 = sim.noiseless_response(sim.make_subject(8, delay_trs=2, seed=2), v)
    np.testing.assert_allclose(y2[2:], y0[:-2])
    np.testing.assert_allclose(y2[:2], np.repeat(y0[:1], 2, axis=0))


def test_repeats():
    v = sim.generate_video(SceneSpec(), 16.0, seed=0)
    clean = sim.make_subject(8, noise_sigma=0.0, seed=0)
    reps = sim.simulate_repeats(clean, v, 3)
    assert all(np.array_equal(r.samples, reps[0].samples) for r in reps)
    noisy = sim.make_subject(8, noise_sigma=0.5, seed=0)
    reps = sim.simulate_repeats(noisy, v, 10)
    assert [r.repeat_index for r in reps] == list(range(10))
    assert len({r.samples.tobytes() for r in reps}) == 10
    with pytest.raises(ValueError):
        sim.simulate_repeats(noisy, v, 0)


def test_two_repeat_mean_closer_to_clean():
    v = sim.generate_segment(SceneSpec(), 48.0, 6.0, seed=8)
    subject = sim.make_subject(16, noise_sigma=0.5, seed=3)
    clean = sim.noiseless_response(subject, v)
    wins = 0
    for trial in range(100):
        a, b = sim.simulate_repeats(subject, v, 2, base_seed=trial)
        mean = (a.samples + b.samples) / 2
        d = np.linalg.norm(mean - clean)
        wins += d < np.linalg.norm(a.samples - clean) and d < np.linalg.norm(b.samples - clean)
    assert wins / 100 > 0.95


def test_subject_deterministic():
    a, b = sim.make_subject(32, seed=9), sim.make_subject(32, seed=9)
    assert np.array_equal(a.readout_weights, b.readout_weights)


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------

def test_default_benchmark_structure():
    cfg = sim.BenchmarkConfig()
    assert (cfg.n_train_segments, cfg.train_repeats, cfg.test_repeats) == (18, 2, 10)


def test_benchmark_counts(small_bench, small_config):
    assert len(small_bench.train_segments) == small_config.n_train_segments
    assert all(len(s.fmri) == small_config.train_repeats for s in small_bench.train_segments)
    assert len(small_bench.test_segment.fmri) == small_config.test_repeats
    small_bench.validate()


def test_benchmark_deterministic(tmp_path):
    cfg = sim.BenchmarkConfig(n_train_segments=2, train_segment_s=16.0, test_segment_s=16.0,
                              test_repeats=2, n_voxels=8, seed=11)
    a = sim.make_benchmark(cfg, tmp_path / "a")
    b = sim.make_benchmark(cfg, tmp_path / "b")
    assert a.to_json() == b.to_json()
    for seg_a, seg_b in zip(a.train_segments + [a.test_segment], b.train_segments + [b.test_segment]):
        for ra, rb in zip([seg_a.video, *seg_a.fmri], [seg_b.video, *seg_b.fmri]):
            assert blobs.checksum(a.resolve(ra)) == blobs.checksum(b.resolve(rb))


def test_manifest_roundtrip(small_bench):
    path = small_bench.root / "manifest.json"
    loaded = sim.BenchmarkManifest.load(path)
    assert loaded == small_bench
    assert set(json.loads(path.read_text())) == {"train_segments", "test_segment", "tr_seconds",
                                                  "frame_rate_hz", "seed"}


def test_manifest_missing_file(tmp_path):
    cfg = sim.BenchmarkConfig(n_train_segments=1, train_segment_s=8.0, test_segment_s=8.0,
                              test_repeats=2, n_voxels=4)
    m = sim.make_benchmark(cfg, tmp_path)
    (tmp_path / m.test_segment.fmri[1]).unlink()
    with pytest.raises(FileNotFoundError):
        sim.BenchmarkManifest.load(tmp_path / "manifest.json")
