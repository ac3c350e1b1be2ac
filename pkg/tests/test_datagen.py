import numpy as np
import pytest

from metnet.datagen import (
    DynamicsConfig,
    SampleUnavailable,
    generate_episode,
    make_sample,
    temporal_split,
    valid_anchors,
)
from metnet.dataset import DataError, build_sample, generate_dataset, load_dataset, save_dataset
from metnet.profile import DESK, REFERENCE

SMALL = DynamicsConfig(height=32, width=32, frames=30, aux_channels=2, initial_blobs=6, birth_rate=0.3, growth_rate=0.03)


def test_same_seed_same_episode():
    a, b = generate_episode(SMALL, 7), generate_episode(SMALL, 7)
    for name in ("precip", "aux", "quality_mask"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.flow_truth.u.tobytes() == b.flow_truth.u.tobytes()
    assert a.start == b.start
    assert generate_episode(SMALL, 8).precip.tobytes() != a.precip.tobytes()


def test_episode_invariants():
    ep = generate_episode(SMALL, 3)
    assert ep.precip.min() >= 0
    steps = np.diff(ep.timestamps)
    assert np.all(steps == SMALL.frame_minutes)
    assert ep.aux.shape == (30, 32, 32, 2)
    assert set(np.unique(ep.quality_mask)) <= {0.0, 1.0}
    # The centre of the grid is always covered by radar.
    assert ep.quality_mask[16, 16] == 1.0
    assert len(ep.frames) == 30 and ep.frames[1][0] == 2


def test_uniform_flow_shifts_frames():
    # 1 km/min, 1 km pixels, 2-minute frames: two pixels per frame along +column.
    cfg = DynamicsConfig(flow_speed=1.0, frames=12, initial_blobs=20, margin_km=40)
    ep = generate_episode(cfg, 11)
    for k in range(cfg.frames - 1):
        err = np.abs(ep.precip[k + 1][:, 2:] - ep.precip[k][:, :-2])
        assert err[4:-4, 4:-4].max() < 1e-3
    np.testing.assert_allclose(ep.flow_truth.u, 2.0)
    np.testing.assert_allclose(ep.flow_truth.v, 0.0, atol=1e-6)


def test_zero_flow_zero_growth_is_static():
    ep = generate_episode(DynamicsConfig(flow_speed=0.0, frames=5), 2)
    for k in range(1, 5):
        np.testing.assert_array_equal(ep.precip[k], ep.precip[0])


def test_pure_advection_conserves_mass():
    cfg = DynamicsConfig(flow_speed=0.2, frames=20, initial_blobs=1, margin_km=0, sigma_km=(2.5, 3.5))
    checked = 0
    for seed in range(40):
        ep = generate_episode(cfg, seed)
        first, last = ep.precip[0], ep.precip[-1]
        # Only blobs that stay well inside the grid keep all their mass on it.
        cols = [np.average(np.arange(64), weights=f.sum(0)) for f in (first, last)]
        rows = np.average(np.arange(64), weights=first.sum(1))
        if min(cols + [rows]) < 14 or max(cols + [rows]) > 50:
            continue
        mass = ep.precip.sum(axis=(1, 2))
        assert np.max(np.abs(mass / mass[0] - 1)) < 0.01
        checked += 1
    assert checked >= 3


def test_aux_channels_are_not_precip():
    ep = generate_episode(DynamicsConfig(aux_channels=4, frames=3), 5)
    p = ep.precip[1].ravel()
    for k in range(4):
        c = np.corrcoef(p, ep.aux[1, ..., k].ravel())[0, 1]
        assert c < 0.999


def test_make_sample_windows():
    ep = generate_episode(DynamicsConfig(frames=100), 1)
    s = make_sample(ep, 36, 10, DESK)
    assert s.slice_times == [0, 6, 12, 18, 24, 30, 36]
    assert s.precip.shape == (7, 64, 64) and s.target_time == 46
    np.testing.assert_array_equal(s.target, ep.precip[23])
    with pytest.raises(SampleUnavailable):
        make_sample(ep, 0, 10, DESK)  # input window not covered
    with pytest.raises(SampleUnavailable):
        make_sample(ep, 36, 122, DESK)  # beyond the desk lead range
    with pytest.raises(SampleUnavailable):
        make_sample(ep, 190, 10, DESK)  # target past the episode
    with pytest.raises(SampleUnavailable):
        make_sample(ep, 36, 3, DESK)


def test_reference_lead_range():
    cfg = DynamicsConfig(height=8, width=8, frames=300, frame_minutes=2, aux_channels=0)
    ep = generate_episode(cfg, 0)
    s = make_sample(ep, 90, 480, REFERENCE)
    assert len(s.slice_times) == 7 and s.slice_times[0] == 0
    with pytest.raises(SampleUnavailable):
        make_sample(ep, 90, 482, REFERENCE)


def test_mismatch_tolerance():
    # 4-minute frames: nominal times at odd multiples of 2 are 2 min off, within 5.
    ep = generate_episode(DynamicsConfig(frames=40, frame_minutes=4, height=16, width=16), 0)
    s = make_sample(ep, 38, 2, DESK)
    assert s.slice_times[-1] == 36 and s.target_time == 40
    # 12-minute frames leave gaps larger than 5 minutes.
    ep = generate_episode(DynamicsConfig(frames=20, frame_minutes=12, height=16, width=16), 0)
    with pytest.raises(SampleUnavailable):
        make_sample(ep, 42, 2, DESK)


def test_valid_anchors_all_build():
    ep = generate_episode(DynamicsConfig(frames=100), 4)
    anchors = valid_anchors(ep, DESK, 2)
    assert anchors[0] == 36 and anchors[-1] == 198 - 120
    for a in anchors[::10]:
        make_sample(ep, a, 120, DESK)


def test_temporal_split_examples():
    tr, va, te = temporal_split(list(range(20)))
    assert (tr, va, te) == (list(range(16)), [16, 17], [18, 19])
    assert temporal_split([0, 1, 2], (1, 1, 1)) == ([0], [1], [2])
    tr, va, te = temporal_split(list(range(40)))
    assert (len(tr), len(va), len(te)) == (32, 4, 4)
    assert sorted(tr + va + te) == list(range(40))
    with pytest.raises(ValueError):
        temporal_split(list(range(5)))


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(SMALL, 3, seed=5, pattern=(1, 1, 1))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.stats == ds.stats
    assert back.dynamics == ds.dynamics
    for a, b in zip(ds.episodes, back.episodes):
        np.testing.assert_array_equal(a.precip, b.precip)
        np.testing.assert_array_equal(a.aux, b.aux)
        np.testing.assert_array_equal(a.geo.elevation, b.geo.elevation)
        assert a.start == b.start and a.seed == b.seed
    assert [e.episode_id for e in back.split("test")] == [2]
    # Saving twice gives identical bytes.
    save_dataset(ds, tmp_path / "e")
    for name in ("manifest.json", "episode_001/precip.f32"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")
    ds = generate_dataset(SMALL, 3, seed=5, pattern=(1, 1, 1))
    save_dataset(ds, tmp_path / "d")
    (tmp_path / "d" / "episode_000" / "aux.f32").write_bytes(b"\0" * 12)
    with pytest.raises(DataError, match="expected shape"):
        load_dataset(tmp_path / "d")


def test_build_sample_shapes():
    ds = generate_dataset(DynamicsConfig(frames=100, aux_channels=4), 3, seed=1, pattern=(1, 1, 1))
    s = build_sample(ds, ds.episodes[0], 40, 20, DESK)
    assert s.patch.shape == (7, 64, 64, DESK.input_channels)
    assert s.target_rate.shape == s.target_bins.shape == s.mask.shape == (8, 8)
    assert s.target_bins.max() < DESK.bins
