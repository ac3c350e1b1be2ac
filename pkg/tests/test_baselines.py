import numpy as np
import pytest

from metnet.baselines import (
    FlowField,
    center_crop,
    extrapolate,
    lucas_kanade_flow,
    optical_flow_forecast,
    persistence_forecast,
)
from metnet.datagen import DynamicsConfig
from metnet.dataset import generate_dataset
from metnet.evaluation import BaselineForecaster, anchors_for, evaluate, f1_score
from metnet.profile import DESK


def blobs(shape=(64, 64), centers=((30.0, 28.0), (20.0, 40.0), (42.0, 22.0)), sigma=4.0, shift=(0.0, 0.0)):
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    out = np.zeros(shape)
    for k, (r, c) in enumerate(centers):
        out += (3.0 + k) * np.exp(-((rows - r - shift[0]) ** 2 + (cols - c - shift[1]) ** 2) / (2 * sigma**2))
    return out


def test_identical_frames_give_zero_flow():
    f = blobs()
    flow = lucas_kanade_flow(f, f)
    assert np.abs(flow.u).max() < 1e-12 and np.abs(flow.v).max() < 1e-12


def test_textureless_frames_give_zero_flow():
    flow = lucas_kanade_flow(np.full((32, 32), 2.0), np.full((32, 32), 2.5))
    assert np.all(flow.u == 0.0) and np.all(flow.v == 0.0)


@pytest.mark.parametrize("shift", [(0.0, 1.0), (1.0, 3.0)])
def test_translation_endpoint_error(shift):
    f0 = blobs()
    f1 = blobs(shift=shift)
    flow = lucas_kanade_flow(f0, f1)
    support = (f0 > 0.1 * f0.max()) | (f1 > 0.1 * f1.max())
    epe = np.hypot(flow.u - shift[1], flow.v - shift[0])[support].mean()
    assert epe < 0.2


@pytest.mark.parametrize("offset", [(4, 8), (3, 2), (-6, 7)])
def test_flow_is_translation_equivariant(offset):
    centers = ((46.0, 44.0), (36.0, 56.0), (58.0, 38.0))
    shape = (96, 96)
    f0, f1 = blobs(shape, centers), blobs(shape, centers, shift=(0.5, 1.0))
    g0 = blobs(shape, centers, shift=offset)
    g1 = blobs(shape, centers, shift=(offset[0] + 0.5, offset[1] + 1.0))
    a, b = lucas_kanade_flow(f0, f1), lucas_kanade_flow(g0, g1)
    support = f0 > 0.05 * f0.max()
    for fa, fb in ((a.u, b.u), (a.v, b.v)):
        back = np.roll(fb, (-offset[0], -offset[1]), axis=(0, 1))
        assert np.abs(fa - back)[support].max() < 1e-3


def test_flow_errors():
    with pytest.raises(ValueError):
        lucas_kanade_flow(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        lucas_kanade_flow(np.zeros((8, 8)), np.zeros((8, 8)), window=4)


def test_extrapolate_identity_and_shift():
    f = blobs(sigma=3.0)
    flow = FlowField.uniform(f.shape, 1.0, 0.0)
    np.testing.assert_array_equal(extrapolate(f, flow, 0), f)
    for steps in (5, 10):
        out = extrapolate(f, flow, steps)
        np.testing.assert_allclose(out[:, steps:][4:-4, 4:-4], f[:, :-steps][4:-4, 4:-4], atol=1e-3)
        assert np.abs(out - blobs(sigma=3.0, shift=(0, steps)))[8:-8, 8:-8].max() < 1e-3
    with pytest.raises(ValueError):
        extrapolate(f, flow, -1)


def test_schemes_agree_under_uniform_flow():
    f = blobs()
    flow = FlowField.uniform(f.shape, 0.7, -0.4)
    cv = extrapolate(f, flow, 10, "constant_vector")
    sl = extrapolate(f, flow, 10, "semi_lagrangian")
    assert np.abs(cv - sl).max() < 1e-3


def test_extrapolation_is_non_negative():
    rng = np.random.default_rng(0)
    f = rng.exponential(1.0, (32, 32))
    flow = FlowField(rng.standard_normal((32, 32)), rng.standard_normal((32, 32)))
    for scheme in ("constant_vector", "semi_lagrangian"):
        assert extrapolate(f, flow, 7, scheme).min() >= 0.0


def test_persistence_is_identity():
    f = blobs()
    out = persistence_forecast(f, 60)
    np.testing.assert_array_equal(out, f)
    assert out is not f
    mask = np.ones_like(f)
    assert f1_score(out >= 0.2, f >= 0.2, mask).f1 == 1.0


def test_zero_flow_scene_equals_persistence():
    f = blobs()
    out = optical_flow_forecast([f, f], 20, target_size=16)
    np.testing.assert_allclose(out, center_crop(f, 16), atol=1e-12)
    with pytest.raises(ValueError, match="two"):
        optical_flow_forecast([f], 2)


def test_one_step_forecast_on_translation():
    f0, f1, f2 = (blobs(shift=(0.0, k)) for k in range(3))
    out = optical_flow_forecast([f0, f1], 2, frame_minutes=2)
    mask = np.ones_like(f2)
    assert f1_score(out >= 0.2, f2 >= 0.2, mask).f1 > 0.95


ADVECT = DynamicsConfig(
    flow_speed=1.0, direction_spread_deg=0.0, speed_spread=0.0, birth_rate=0.0, growth_rate=0.0, initial_blobs=14, frames=80
)


@pytest.fixture(scope="module")
def advect_ds():
    return generate_dataset(ADVECT, 6, seed=3, pattern=(1, 1, 1))


def test_persistence_decays_with_lead(advect_ds):
    leads = [2, 10, 20, 40, 60]
    test = anchors_for(advect_ds.split("test"), DESK, 6, max(leads))
    rep = evaluate(BaselineForecaster("persistence", 16), advect_ds, test, leads, [0.2])
    f1s = [rep.f1("persistence", lead, 0.2) for lead in leads]
    # Once blobs no longer overlap their old position the score stays at 0.
    assert all(a > b or a == b == 0.0 for a, b in zip(f1s, f1s[1:]))
    assert f1s[0] > 0.8


def test_flow_beats_persistence_on_pure_advection(advect_ds):
    leads = [4, 10, 20, 40, 60]
    test = anchors_for(advect_ds.split("test"), DESK, 6, max(leads))
    rep = evaluate(BaselineForecaster("persistence", 16), advect_ds, test, leads, [0.2])
    rep.extend(evaluate(BaselineForecaster("of-cv", 16), advect_ds, test, leads, [0.2]))
    for lead in leads:
        assert rep.f1("of-cv", lead, 0.2) > rep.f1("persistence", lead, 0.2)


def test_slow_persistence_near_one_at_lead_two():
    ds = generate_dataset(DynamicsConfig(flow_speed=0.1, frames=60), 3, seed=0, pattern=(1, 1, 1))
    test = anchors_for(ds.split("test"), DESK, 6, 2)
    rep = evaluate(BaselineForecaster("persistence", 16), ds, test, [2], [0.2])
    assert rep.f1("persistence", 2, 0.2) > 0.95


def test_baseline_forecaster_names():
    assert BaselineForecaster("of-sl", 8, context_km=32).name == "of-sl@32km"
    with pytest.raises(ValueError):
        BaselineForecaster("dis", 8)
