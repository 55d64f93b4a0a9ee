import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from app.errors import InputError
from app.services.synth import (
    Distribution,
    DriftConfig,
    ModelConfig,
    ModelKind,
    component_means,
    draw_client_parameters,
    load_clients_csv,
    sample_drift,
    sample_model,
    write_clients_csv,
)


@pytest.mark.parametrize("dist", list(Distribution))
@pytest.mark.parametrize("model", list(ModelKind))
def test_shapes(model, dist):
    clients = sample_model(ModelConfig(model=model, dist=dist, K=3, d=4, m=7, n=9, seed=1))
    assert len(clients) == 3
    for c in clients:
        assert c.xs.points.shape == (7, 4)
        assert c.ys.points.shape == (9, 4)
        assert np.all(np.isfinite(c.pooled()))


def test_same_seed_same_data():
    cfg = ModelConfig(model=ModelKind.D, dist=Distribution.T5, K=2, d=3, seed=9)
    a, b = sample_model(cfg), sample_model(cfg)
    for x, y in zip(a, b):
        assert x.xs.points.tobytes() == y.xs.points.tobytes()
        assert x.ys.points.tobytes() == y.ys.points.tobytes()
    other = sample_model(cfg.model_copy(update={"seed": 10}))
    assert not np.array_equal(a[0].xs.points, other[0].xs.points)


def test_model_a_shares_parameters():
    for prm in draw_client_parameters(ModelConfig(model=ModelKind.A, K=4, d=3, shift_sd=0.0)):
        assert_array_equal(prm.u, prm.mean_y)
        assert_array_equal(prm.r, prm.scale_y)


def test_models_apply_their_shifts():
    base = dict(K=3, d=2, shift_sd=0.25, seed=2)
    params = {kind: draw_client_parameters(ModelConfig(model=kind, **base)) for kind in ModelKind}
    for k in range(3):
        a, b, c, d = (params[kind][k] for kind in ModelKind)
        # Every model consumes the same stream, so u, r and the shifts agree.
        assert_array_equal(a.u, d.u)
        assert_array_equal(b.mean_y, b.u)
        assert_allclose(b.scale_y, np.abs(b.r + b.scale_shift))
        assert_allclose(c.mean_y, c.u + c.mean_shift)
        assert_array_equal(c.scale_y, c.r)
        assert_allclose(d.mean_y, d.u + d.mean_shift)
        assert_allclose(d.scale_y, np.abs(d.r + d.scale_shift))


def test_parameter_ranges():
    for prm in draw_client_parameters(ModelConfig(K=50, d=3, seed=3)):
        assert np.all((-1 <= prm.u) & (prm.u <= 1))
        assert np.all((0.8 <= prm.r) & (prm.r <= 1.2))


def test_model_a_moments():
    cfg = ModelConfig(model=ModelKind.A, K=2, d=1, m=100_000, n=10, seed=4)
    params = draw_client_parameters(cfg)
    for prm, client in zip(params, sample_model(cfg)):
        x = client.xs.points[:, 0]
        assert abs(x.mean() - prm.u[0]) <= 0.02
        assert abs(x.std() - prm.r[0]) <= 0.02


def test_model_c_mean_difference_matches_shift():
    cfg = ModelConfig(model=ModelKind.C, K=3, d=2, m=20_000, n=20_000, seed=5)
    for prm, client in zip(draw_client_parameters(cfg), sample_model(cfg)):
        diff = client.ys.points.mean(axis=0) - client.xs.points.mean(axis=0)
        tolerance = 4 * np.sqrt(2) * prm.r / np.sqrt(cfg.m)
        assert np.all(np.abs(diff - prm.mean_shift) <= tolerance)


def test_lognormal_is_positive():
    cfg = ModelConfig(dist=Distribution.LOGNORMAL, K=2, d=2, seed=6)
    for client in sample_model(cfg):
        assert np.all(client.pooled() > 0)


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(d=0)
    with pytest.raises(ValidationError):
        ModelConfig(shift_sd=-1.0)
    with pytest.raises(ValidationError):
        DriftConfig(epsilon=1.5)
    with pytest.raises(ValidationError):
        DriftConfig(K=2, d=2, means=[[0.0, 0.0]])


def test_component_means_on_circle():
    means = component_means(DriftConfig(K=4, d=3, radius=2.0))
    assert means.shape == (4, 3)
    assert_allclose(np.linalg.norm(means, axis=1), 2.0)
    assert_allclose(means[:, 2], 0.0)
    line = component_means(DriftConfig(K=3, d=1, radius=1.0))
    assert_allclose(line[:, 0], [-1.0, 0.0, 1.0])


def test_drift_without_mixing_keeps_own_component():
    means = [[0.0, 0.0], [50.0, 50.0]]
    clients = sample_drift(DriftConfig(K=2, d=2, m=200, epsilon=1.0, means=means, seed=1))
    for client, mu in zip(clients, means):
        assert np.all(np.abs(client.ys.points - mu) < 10)
        assert client.m == client.n == 200


def test_drift_with_full_mixing_draws_all_components():
    means = [[0.0, 0.0], [50.0, 50.0]]
    clients = sample_drift(DriftConfig(K=2, d=2, m=400, epsilon=0.0, means=means, seed=1))
    for client in clients:
        far = np.mean(client.ys.points[:, 0] > 25)
        assert 0.4 <= far <= 0.6


def test_drift_is_seeded():
    cfg = DriftConfig(K=3, m=20, seed=4)
    a, b = sample_drift(cfg), sample_drift(cfg)
    assert all(np.array_equal(x.ys.points, y.ys.points) for x, y in zip(a, b))


def test_csv_round_trip(tmp_path):
    clients = sample_model(ModelConfig(K=2, d=3, m=5, n=6, seed=7))
    write_clients_csv(clients, tmp_path)
    loaded = load_clients_csv(tmp_path)
    assert [c.client_id for c in loaded] == ["c0", "c1"]
    for a, b in zip(clients, loaded):
        assert_array_equal(a.xs.points, b.xs.points)
        assert_array_equal(a.ys.points, b.ys.points)


def test_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_clients_csv(tmp_path / "missing")
    with pytest.raises(InputError):
        load_clients_csv(tmp_path)
    (tmp_path / "solo_x.csv").write_text("x0\n1.0\n")
    with pytest.raises(InputError):
        load_clients_csv(tmp_path)
