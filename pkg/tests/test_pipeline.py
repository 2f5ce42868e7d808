import numpy as np
import pytest

from partflow import pipeline
from partflow import tensor as T
from partflow.geom import PointCloud, normalize_cloud


@pytest.fixture(scope="module")
def model():
    return pipeline.Model.init(pipeline.ModelConfig(n_points=12, width_scale=0.25, seed=3))


def test_checkpoint_round_trip_bitexact(model, tmp_path):
    path = tmp_path / "model.ptfl"
    model.save(path)
    back = pipeline.Model.load(path)
    assert back.config == model.config
    assert set(back.store) == set(model.store)
    for k in model.store:
        np.testing.assert_array_equal(back.store[k].data, model.store[k].data)
    assert back.corr == model.corr
    assert back.flow == model.flow
    assert back.seg == model.seg


def test_loaded_model_reproduces_forward(model, tmp_path):
    rng = np.random.default_rng(0)
    p = normalize_cloud(PointCloud(rng.normal(size=(12, 3))))
    q = normalize_cloud(PointCloud(rng.normal(size=(12, 3))))
    with T.no_grad():
        base = model.flow_pass(p, q)["flow"].numpy()
    path = tmp_path / "model.ptfl"
    model.save(path)
    back = pipeline.Model.load(path)
    with T.no_grad():
        again = back.flow_pass(p, q)["flow"].numpy()
    np.testing.assert_array_equal(base, again)


def test_same_seed_same_init():
    a = pipeline.Model.init(pipeline.ModelConfig(n_points=10, width_scale=0.25, seed=9))
    b = pipeline.Model.init(pipeline.ModelConfig(n_points=10, width_scale=0.25, seed=9))
    for k in a.store:
        np.testing.assert_array_equal(a.store[k].data, b.store[k].data)


def test_trainable_prefix_filter(model):
    sub = model.trainable(("corr/",))
    assert sub and all(k.startswith("corr/") for k in sub)
    assert len(model.trainable(None)) == len(model.store)
