import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from r2reid import MultiTaskReID
from r2reid.datapipe import load_dataset


@pytest.fixture(scope="module")
def data(synth_dir):
    ds = load_dataset(synth_dir, synth_dir / "train.csv")
    return ds.stack(range(len(ds))), ds.identities, ds.cameras


def test_params_roundtrip_and_clone():
    est = MultiTaskReID(scale=2, batch_size=8, random_state=5)
    params = est.get_params()
    assert params["scale"] == 2 and params["random_state"] == 5
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(base_lr=0.01).base_lr == 0.01


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MultiTaskReID().transform(np.zeros((1, 3, 8, 4)))


def test_fit_transform_predict(data):
    X, y, cams = data
    est = MultiTaskReID(max_iterations=3, random_state=0).fit(X, y, cams)
    assert len(est.history_) == 3 and est.classes_.tolist() == sorted(set(y.tolist()))
    f = est.transform(X[:5])
    assert f.shape == (5, 16) and f.dtype == np.float32
    assert set(est.predict(X[:5])) <= set(y.tolist())
    p = est.predict_same(X[:4], X[4:8])
    assert p.shape == (4,) and ((0 < p) & (p < 1)).all()
    res = est.evaluate(X[:4], y[:4], cams[:4], X, y, cams)
    assert 0 < res.map <= 1


def test_fit_is_deterministic(data):
    X, y, cams = data
    a = MultiTaskReID(max_iterations=2, random_state=1).fit(X, y, cams).transform(X[:3])
    b = MultiTaskReID(max_iterations=2, random_state=1).fit(X, y, cams).transform(X[:3])
    assert np.array_equal(a, b)


@pytest.mark.parametrize(
    "X,y",
    [
        (np.zeros((4, 1, 8, 4)), [0, 0, 1, 1]),
        (np.zeros((4, 3, 8)), [0, 0, 1, 1]),
        (np.full((4, 3, 8, 4), np.nan), [0, 0, 1, 1]),
        (np.zeros((4, 3, 8, 4)), [0, 1]),
    ],
)
def test_input_validation(X, y):
    with pytest.raises(ValueError):
        MultiTaskReID(max_iterations=1).fit(X, y)
