import numpy as np
import pytest

from fbunet.autograd import Parameter, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(arr):
    return Parameter(np.asarray(arr, dtype=np.float64))


def const(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def naive_conv3x3(x, w, b):
    """Direct nested-loop same-padded 3x3 cross-correlation."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd))
    for bi in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[bi, c, ii, jj] * w[o, c, di, dj]
                    out[bi, o, i, j] = acc
    return out


def naive_transposed(x, w, b):
    """Scatter-add: every input pixel adds w[c, :, :, :] * x into its 2x2 output window."""
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    out = np.zeros((n, cout, 2 * h, 2 * wd)) + b[None, :, None, None]
    for bi in range(n):
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    out[bi, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += x[bi, c, i, j] * w[c]
    return out


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    from fbunet.data import synthetic_dataset
    return synthetic_dataset(4, 12, 16, 3, tmp_path_factory.mktemp("synth16"))


def tiny_train_config(variant="feedback-convlstm", **kw):
    from fbunet.models import ModelConfig
    from fbunet.train import TrainConfig
    model_kw = {k: kw.pop(k) for k in ("lstm_locations", "lam") if k in kw}
    base = dict(model=ModelConfig(variant, 4, (2, 3, 4, 5, 6), **model_kw), lr=1e-3, epochs=2,
                batch_size=4, seed=0, fold=(4, 0), ratios=(2, 1, 1), eval_every=1)
    base.update(kw)
    return TrainConfig(**base)
