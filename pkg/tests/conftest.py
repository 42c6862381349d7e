import numpy as np
import pytest

from softprune.data import synthetic_pair, write_idx
from softprune.network import ModelSpec, build_model

ACCEPTANCE_LINES = []


def record_acceptance(criterion, passed, detail):
    """Collect one acceptance line; printed again in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """The 5,000-image MNIST sample shipped with mlxtend, split 4,000 / 1,000
    (100 test images per class) and written as IDX files."""
    data = pytest.importorskip("mlxtend.data")
    x, y = data.mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.uint8)
    r = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = r.permutation(np.flatnonzero(y == c))
        test.extend(idx[:100])
        train.extend(idx[100:])
    train, test = r.permutation(train), r.permutation(test)
    out = tmp_path_factory.mktemp("mnist")
    write_idx(out / "train-images-idx3-ubyte", x[train])
    write_idx(out / "train-labels-idx1-ubyte", y[train])
    write_idx(out / "t10k-images-idx3-ubyte", x[test])
    write_idx(out / "t10k-labels-idx1-ubyte", y[test])
    return out


def toy_chain(widths=(8, 16, 16, 32), strides=(1, 2, 1, 2), input_shape=(1, 13, 13), seed=0,
              dtype=np.float32, **kw):
    spec = ModelSpec(architecture="plain-chain", widths=widths, strides=strides, input_shape=input_shape, **kw)
    return build_model(spec, seed=seed, dtype=dtype)


def toy_resnet(depth=8, stage_widths=(4, 8, 8), input_shape=(3, 9, 9), seed=0, dtype=np.float32, **kw):
    spec = ModelSpec(architecture="resnet-basic", depth=depth, stage_widths=stage_widths,
                     input_shape=input_shape, **kw)
    return build_model(spec, seed=seed, dtype=dtype)


@pytest.fixture(scope="session")
def synthetic_small():
    return synthetic_pair(256, 128, (1, 13, 13), 10, seed=3)
