import numpy as np
import pytest

from domadapt.autodiff import Tensor, grad
from domadapt.data import ExpressionMatrix, LabeledDataset


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            hi = f(*arrays)
            a[i] = old - h
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, arrays, h=1e-5):
    """Max relative error between reverse-mode and finite-difference gradients.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = [g.data for g in grad(build(*leaves), leaves)]

    def f(*xs):
        return float(build(*(Tensor(x) for x in xs)).data)

    numeric = numeric_grad(f, [a.copy() for a in arrays], h)
    return max(rel_error(x, y) for x, y in zip(analytic, numeric))


def make_dataset(X, y, num_classes=None, domain="source", prefix="s"):
    X = np.asarray(X, dtype=float)
    ids = [f"{prefix}{i}" for i in range(len(X))]
    genes = [f"g{j}" for j in range(X.shape[1])]
    c = num_classes or int(np.max(y)) + 1
    return LabeledDataset(ExpressionMatrix(X, ids, genes), np.asarray(y), [f"c{k}" for k in range(c)], domain)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def blobs():
    """Small, easy two-domain problem: 3 classes, 12 genes, shifted target."""
    r = np.random.default_rng(7)
    centers = r.normal(0, 3, size=(3, 12))

    def draw(n, shift):
        y = np.arange(n) % 3
        return centers[y] + r.normal(size=(n, 12)) + shift, y

    xs, ys = draw(90, 0.0)
    xt, yt = draw(60, 1.5)
    return make_dataset(xs, ys, 3, "source", "s"), make_dataset(xt, yt, 3, "target", "t")


TINY_NET = dict(encoder_hidden=(16, 8), classifier_hidden=(8,), discriminator_hidden=(8,))


@pytest.fixture(scope="session")
def small_prepared():
    """Preprocessed synthetic pair small enough for multi-cell sweeps."""
    from domadapt.data import SyntheticConfig, generate_synthetic
    from domadapt.harness import prepare

    src, tgt = generate_synthetic(SyntheticConfig(num_genes=20, num_classes=3, n_source=210, n_target=210, seed=2))
    return prepare(src, tgt, split_seed=0, log_transform=False)


@pytest.fixture
def tiny_cfg():
    from domadapt.adaptation import TrainConfig

    return TrainConfig(epochs=2, batch_size=16, lr=1e-3, critic_steps=2, **TINY_NET)
