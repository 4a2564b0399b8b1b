"""Accuracy, alignment diagnostics and embedding export."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Tensor, adam_step, backward, no_grad, ops, zero_grad
from .data import LabeledDataset
from .models import AdaptationModel, embed

BANDWIDTH_FLOOR = 1e-6


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def domain_probe(z_s, z_t, seed: int = 0, hidden: int = 64, steps: int = 200, lr: float = 1e-2) -> float:
    """Held-out accuracy of a fresh two-layer MLP separating the two domains.

    Each domain is split 70/30; inputs are standardised with training-split
    statistics. Around 0.5 means the domains are indistinguishable.
    """
    z_s, z_t = np.asarray(z_s, dtype=np.float64), np.asarray(z_t, dtype=np.float64)
    if len(z_s) < 20 or len(z_t) < 20:
        raise ValueError(f"domain probe needs >= 20 samples per domain, got {len(z_s)} and {len(z_t)}")
    rng = np.random.default_rng(seed)

    def split(z):
        perm = rng.permutation(len(z))
        cut = int(round(0.7 * len(z)))
        return z[perm[:cut]], z[perm[cut:]]

    (s_tr, s_te), (t_tr, t_te) = split(z_s), split(z_t)
    x_tr = np.vstack([s_tr, t_tr])
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x_tr = (x_tr - mu) / sd
    d_tr = np.r_[np.ones(len(s_tr)), np.zeros(len(t_tr))]

    k = x_tr.shape[1]
    lim1, lim2 = np.sqrt(6.0 / k), np.sqrt(6.0 / hidden)
    params = [
        Parameter(rng.uniform(-lim1, lim1, (k, hidden))),
        Parameter(np.zeros(hidden)),
        Parameter(rng.uniform(-lim2, lim2, (hidden, 1))),
        Parameter(np.zeros(1)),
    ]
    w1, b1, w2, b2 = params

    def scores(x):
        return ops.affine(ops.relu(ops.affine(Tensor(x), w1, b1)), w2, b2)

    target = Tensor(d_tr[:, None])
    for _ in range(steps):
        zero_grad(params)
        s = scores(x_tr)
        # binary cross-entropy on logits
        loss = ops.mean(ops.sub(ops.softplus(s), ops.mul(s, target)))
        backward(loss)
        adam_step(params, lr)
    x_te = (np.vstack([s_te, t_te]) - mu) / sd
    d_te = np.r_[np.ones(len(s_te)), np.zeros(len(t_te))]
    with no_grad():
        pred = (scores(x_te).data[:, 0] > 0).astype(float)
    return accuracy(pred, d_te)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(z: np.ndarray) -> float:
    d = np.sqrt(_sq_dists(z, z))
    iu = np.triu_indices(len(z), k=1)
    return max(float(np.median(d[iu])), BANDWIDTH_FLOOR)


def mmd_rbf(z_s, z_t, bandwidth="median") -> float:
    """Unbiased MMD^2 with a Gaussian kernel ``exp(-d^2 / (2 * bandwidth^2))``.

    The default bandwidth is the median pairwise distance of the pooled sample.
    """
    x, y = np.asarray(z_s, dtype=np.float64), np.asarray(z_t, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("MMD needs at least 2 samples per set")
    if bandwidth == "median":
        bw = median_bandwidth(np.vstack([x, y]))
    else:
        bw = max(float(bandwidth), BANDWIDTH_FLOOR)
    gamma = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-gamma * _sq_dists(x, x))
    kyy = np.exp(-gamma * _sq_dists(y, y))
    kxy = np.exp(-gamma * _sq_dists(x, y))
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def pca(z, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the top principal axes and the (orthonormal) axes themselves."""
    z = np.asarray(z, dtype=np.float64)
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return centered @ comps.T, comps


def pca2d(z) -> np.ndarray:
    return pca(z, 2)[0]


def export_embeddings(model: AdaptationModel, datasets, path, with_pca: bool = False) -> Path:
    """Write eval-mode latents: sample_id, domain, class, z_1..z_k [, pc_1, pc_2]."""
    if isinstance(datasets, LabeledDataset):
        datasets = [datasets]
    datasets = list(datasets)
    latents = [embed(model, ds.X) for ds in datasets]
    z = np.vstack(latents) if latents else np.zeros((0, 0))
    pcs = pca2d(z) if with_pca else None
    k = z.shape[1]
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["sample_id", "domain", "class"] + [f"z_{i + 1}" for i in range(k)]
        if with_pca:
            header += ["pc_1", "pc_2"]
        w.writerow(header)
        row = 0
        for ds, lat in zip(datasets, latents):
            for sid, lab, vec in zip(ds.sample_ids, ds.labels, lat):
                extra = [repr(float(v)) for v in pcs[row]] if with_pca else []
                w.writerow([sid, ds.domain, ds.class_names[lab], *(repr(float(v)) for v in vec), *extra])
                row += 1
    return path
