"""Acceptance checks at their stated tolerances.

Each check prints one ``[PASS]``/``[FAIL]`` line (visible without ``-s``) and
then asserts. The training-based checks share module-scoped sweeps so the
synthetic pair is trained once per method and seed.
"""

import json
import math
import time
import zlib

import numpy as np
import pytest

from domadapt.adaptation import (
    TrainConfig,
    _critic_objective_fused,
    dann_domain_loss,
    gradient_penalty,
    new_model,
    penalty_terms,
)
from domadapt.autodiff import Tensor, adam_step, backward, grad, ops, zero_grad
from domadapt.bec import BatchDesign, combat_fit, combat_fit_adjust, limma_remove_batch
from domadapt.cli import main
from domadapt.data import SyntheticConfig, generate_synthetic
from domadapt.harness import (
    ALL_METHODS,
    DEFAULT_SEEDS,
    SOURCE_GRID,
    TARGET_GRID,
    SweepOptions,
    cell_seed,
    make_cells,
    prepare,
    run_full_data,
    run_source_sweep,
    run_target_sweep,
)
from domadapt.metrics import domain_probe, mmd_rbf
from domadapt.models import classify, discriminate, embed, encode

from .conftest import check_grad, numeric_grad, rel_error
from .test_autodiff import PRIMITIVES

# Desk-scale schedule: 20 epochs with the encoder and classifier at lr 1e-3 stand in for
# 200 epochs at 1e-4; the discriminator/critic keeps the default 1e-4 (see README).
ACCEPT_CFG = TrainConfig(epochs=20, lr=1e-3, critic_lr=1e-4)
ADAPTIVE = ("dann_unsup", "dann_sup", "wass_unsup", "wass_sup")


@pytest.fixture(scope="module")
def emit(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _emit(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return _emit


@pytest.fixture(scope="module")
def default_pair():
    return generate_synthetic(SyntheticConfig())


@pytest.fixture(scope="module")
def prepared(default_pair):
    src, tgt = default_pair
    return prepare(src, tgt, split_seed=0, log_transform=False)


@pytest.fixture(scope="module")
def full_sweep(prepared):
    start = time.perf_counter()
    res = run_full_data(("target_only",) + ADAPTIVE, prepared, ACCEPT_CFG, seeds=DEFAULT_SEEDS)
    return res, time.perf_counter() - start


def _mean(res, method, value=None):
    return res.mean_accuracy(method, value)


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_user_matrix_pipeline(tmp_path, emit):
    """Full-scale tables need external cohorts; what is checked is the documented file pipeline."""
    from pathlib import Path

    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "synthetic": {"num_genes": 12, "num_classes": 3, "n_source": 90, "n_target": 90},
        "train": {"epochs": 2, "encoder_hidden": [8], "classifier_hidden": [4], "discriminator_hidden": [4]},
    }))
    rc_synth = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")])
    files = [f'data.{k}="{tmp_path / "d" / (k + ".csv")}"' for k in
             ("source_matrix", "source_labels", "target_matrix", "target_labels")]
    sets = sum((["--set", s] for s in files + ["data.log_transform=false"]), [])
    rc_train = main(["train", "--config", str(cfg), *sets, "--out", str(tmp_path / "r")])
    ok = rc_synth == 0 and rc_train == 0 and (tmp_path / "r" / "model.npz").exists() and "not reproducible" in readme
    emit(1, "user-supplied matrices train end to end; desk-scale disclaimer documented", ok,
         f"synth rc={rc_synth}, train rc={rc_train}")
    assert ok


# -- 2 ------------------------------------------------------------------------------


def _composite_dann(model, xs, ys, xt, lam):
    m = len(xs)
    z = encode(model, np.concatenate([xs, xt]), training=True)
    z_s, z_t = ops.slice_rows(z, 0, m), ops.slice_rows(z, m, 2 * m)
    cls = ops.softmax_cross_entropy(classify(model, z_s, training=True), ys)
    dom = dann_domain_loss(discriminate(model, z_s), discriminate(model, z_t))
    return ops.sub(cls, ops.mul(dom, lam))


def _composite_wass(model, xs, ys, xt, lam, eps, sigma=10.0):
    m = len(xs)
    z = encode(model, np.concatenate([xs, xt]), training=True)
    z_s, z_t = ops.slice_rows(z, 0, m), ops.slice_rows(z, m, 2 * m)
    cls = ops.softmax_cross_entropy(classify(model, z_s, training=True), ys)
    signal = ops.sub(ops.mean(discriminate(model, z_s)), ops.mean(discriminate(model, z_t)))
    # interpolates stay attached to the encoder so the penalty's double backprop reaches every parameter
    z_hat = ops.add(ops.mul(z_s, Tensor(eps[:, None])), ops.mul(z_t, Tensor(1.0 - eps[:, None])))
    gp, _ = penalty_terms(lambda z_: discriminate(model, z_), z_hat, sigma)
    return ops.add(ops.add(cls, ops.mul(signal, lam)), gp)


def test_criterion_2_gradients_match_finite_differences(emit):
    start = time.perf_counter()
    prim_worst = 0.0
    for name, make, fn in PRIMITIVES:
        r = np.random.default_rng(zlib.crc32(name.encode()))
        prim_worst = max(prim_worst, max(check_grad(fn, make(r)) for _ in range(2)))
    worst = {"dann": 0.0, "wass": 0.0}
    instances = 50
    for kind in worst:
        for i in range(instances):
            r = np.random.default_rng(1000 * (kind == "wass") + i)
            g, m, c = int(r.integers(3, 21)), int(r.integers(2, 9)), int(r.integers(2, 4))
            cfg = TrainConfig(seed=i, encoder_hidden=(6, 5), classifier_hidden=(4,), discriminator_hidden=(4,))
            model = new_model(f"{kind}_sup", g, c, cfg)
            xs, xt = r.normal(size=(m, g)), r.normal(size=(m, g)) + 0.5
            ys, lam, eps = r.integers(0, c, m), float(r.uniform(0.1, 2.0)), r.uniform(size=m)
            if kind == "dann":
                loss = lambda: _composite_dann(model, xs, ys, xt, lam)  # noqa: E731
            else:
                loss = lambda: _composite_wass(model, xs, ys, xt, lam, eps)  # noqa: E731
            params = list(model.named_parameters().values())
            for p in params:
                # move off the zero-bias init, where an all-zero latent row sits on the critic's kink
                p.data += r.normal(0, 0.1, p.shape)
            analytic = [t.data for t in grad(loss(), params)]
            numeric = numeric_grad(lambda *_: loss().item(), [p.data for p in params])
            err = rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))
            worst[kind] = max(worst[kind], err)
    elapsed = time.perf_counter() - start
    ok = max(prim_worst, *worst.values()) < 1e-4 and elapsed < 60
    emit(2, "reverse mode vs central differences (h=1e-5), rel err < 1e-4, < 60 s", ok,
         f"{len(PRIMITIVES)} primitives worst {prim_worst:.1e}; {instances} DANN composites worst {worst['dann']:.1e}; "
         f"{instances} Wasserstein+GP composites worst {worst['wass']:.1e}; {elapsed:.1f} s")
    assert ok


# -- 3 ------------------------------------------------------------------------------


def test_criterion_3_penalty_oracle(emit):
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        k = int(r.integers(2, 10))
        w = Tensor(r.normal(size=k) * r.uniform(0.2, 3.0), requires_grad=True)
        sigma = float(r.uniform(1, 20))
        z = Tensor(r.normal(size=(int(r.integers(2, 9)), k)), requires_grad=True)
        gp = gradient_penalty(lambda x: ops.matmul(x, ops.reshape(w, (k, 1))), z, sigma)
        (g,) = grad(gp, [w])
        n = np.linalg.norm(w.data)
        worst = max(worst, abs(gp.item() - sigma * (n - 1) ** 2))
        worst = max(worst, np.abs(g.data - 2 * sigma * (n - 1) * w.data / n).max())
    ok = worst < 1e-8
    emit(3, "linear-critic penalty value and gradient match closed forms to 1e-8", ok, f"max abs err {worst:.1e}")
    assert ok


# -- 4 ------------------------------------------------------------------------------


def test_criterion_4_lipschitz_enforcement(emit):
    """Critic-only training on fixed latents: two 256-d Gaussian clouds whose means are 2 apart.

    For clouds separated by distance d the penalised optimum has slope about
    ``1 + d / (2 sigma)``, so moderate separation is what makes the [0.8, 1.2]
    band reachable. A run stops once the 50-step mean norm has stayed in the
    band for 500 steps, or at the 2000-step budget.
    """
    start = time.perf_counter()
    summary = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        model = new_model("wass_unsup", 10, 2, TrainConfig(seed=seed))
        u = r.normal(size=256)
        z_s = r.normal(size=(2048, 256))
        z_t = r.normal(size=(2048, 256)) + 2.0 * u / np.linalg.norm(u)
        params = model.discriminator.parameters()
        norms, inside, entered = [], 0, None
        for step in range(1, 2001):
            zs, zt = z_s[r.integers(0, 2048, 64)], z_t[r.integers(0, 2048, 64)]
            objective, _, n = _critic_objective_fused(model, zs, zt, 10.0, r)
            zero_grad(params)
            backward(objective)
            adam_step(params, 1e-4)
            norms.append(n.mean())
            window = float(np.mean(norms[-50:]))
            inside = inside + 1 if step >= 50 and 0.8 <= window <= 1.2 else 0
            if inside == 1:
                entered = step
            if inside >= 500:
                break
        summary.append((float(norms[0]), entered if inside else None, window))
    elapsed = time.perf_counter() - start
    ok = all(e is not None and 0.8 <= w <= 1.2 for _, e, w in summary) and elapsed < 120
    detail = "; ".join(f"seed {i}: start {n0:.2f}, in band from step {e}, final {w:.3f}" for i, (n0, e, w) in enumerate(summary))
    emit(4, "critic interpolate gradient norm driven into [0.8, 1.2] within 2000 steps, 5/5 seeds, < 120 s", ok,
         f"{detail}; {elapsed:.0f} s")
    assert ok


# -- 5 ------------------------------------------------------------------------------


def test_criterion_5_full_data_ordering(full_sweep, emit):
    res, elapsed = full_sweep
    means = {m: _mean(res, m) for m in ("target_only",) + ADAPTIVE}
    high = all(means[m] >= 0.90 for m in ("dann_sup", "wass_sup", "target_only"))
    low = all(means[m] <= means["target_only"] - 0.10 for m in ("dann_unsup", "wass_unsup"))
    ok = high and low and elapsed < 15 * 60
    emit(5, "full data: sup DANN, sup Wasserstein, target-only >= 0.90; unsup variants >= 10 pts below target-only", ok,
         ", ".join(f"{m} {100 * v:.1f}" for m, v in means.items()) + f"; {elapsed / 60:.1f} min")
    assert ok


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_low_target_gap(prepared, emit):
    start = time.perf_counter()
    res = run_target_sweep(("target_only", "dann_sup", "wass_sup"), prepared, ACCEPT_CFG, seeds=DEFAULT_SEEDS,
                           grid=(0.02, 0.2), options=SweepOptions(diagnostics=False))
    elapsed = time.perf_counter() - start
    gap = {(m, p): _mean(res, m, p) - _mean(res, "target_only", p) for m in ("dann_sup", "wass_sup") for p in (0.02, 0.2)}
    ok = all(gap[m, 0.02] >= 0.10 and gap[m, 0.2] < 0.05 for m in ("dann_sup", "wass_sup")) and elapsed < 20 * 60
    detail = "; ".join(
        f"p={p}: target_only {100 * _mean(res, 'target_only', p):.1f}, dann_sup {100 * _mean(res, 'dann_sup', p):.1f}, "
        f"wass_sup {100 * _mean(res, 'wass_sup', p):.1f}" for p in (0.02, 0.2)
    )
    emit(6, "p=0.02 sup variants >= 10 pts above target-only; gap < 5 pts at p=0.2", ok,
         f"{detail}; {elapsed / 60:.1f} min")
    assert ok


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_low_source_stability(prepared, emit):
    start = time.perf_counter()
    cfg = TrainConfig(epochs=200, lr=1e-3, critic_lr=1e-4)
    q_lo, q_hi = 0.005, max(SOURCE_GRID)
    opts = SweepOptions(diagnostics=False, fixed_p=0.01)
    res = run_source_sweep(("dann_sup", "wass_sup"), prepared, cfg, seeds=DEFAULT_SEEDS, grid=(q_lo, q_hi), options=opts)
    only = run_source_sweep(("target_only",), prepared, cfg, seeds=DEFAULT_SEEDS, grid=SOURCE_GRID, options=opts)
    elapsed = time.perf_counter() - start
    drift = {m: abs(_mean(res, m, q_hi) - _mean(res, m, q_lo)) for m in ("dann_sup", "wass_sup")}
    invariant = all(len({r["accuracy"] for r in only.records if r["seed"] == s}) == 1 for s in DEFAULT_SEEDS)
    ok = all(d <= 0.05 for d in drift.values()) and invariant and elapsed < 15 * 60
    detail = "; ".join(f"{m} q={q_lo}: {100 * _mean(res, m, q_lo):.1f}, q={q_hi}: {100 * _mean(res, m, q_hi):.1f}"
                       for m in drift)
    emit(7, "p=0.01: sup adaptive accuracy at largest q within 5 pts of q=0.005; target-only exactly q-invariant", ok,
         f"{detail}; target-only invariant={invariant}; {elapsed / 60:.1f} min")
    assert ok


# -- 8 ------------------------------------------------------------------------------


def test_criterion_8_alignment(prepared, full_sweep, emit):
    res, _ = full_sweep
    s_te, t_te = prepared.source_test, prepared.target_test
    raw_probe = domain_probe(s_te.X, t_te.X)
    worst_probe, worst_ratio = 0.0, 0.0
    per_variant = {}
    for method in ADAPTIVE:
        probes, ratios = [], []
        for rec in (r for r in res.records if r["method"] == method):
            init = new_model(method, s_te.X.shape[1], s_te.num_classes,
                             TrainConfig.from_dict({**ACCEPT_CFG.to_dict(), "seed": cell_seed(0, rec["seed"])}))
            raw_mmd = mmd_rbf(embed(init, s_te.X), embed(init, t_te.X))
            probes.append(rec["domain_probe"])
            ratios.append(rec["mmd"] / raw_mmd)
        per_variant[method] = (max(probes), max(ratios))
        worst_probe, worst_ratio = max(worst_probe, max(probes)), max(worst_ratio, max(ratios))
    ok = raw_probe >= 0.95 and worst_probe <= 0.65 and worst_ratio <= 0.25
    detail = f"raw-input probe {raw_probe:.3f}; " + "; ".join(
        f"{m} probe<={p:.3f} mmd ratio<={q:.2f}" for m, (p, q) in per_variant.items())
    emit(8, "raw probe >= 0.95; adapted-latent probe <= 0.65 and MMD <= 25% of raw-latent MMD", ok, detail)
    assert ok


# -- 9 ------------------------------------------------------------------------------


def _naive_combat(X, batch, tol=1e-12, max_iter=10_000):
    """Per-gene loops over the textbook parametric empirical-Bayes estimates."""
    n, g = X.shape
    levels = sorted(set(batch.tolist()))
    rows = [np.flatnonzero(batch == b) for b in levels]
    out = np.empty_like(X)
    grand = np.array([np.mean(X[:, j]) for j in range(g)])
    var = np.array([sum((X[i, j] - X[r, j].mean()) ** 2 for r in rows for i in r) / n for j in range(g)])
    s = (X - grand) / np.sqrt(var)
    gam = np.array([[s[r, j].mean() for j in range(g)] for r in rows])
    dlt = np.array([[s[r, j].var(ddof=1) for j in range(g)] for r in rows])
    for k, r in enumerate(rows):
        gbar, t2 = gam[k].mean(), gam[k].var(ddof=1)
        mu, v = dlt[k].mean(), dlt[k].var(ddof=1)
        a, b = (2 * v + mu**2) / v, (mu * v + mu**3) / v
        for j in range(g):
            gs, ds = gam[k, j], dlt[k, j]
            for _ in range(max_iter):
                g_new = (t2 * len(r) * gam[k, j] + ds * gbar) / (t2 * len(r) + ds)
                d_new = (0.5 * np.sum((s[r, j] - g_new) ** 2) + b) / (len(r) / 2 + a - 1)
                done = abs(g_new - gs) / abs(gs) < tol and abs(d_new - ds) / abs(ds) < tol
                gs, ds = g_new, d_new
                if done:
                    break
            out[r, j] = (s[r, j] - gs) / np.sqrt(ds) * np.sqrt(var[j]) + grand[j]
    return out


def test_criterion_9_batch_correction_oracles(emit):
    r = np.random.default_rng(9)
    base = r.normal(size=(120, 40)) + r.normal(size=40)
    batch = np.repeat([0, 1, 2], 40)
    offsets = r.normal(0, 2, size=(3, 40))
    additive = base + offsets[batch]
    lim = limma_remove_batch(additive, BatchDesign(batch))
    gap = max(np.abs(lim[batch == i].mean(0) - lim[batch == j].mean(0)).max() for i in range(3) for j in range(i))
    # the injected offsets leave no trace beyond one overall level per gene
    resid = lim - limma_remove_batch(base, BatchDesign(batch))
    exact = np.abs(resid - resid.mean(0)).max()
    idem = np.abs(limma_remove_batch(lim, BatchDesign(batch)) - lim).max()
    D = np.column_stack([np.ones(120), batch == 1, batch == 2]).astype(float)
    beta = np.linalg.solve(D.T @ D, D.T @ additive)
    effects = D[:, 1:] @ beta[1:] - (D[:, 1:] @ beta[1:]).mean(0)
    ols_err = np.abs(lim - (additive - effects)).max()

    scales = np.exp(r.normal(0, 0.4, size=(3, 40)))
    mixed = (base - base.mean(0)) * scales[batch] + base.mean(0) + offsets[batch]
    com = combat_fit_adjust(mixed, BatchDesign(batch))
    before = np.mean([np.abs(mixed[batch == i].mean(0) - mixed[batch == 0].mean(0)).mean() for i in (1, 2)])
    after = np.mean([np.abs(com[batch == i].mean(0) - com[batch == 0].mean(0)).mean() for i in (1, 2)])
    reduction = 1 - after / before
    # batch-level spread: average per-gene variance of each batch against the reference batch
    spread = lambda X: np.array([X[batch == i].var(0, ddof=1).mean() / X[batch == 0].var(0, ddof=1).mean() for i in (1, 2)])  # noqa: E731
    ratios, ratios_before = spread(com), spread(mixed)
    oracle_err = np.abs(combat_fit_adjust(mixed, BatchDesign(batch), tol=1e-12, max_iter=10_000)
                        - _naive_combat(mixed, batch)).max()
    fitted = combat_fit(mixed, BatchDesign(batch))
    s = (mixed - mixed.mean(0)) / np.sqrt(fitted.var_pooled)
    moment_err = max(np.abs(fitted.gamma_hat[k] - s[batch == k].mean(0)).max() for k in range(3))

    ok = (gap < 1e-9 and exact < 1e-9 and idem < 1e-9 and ols_err < 1e-9 and reduction >= 0.90
          and ratios.min() >= 0.8 and ratios.max() <= 1.25 and oracle_err < 1e-6 and moment_err < 1e-6)
    emit(9, "limma exact on offsets and idempotent; ComBat gap reduction >= 90%, variance ratios in [0.8, 1.25]; oracles", ok,
         f"limma gap {gap:.1e}, offset residue {exact:.1e}, idempotence {idem:.1e}, OLS err {ols_err:.1e}; ComBat reduction {100 * reduction:.1f}%, "
         f"var ratios {np.round(ratios, 3).tolist()} (before {np.round(ratios_before, 3).tolist()}), naive-EB err {oracle_err:.1e}, moment err {moment_err:.1e}")
    assert ok


# -- 10 -----------------------------------------------------------------------------


def test_criterion_10_determinism_and_harness(tmp_path, emit, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "synthetic": {"num_genes": 15, "num_classes": 3, "n_source": 150, "n_target": 150},
        "train": {"epochs": 2, "batch_size": 16, "critic_steps": 2, "encoder_hidden": [12, 8],
                  "classifier_hidden": [6], "discriminator_hidden": [6]},
        "sweep": {"kind": "target", "methods": ["target_only", "combat", "dann_sup", "wass_unsup"],
                  "seeds": [0, 1], "grid": [0.1, 0.2]},
    }))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    manifest = tmp_path / "a" / "manifest.json"
    assert main(["sweep", "--config", str(manifest), "--out", str(tmp_path / "b")]) == 0
    assert main(["sweep", "--config", str(manifest), "--jobs", "2", "--out", str(tmp_path / "c")]) == 0
    results = [(tmp_path / d / "results.csv").read_bytes() for d in "abc"]
    same_manifest = results[0] == results[1]
    jobs_invariant = results[0] == results[2]
    # interrupted run: drop half the markers, then resume
    cells = sorted((tmp_path / "b" / "cells").glob("*.json"))
    for p in cells[::2]:
        p.unlink()
    capsys.readouterr()
    assert main(["sweep", "--config", str(manifest), "--out", str(tmp_path / "b")]) == 0
    resumed_line = capsys.readouterr().out.strip().splitlines()[-1]
    recomputed = int(resumed_line.split("(")[1].split()[0])
    resumed_ok = recomputed == len(cells[::2]) and (tmp_path / "b" / "results.csv").read_bytes() == results[0]
    counts = (len(make_cells("target_sweep", ALL_METHODS, TARGET_GRID, DEFAULT_SEEDS)),
              len(TARGET_GRID), len(DEFAULT_SEEDS), TARGET_GRID[0], TARGET_GRID[-1])
    counts_ok = counts == (800, 20, 5, 0.01, 0.2) and all(
        math.isclose(b - a, 0.01) for a, b in zip(TARGET_GRID, TARGET_GRID[1:]))
    ok = same_manifest and jobs_invariant and resumed_ok and counts_ok
    emit(10, "same manifest -> identical results.csv; --jobs invariant; resume recomputes only missing cells; grids", ok,
         f"manifest rerun identical={same_manifest}, jobs=2 identical={jobs_invariant}, "
         f"resume recomputed {recomputed}/{len(cells)} identical={resumed_ok}, "
         f"target grid {counts[1]} points x {counts[2]} seeds x 8 methods = {counts[0]} cells")
    assert ok
