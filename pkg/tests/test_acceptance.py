"""End-to-end acceptance suite.

One test per release criterion; each prints a single PASS/FAIL line with the
measured quantity (visible under ``pytest -s`` or in failure output).  The
dataset-backed reproduction is skipped honestly when the IDX files are not
available in this environment.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from fedvem.baselines import BaselineConfig, proximal_grads, run_baseline
from fedvem.data import (Dataset, PartitionSpec, SynthSpec, load_idx,
                         make_partition, slice_sizes, synth_pair)
from fedvem.federation import TrainConfig, run_training, serialize_upload
from fedvem.metrics import sem, write_report
from fedvem.nn import backward, cross_entropy, forward, init_mlp
from fedvem.variational import (IsotropicPrior, VariationalPosterior,
                                confidence, kl_to_prior, mc_local_loss)

from helpers import central_diff, flatten_params, golden_max, rel_err, unflatten_params


def verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[ACCEPTANCE {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. gradient correctness: MC local objective and proximal objective vs
#    central finite differences on 100+ coordinates.

def test_criterion_1_gradient_correctness():
    start = time.monotonic()
    rng = np.random.default_rng(11)

    base = init_mlp(6, (8,), 7, rng).base       # feature width 8
    d = 7 * (8 + 1)                              # 63 head coords, 126 with pi
    batch = rng.standard_normal((12, 6))
    labels = rng.integers(0, 7, size=12)
    post = VariationalPosterior(mu=rng.standard_normal(d) * 0.3,
                                pi=rng.uniform(-1.5, 0.5, size=d))
    prior = IsotropicPrior(center=rng.standard_normal(d) * 0.3, tau=1.7)
    noise = rng.standard_normal((3, d))

    _, g_mu, g_pi = mc_local_loss(post, prior, batch, labels, base, K=3,
                                  noise=noise)
    analytic = np.concatenate([g_mu, g_pi])

    def objective(vec):
        p = VariationalPosterior(mu=vec[:d], pi=vec[d:])
        return mc_local_loss(p, prior, batch, labels, base, K=3, noise=noise)[0]

    numeric = central_diff(objective, np.concatenate([post.mu, post.pi]))
    err_mc = rel_err(analytic, numeric)

    params = init_mlp(6, (8,), 7, rng)           # 127 parameters
    anchor = init_mlp(6, (8,), 7, rng)
    mu_prox = 0.8
    grads = backward(params, batch, labels,
                     extra_loss_grads=proximal_grads(params, anchor, mu_prox))
    a_vec = flatten_params(anchor)

    def prox_objective(vec):
        p = unflatten_params(vec, params)
        return (cross_entropy(forward(p, batch), labels)
                + mu_prox / 2 * float(((vec - a_vec) ** 2).sum()))

    numeric_px = central_diff(prox_objective, flatten_params(params))
    err_px = rel_err(flatten_params(grads), numeric_px)

    elapsed = time.monotonic() - start
    coords = analytic.size + numeric_px.size
    ok = err_mc <= 1e-4 and err_px <= 1e-4 and elapsed < 60
    verdict(1, "gradient correctness", ok,
            f"mc rel err {err_mc:.2e}, prox rel err {err_px:.2e}, "
            f"{coords} coords, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. closed-form KL vs a 10^6-sample Monte-Carlo estimate of E_q[ln q - ln p].

def test_criterion_2_kl_oracle():
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng([22, i])
        d = int(rng.integers(1, 11))
        post = VariationalPosterior(mu=rng.standard_normal(d),
                                    pi=rng.uniform(-1.0, 1.0, size=d))
        prior = IsotropicPrior(center=rng.standard_normal(d),
                               tau=float(rng.uniform(0.3, 3.0)))
        exact = kl_to_prior(post, prior)

        sigma = post.sigma
        x = post.mu + sigma * rng.standard_normal((1_000_000, d))
        ln_q = (-0.5 * ((x - post.mu) / sigma) ** 2 - np.log(sigma)
                - 0.5 * np.log(2 * np.pi)).sum(axis=1)
        rho2 = 1.0 / prior.tau
        ln_p = (-0.5 * (x - prior.center) ** 2 / rho2 - 0.5 * np.log(rho2)
                - 0.5 * np.log(2 * np.pi)).sum(axis=1)
        mc = float((ln_q - ln_p).mean())
        worst = max(worst, abs(mc - exact) / abs(exact))
    ok = worst <= 0.01
    verdict(2, "closed-form KL vs MC oracle", ok,
            f"worst rel err {worst:.4f} over 20 instances")


# ---------------------------------------------------------------------------
# 3. closed-form server updates vs independent numerical maximization of the
#    server objective over (w, per-client prior variances).

def server_objective(w, rho2s, mus, traces, d):
    total = 0.0
    for mu, tr, r2 in zip(mus, traces, rho2s):
        dev = float(((mu - w) ** 2).sum())
        total += -(d / 2) * np.log(2 * np.pi * r2) - (tr + dev) / (2 * r2)
    return total


def test_criterion_3_server_stationarity():
    start = time.monotonic()
    worst = 0.0
    for i in range(10):
        rng = np.random.default_rng([33, i])
        d = int(rng.integers(1, 6))
        J = int(rng.integers(2, 5))
        mus = [rng.standard_normal(d) for _ in range(J)]
        posts = [VariationalPosterior(mu=mu, pi=rng.uniform(-1, 1, size=d))
                 for mu in mus]
        traces = [p.trace() for p in posts]

        # closed-form alternation: confidence weights then weighted mean
        w = np.mean(mus, axis=0)
        for _ in range(500):
            taus = [confidence(p, w).tau for p in posts]
            w_new = (np.array(taus)[:, None] * np.stack(mus)).sum(axis=0) / sum(taus)
            if np.abs(w_new - w).max() < 1e-14:
                w = w_new
                break
            w = w_new
        taus = [confidence(p, w).tau for p in posts]
        rho2_closed = [1.0 / t for t in taus]

        # independent numerical maximization, golden-section per coordinate
        w_num = np.mean(mus, axis=0)
        rho2_num = [1.0 for _ in range(J)]
        lo = min(mu.min() for mu in mus) - 2.0
        hi = max(mu.max() for mu in mus) + 2.0
        for _ in range(300):
            delta = 0.0
            for j in range(J):
                t = golden_max(
                    lambda lr2, j=j: server_objective(
                        w_num, rho2_num[:j] + [np.exp(lr2)] + rho2_num[j + 1:],
                        mus, traces, d),
                    np.log(1e-8), np.log(1e8))
                new = float(np.exp(t))
                delta = max(delta, abs(new - rho2_num[j]))
                rho2_num[j] = new
            for c in range(d):
                def along(v, c=c):
                    w_try = w_num.copy()
                    w_try[c] = v
                    return server_objective(w_try, rho2_num, mus, traces, d)
                new = golden_max(along, lo, hi)
                delta = max(delta, abs(new - w_num[c]))
                w_num[c] = new
            if delta < 1e-9:
                break

        worst = max(worst, rel_err(w_num, w), rel_err(rho2_num, rho2_closed))
    elapsed = time.monotonic() - start
    ok = worst <= 1e-6 and elapsed < 60
    verdict(3, "server-update stationarity", ok,
            f"worst rel err {worst:.2e} over 10 instances, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. partition properties over 1000 seeds per scenario.

def test_criterion_4_partition_properties():
    rng = np.random.default_rng(44)
    n, classes, subs_per = 400, 5, 3
    labels = rng.integers(0, classes, size=n)
    subclasses = labels * subs_per + rng.integers(0, subs_per, size=n)
    ds = Dataset(images=rng.random((n, 3)), labels=labels, classes=classes,
                 subclasses=subclasses)

    checked = 0
    for scenario in ("label_skew", "concept_drift", "quantity_only", "iid_equal"):
        for seed in range(1000):
            spec = PartitionSpec(scenario=scenario, clients=6,
                                 labels_per_client=3, seed=seed)
            make_partition(ds, spec).validate(n)   # disjoint/covering/nonempty
            checked += 1

    sums_exact = True
    pooled = []
    for seed in range(1000):
        r = np.random.default_rng(seed)
        sizes = slice_sizes(60000, 100, r)
        sums_exact &= int(sizes.sum()) == 60000 and sizes.min() >= 1
        pooled.extend(sizes.tolist())
    pooled = np.array(pooled)
    skewed = np.median(pooled) < pooled.mean()

    ok = checked == 4000 and sums_exact and skewed
    verdict(4, "partition properties", ok,
            f"{checked} partitions valid, slice sums exact={sums_exact}, "
            f"median {np.median(pooled):.0f} < mean {pooled.mean():.0f}")


# ---------------------------------------------------------------------------
# 5 + 7. synthetic heterogeneous benchmark: shared across the ordering and
# ablation criteria (J=50 clients, T=50 rounds, 5 seeds per scheme).

SEEDS = (0, 1, 2, 3, 4)
HIDDEN = (32,)


def bench_datasets(seed):
    train, test = synth_pair(SynthSpec(seed=seed))
    part = make_partition(train, PartitionSpec(scenario="concept_drift",
                                               clients=50, seed=seed))
    return train, test, part


def run_pfedvem_seed(seed, mode="full"):
    train, test, part = bench_datasets(seed)
    cfg = TrainConfig(T=50, R=10, K=5, eta=0.01, base_lr=0.01, base_epochs=5,
                      base_batch=50, s=0.1, rho0_sq=0.1, seed=seed,
                      hidden=HIDDEN, confidence_mode=mode)
    _, _, reports = run_training(cfg, train, test, part)
    return reports[-1].mean_pm()


def run_baseline_seed(seed, scheme):
    train, test, part = bench_datasets(seed)
    if scheme == "local":
        cfg = BaselineConfig(scheme="local", lr=0.01, epochs=20, batch=50,
                             seed=seed, hidden=HIDDEN)
    else:
        cfg = BaselineConfig(scheme="fedavg", lr=0.01, epochs=5, batch=50,
                             T=50, s=0.1, seed=seed, hidden=HIDDEN)
    reports = run_baseline(cfg, train, test, part)
    return reports[-1].mean_pm()


@pytest.fixture(scope="module")
def bench_results():
    start = time.monotonic()
    out = {
        "pfedvem": [run_pfedvem_seed(s) for s in SEEDS],
        "local": [run_baseline_seed(s, "local") for s in SEEDS],
        "fedavg": [run_baseline_seed(s, "fedavg") for s in SEEDS],
    }
    out["elapsed"] = time.monotonic() - start
    return out


def margin_ok(a, b):
    """mean(a) beats mean(b) by more than twice the combined SEM."""
    gap = float(np.mean(a) - np.mean(b))
    return gap, gap > 2 * np.hypot(sem(a), sem(b))


def test_criterion_5_synthetic_ordering(bench_results):
    pm, local, fedavg = (bench_results["pfedvem"], bench_results["local"],
                         bench_results["fedavg"])
    gap_l, ok_l = margin_ok(pm, local)
    gap_f, ok_f = margin_ok(pm, fedavg)
    elapsed = bench_results["elapsed"]
    ok = ok_l and ok_f and elapsed < 900
    verdict(5, "synthetic heterogeneous ordering", ok,
            f"pm {np.mean(pm):.3f}±{sem(pm):.3f} vs local {np.mean(local):.3f} "
            f"(gap {gap_l:.3f}) vs fedavg-per-client {np.mean(fedavg):.3f} "
            f"(gap {gap_f:.3f}), {elapsed:.0f}s")


def test_criterion_7_confidence_ablations(bench_results):
    full = bench_results["pfedvem"]
    unc = [run_pfedvem_seed(s, mode="uncertainty_only") for s in SEEDS]
    dev = [run_pfedvem_seed(s, mode="deviation_only") for s in SEEDS]
    m_full, m_unc, m_dev = (float(np.mean(v)) for v in (full, unc, dev))
    # non-binding trend log: ablations are expected to trail the full mode
    trend = "matches" if m_full >= max(m_unc, m_dev) else "does not match"
    ok = m_full >= m_unc - 0.005 and m_full >= m_dev - 0.005
    verdict(7, "confidence ablations", ok,
            f"full {m_full:.3f}, uncertainty_only {m_unc:.3f}, "
            f"deviation_only {m_dev:.3f}; expected trend {trend}")


# ---------------------------------------------------------------------------
# 6. dataset-backed reproduction (needs the FMNIST IDX files on disk).

def fmnist_dir():
    env = os.environ.get("FVEM_FMNIST_DIR")
    return Path(env) if env else Path(__file__).resolve().parent.parent / "data" / "fmnist"


FMNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def test_criterion_6_fmnist_table():
    root = fmnist_dir()
    if not all((root / f).exists() for f in FMNIST_FILES):
        print(f"[ACCEPTANCE 6] FMNIST reproduction: SKIP "
              f"(IDX files not found under {root}; set FVEM_FMNIST_DIR)")
        pytest.skip(f"FMNIST IDX files not available under {root}")

    train = load_idx(root / FMNIST_FILES[0], root / FMNIST_FILES[1])
    test = load_idx(root / FMNIST_FILES[2], root / FMNIST_FILES[3])
    seeds = SEEDS
    pm_vals, gm_vals, fa_gm, local_pm = [], [], [], []
    for seed in seeds:
        part = make_partition(train, PartitionSpec(
            scenario="label_skew", clients=100, labels_per_client=5, seed=seed))
        cfg = TrainConfig(T=100, R=10, K=5, eta=0.001, base_lr=0.01,
                          base_epochs=5, base_batch=50, s=0.1, rho0_sq=0.1,
                          seed=seed, hidden=(100,))
        _, _, reports = run_training(cfg, train, test, part)
        pm_vals.append(reports[-1].mean_pm())
        gm_vals.append(reports[-1].gm_accuracy)
        fa = run_baseline(BaselineConfig(scheme="fedavg", lr=0.01, epochs=5,
                                         batch=50, T=100, s=0.1, seed=seed,
                                         hidden=(100,)), train, test, part)
        fa_gm.append(fa[-1].gm_accuracy)
        lo = run_baseline(BaselineConfig(scheme="local", lr=0.01, epochs=20,
                                         batch=50, seed=seed, hidden=(100,)),
                          train, test, part)
        local_pm.append(lo[-1].mean_pm())

    pm, fa, lp = (float(np.mean(v)) for v in (pm_vals, fa_gm, local_pm))
    ok = (pm >= 0.88 and abs(pm - 0.914) <= 0.035
          and abs(fa - 0.854) <= 0.03 and pm > lp)
    verdict(6, "FMNIST reproduction", ok,
            f"pm {pm:.3f}, gm {np.mean(gm_vals):.3f}, fedavg gm {fa:.3f}, "
            f"local pm {lp:.3f}")


# ---------------------------------------------------------------------------
# 8. determinism across worker counts and exact upload payload size.

def test_criterion_8_determinism_and_payload(tmp_path):
    train, test = synth_pair(SynthSpec(classes=3, subclasses_per_class=2,
                                       dim=6, points_per_subclass=30,
                                       test_points_per_subclass=10, seed=0))
    part = make_partition(train, PartitionSpec(scenario="concept_drift",
                                               clients=4, seed=0))
    cfg = TrainConfig(T=3, R=3, K=2, eta=0.01, base_lr=0.01, base_epochs=1,
                      base_batch=16, s=0.7, rho0_sq=0.1, seed=0, hidden=(5,))
    gs1, clients1, rep1 = run_training(cfg, train, test, part, workers=1)
    gs2, _, rep2 = run_training(cfg, train, test, part, workers=2)
    write_report(rep1, tmp_path / "w1.jsonl")
    write_report(rep2, tmp_path / "w2.jsonl")
    identical = (tmp_path / "w1.jsonl").read_bytes() == (tmp_path / "w2.jsonl").read_bytes()
    identical &= bool(np.array_equal(gs1.w, gs2.w))

    c = clients1[0]
    payload = serialize_upload(c.posterior.mu, c.tau, c.theta_local)
    base_params = sum(w.size + b.size for w, b in c.theta_local)
    expected = 8 * (gs1.w.size + base_params + 1)
    size_ok = len(payload) == expected

    ok = identical and size_ok
    verdict(8, "determinism and payload", ok,
            f"reports byte-identical={identical}, payload {len(payload)} "
            f"bytes == 8*(d + base + 1)={expected}")
