import numpy as np
import pytest

from dpvalue import data, dp, metrics, models
from dpvalue.valuation import RunConfig, SemivalueSpec, run_valuation


# -- AUC ---------------------------------------------------------------------


def test_auc_perfect_separation():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    mask = np.array([True, True, False, False])
    assert metrics.auc_roc(scores, mask) == 1.0
    assert metrics.auc_roc(-scores, mask) == 0.0


def test_auc_all_ties_is_half():
    assert metrics.auc_roc(np.ones(10), np.arange(10) < 4) == 0.5


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(0)
    scores = rng.standard_normal(10_000)
    mask = np.arange(10_000) < 5_000
    assert abs(metrics.auc_roc(scores, mask) - 0.5) < 0.02


def test_auc_monotone_invariance():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal(500)
    mask = rng.random(500) < 0.3
    base = metrics.auc_roc(scores, mask)
    assert metrics.auc_roc(np.exp(scores), mask) == pytest.approx(base)
    assert metrics.auc_roc(3.0 * scores + 7.0, mask) == pytest.approx(base)


def test_auc_degenerate_mask():
    with pytest.raises(ValueError):
        metrics.auc_roc(np.ones(4), np.zeros(4, dtype=bool))
    with pytest.raises(ValueError):
        metrics.auc_roc(np.ones(4), np.ones(4, dtype=bool))


def test_auc_against_rank_sum_oracle():
    # compare with the direct pairwise count, ties counted half
    rng = np.random.default_rng(9)
    scores = rng.integers(0, 5, 60).astype(float)  # force ties
    mask = rng.random(60) < 0.4
    pos = scores[mask]
    neg = scores[~mask]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert metrics.auc_roc(scores, mask) == pytest.approx(wins / (len(pos) * len(neg)))


# -- removal curve -------------------------------------------------------------


def make_removal_setup():
    ds = data.synth_classification(120, 8, 2, seed=42, separation=4.0, n_test=150)
    ds = data.partition(ds, 30, "equal-chunks")
    mspec = models.ModelSpec("logistic_l2", 0.05, models.InitSpec("zeros"), l2=0.01)
    uspec = models.UtilitySpec("test_accuracy", ds.test_features, ds.test_labels)
    ncfg = dp.NoiseConfig(1.0, 0.0, budget=150)
    cfg = RunConfig(ds, mspec, uspec, ncfg, SemivalueSpec("shapley", 30), k=150, master_seed=7)
    res = run_valuation(cfg)

    def trainer(keep, seed):
        theta = models.train_one_pass(mspec, ds.features, ds.labels, ds.party_of, keep, seed)
        return models.utility(uspec, mspec, theta)

    return ds, res.psi, trainer


def test_removal_fraction_zero_mode_independent():
    _, psi, trainer = make_removal_setup()
    hi = metrics.removal_curve(psi, 30, trainer, "highest-first", [0.0, 0.2])
    lo = metrics.removal_curve(psi, 30, trainer, "lowest-first", [0.0, 0.2])
    rnd = metrics.removal_curve(psi, 30, trainer, "random", [0.0, 0.2])
    assert hi.scores[0] == lo.scores[0] == rnd.scores[0]
    assert rnd.stderr is not None and rnd.stderr[0] == 0.0


def test_removal_highest_first_hurts_most():
    _, psi, trainer = make_removal_setup()
    hi = metrics.removal_curve(psi, 30, trainer, "highest-first", [0.0, 0.3])
    rnd = metrics.removal_curve(psi, 30, trainer, "random", [0.0, 0.3])
    assert hi.scores[1] < rnd.scores[1]


def test_removal_validation():
    _, psi, trainer = make_removal_setup()
    with pytest.raises(ValueError):
        metrics.removal_curve(psi, 30, trainer, "highest-first", [0.3, 0.1])
    with pytest.raises(ValueError):
        metrics.removal_curve(psi, 30, trainer, "sideways", [0.0])
    with pytest.raises(ValueError):
        metrics.removal_curve(psi, 30, trainer, "random", [0.0], random_seeds=2)


# -- gradient similarity -------------------------------------------------------


def test_similarity_perfect_reconstruction():
    rng = np.random.default_rng(1)
    g_hat = rng.standard_normal((20, 3, 5))
    noise = rng.standard_normal((20, 3, 5))
    rep = metrics.grad_similarity(g_hat, g_hat + noise, g_hat.copy())
    assert rep.delta_cos > 0
    assert rep.delta_l2 < 0


def test_similarity_identical_stacks_zero():
    rng = np.random.default_rng(2)
    g_hat = rng.standard_normal((10, 2, 4))
    g_tilde = g_hat + rng.standard_normal((10, 2, 4))
    rep = metrics.grad_similarity(g_hat, g_tilde, g_tilde.copy())
    assert rep.delta_cos == pytest.approx(0.0)
    assert rep.delta_l2 == pytest.approx(0.0)


def test_similarity_skips_zero_norm():
    g_hat = np.ones((2, 1, 3))
    g_tilde = np.ones((2, 1, 3))
    g_star = np.ones((2, 1, 3))
    g_hat[0, 0] = 0.0
    rep = metrics.grad_similarity(g_hat, g_tilde, g_star)
    assert rep.skipped_terms == 1


# -- closed-form noise variance -------------------------------------------------


def test_noise_var_simplest_case():
    # d=1, g=0, k=1, C*sigma=1: variance of a chi-square_1 scaled by 1 is 2
    assert metrics.noise_var_closed_form(np.zeros(1), 1, 1.0, 1.0) == pytest.approx(2.0)


def test_noise_var_monte_carlo():
    rng = np.random.default_rng(4)
    d, k, cs = 5, 10, 0.3
    g = rng.standard_normal(d)
    g *= 1.0 / np.linalg.norm(g)
    z = np.sqrt(k) * cs * rng.standard_normal((1_000_000, d))
    emp = np.sum((g + z) ** 2, axis=1).var()
    pred = metrics.noise_var_closed_form(g, k, 1.0, cs)
    assert abs(emp / pred - 1.0) < 0.02


def test_noise_var_averaged_monte_carlo():
    rng = np.random.default_rng(5)
    d, k, cs, t = 4, 12, 0.5, 6
    g = rng.standard_normal(d)
    z = np.sqrt(k / t) * cs * rng.standard_normal((1_000_000, d))
    emp = np.sum((g + z) ** 2, axis=1).var()
    pred = metrics.noise_var_closed_form(g, k, 1.0, cs, t=t)
    assert abs(emp / pred - 1.0) < 0.02


# -- N/P/Q closed forms ----------------------------------------------------------


def test_npq_harmonic_hand_sum():
    n, p, q = metrics.npq_closed_form(4, 1.0, 1.0, 0.0, d=1, q=0.0)
    assert n == pytest.approx(25.0 / 3.0)
    # P = sum d(d+2) (k/t)^2 = 3 * 16 * (1 + 1/4 + 1/9 + 1/16)
    assert p == pytest.approx(3.0 * 16.0 * sum(1.0 / t**2 for t in range(1, 5)))
    assert q == pytest.approx(np.sqrt(3.0) * 4.0 * sum(1.0 / t for t in range(1, 5)))


@pytest.mark.parametrize("sg_sq", [0.0, 0.5])
def test_npq_burn_in_drops_leading_terms(sg_sq):
    k = 8
    full = metrics.npq_closed_form(k, 1.0, 2.0, sg_sq, d=3, q=0.0)
    tail = metrics.npq_closed_form(k, 1.0, 2.0, sg_sq, d=3, q=1.0 / k)
    # q = 1/k removes exactly the t=1 term; at t=1 the implicit per-coordinate
    # variance is k(Cs)^2 regardless of sg (diagonal weight is 1)
    assert full[0] - tail[0] == pytest.approx(3 * k * 4.0)
    assert full[1] - tail[1] == pytest.approx(3 * 5 * (k * 4.0) ** 2)
    with pytest.raises(ValueError):
        metrics.npq_closed_form(8, 1.0, 1.0, 0.0, d=2, q=0.3)


def test_npq_monte_carlo():
    # simulate z_t = -zeta_t + sum_l X_tl (z_l + zeta_l) with the
    # variance-aware matrix and compare E|z_t|^2 against the closed form
    k, cs, sg_sq, d = 8, 1.0, 0.5, 3
    kcs = k * cs * cs
    reps = 1_000_000
    rng = np.random.default_rng(12)
    for t_probe in (1, 2, 8):
        x_row = np.full(t_probe, kcs / (t_probe * (kcs + sg_sq)))
        x_row[-1] = (kcs + t_probe * sg_sq) / (t_probe * (kcs + sg_sq))
        total = 0.0
        chunk = 100_000
        done = 0
        while done < reps:
            m = min(chunk, reps - done)
            z = np.sqrt(kcs) * rng.standard_normal((m, t_probe, d))
            zeta = np.sqrt(sg_sq) * rng.standard_normal((m, t_probe, d))
            zs = -zeta[:, -1, :] + np.einsum("t,mtd->md", x_row, z + zeta)
            total += np.sum(zs * zs)
            done += m
        emp = total / reps
        # per-t contribution of the closed-form N
        upto = metrics.npq_closed_form(k, 1.0, cs, sg_sq, d=d, q=0.0)[0]
        before = (
            metrics.npq_closed_form(k, 1.0, cs, sg_sq, d=d, q=0.0)[0]
            if t_probe == 1
            else None
        )
        # extract the single-t term by differencing partial sums
        def partial(tmax):
            tot = 0.0
            for t in range(1, tmax + 1):
                off = kcs / (t * (kcs + sg_sq))
                diag = (kcs + t * sg_sq) / (t * (kcs + sg_sq))
                s_t = (
                    kcs * ((t - 1) * off * off + diag * diag)
                    + sg_sq * (t - 1) * off * off
                    + (1.0 - diag) ** 2 * sg_sq
                )
                tot += d * s_t
            return tot

        pred = partial(t_probe) - partial(t_probe - 1)
        assert abs(emp / pred - 1.0) < 0.02
        assert partial(k) == pytest.approx(upto)


def test_npq_bound_from_minimum():
    # N with sigma_g = 0 stays under d*k*(C s)^2*(1 + ln k)
    for k in (10, 100, 1000):
        n, _, _ = metrics.npq_closed_form(k, 1.0, 1.0, 0.0, d=3, q=0.0)
        assert n <= 3 * k * (1.0 + np.log(k))


# -- conditional-variance probe ---------------------------------------------------


def probe_base(n_parties=6, sigma=1.0):
    ds = data.synth_classification(60, 6, 2, seed=5, separation=3.0, n_test=64)
    ds = data.partition(ds, n_parties, "equal-chunks")
    mspec = models.ModelSpec("mse_linear", 0.05, models.InitSpec("zeros"))
    uspec = models.UtilitySpec("neg_test_loss", ds.test_features, ds.test_labels)
    ncfg = dp.NoiseConfig(1.0, sigma, budget=20, mode="iid")
    return RunConfig(ds, mspec, uspec, ncfg, SemivalueSpec("shapley", n_parties),
                     k=20, master_seed=9)


def test_probe_zero_sigma_zero_variance():
    cfg = probe_base(sigma=0.0)
    scenario = metrics.freeze_scenario(cfg)
    var = metrics.conditional_variance(scenario, "iid", cfg.noise, trials=200, seed=0)
    assert var == 0.0


def test_probe_validation():
    cfg = probe_base()
    with pytest.raises(ValueError):
        metrics.variance_scaling_probe("iid", [10, 20], cfg, trials=500)
    with pytest.raises(ValueError):
        metrics.variance_scaling_probe("iid", [10, 20, 40], cfg, trials=50)
    scenario = metrics.freeze_scenario(cfg)
    with pytest.raises(ValueError):
        metrics.conditional_variance(scenario, "warp", cfg.noise, trials=200, seed=0)
    with pytest.raises(ValueError):
        metrics.conditional_variance(scenario, "corr_y", cfg.noise, trials=200, seed=0, q=0.13)


def test_probe_iid_matches_direct_simulation():
    # tiny case cross-check: replay the frozen scenario by hand
    cfg = probe_base(n_parties=3)
    scenario = metrics.freeze_scenario(cfg)
    trials, k = 400, cfg.k
    std = np.sqrt(cfg.noise.budget) * cfg.noise.clip_norm * cfg.noise.noise_multiplier
    rng = np.random.default_rng(0)
    d = scenario.theta_prev.shape[2]
    direct = []
    for j in range(3):
        psis = []
        for _ in range(trials):
            acc = 0.0
            for t in range(k):
                theta = (
                    scenario.theta_prev[t, j]
                    - scenario.lr * scenario.g_hat[t, j]
                    - scenario.lr * std * rng.standard_normal(d)
                )
                e = scenario.xt @ theta - scenario.yt
                acc += scenario.pcoefs[t, j] * (-np.mean(e * e) - scenario.v_prev[t, j])
            psis.append(acc / k)
        direct.append(np.var(psis, ddof=1))
    fast = metrics.conditional_variance(scenario, "iid", cfg.noise, trials=2000, seed=1)
    assert abs(np.mean(direct) / fast - 1.0) < 0.25  # both are MC estimates
