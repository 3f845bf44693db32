import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mixture_eps_oracle
from quantcache.diffusion import (DiffusionSchedule, MixtureModel, PipelineConfig, SampleSet,
                                  analytic_denoiser, fit_surrogate, forward_noise, initial_noise,
                                  quantize_surrogate, responsibilities, reverse_step, sample,
                                  write_trajectories_csv)
from quantcache.experiment import fit_quantized
from quantcache.metrics import stochastically_larger, variance_density
from quantcache.numerics import make_rng


def _single(dim=4, mean=0.0, var=1.0):
    return MixtureModel(np.array([1.0]), np.full((1, dim), mean), np.array([var]))


# ---------------------------------------------------------------- schedule / mixture

def test_schedule_invariants():
    for T in (1, 10, 50, 250, 1000):
        s = DiffusionSchedule.linear(T)
        ab = s.alpha_bar
        assert ab[0] == 1.0 and np.all(np.diff(ab) < 0)
        assert np.all((ab > 0) & (ab <= 1)) and np.all((s.betas > 0) & (s.betas < 1))
    assert DiffusionSchedule.linear(50).alpha_bar[-1] < 1e-3


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        DiffusionSchedule.linear(0)
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.1]), "euler")
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.0, 0.1]))


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureModel(np.array([0.5, 0.6]), np.zeros((2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        MixtureModel(np.array([1.0]), np.zeros((1, 2)), np.array([0.0]))
    with pytest.raises(ValueError):
        MixtureModel.hypercube(dim=4, components=4)


def test_hypercube_means_orthogonal():
    mix = MixtureModel.hypercube()
    G = mix.means @ mix.means.T
    assert np.allclose(G, np.diag(np.diag(G)))
    assert np.allclose(np.abs(mix.means), 0.15)
    assert mix.weights.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------- forward process

def test_forward_noise_t0_exact():
    sched = DiffusionSchedule.linear(50)
    x0 = make_rng(0).standard_normal(16)
    assert np.array_equal(forward_noise(x0, 0, sched, make_rng(1)), x0)


def test_forward_noise_reproducible():
    sched = DiffusionSchedule.linear(50)
    a = forward_noise(np.ones(3), 20, sched, make_rng(5))
    assert np.array_equal(a, forward_noise(np.ones(3), 20, sched, make_rng(5)))


def test_forward_noise_terminal_is_standard_normal():
    sched = DiffusionSchedule.linear(50)
    x = forward_noise(np.full((10_000, 1), 0.8), 50, sched, make_rng(2))
    assert abs(x.var() - 1.0) <= 0.05


def test_forward_noise_moments():
    sched = DiffusionSchedule.linear(50)
    t = 20
    ab = sched.alpha_bar[t]
    x = forward_noise(np.full((20_000, 2), 0.5), t, sched, make_rng(3))
    assert abs(x.mean() - np.sqrt(ab) * 0.5) < 0.02
    assert abs(x.var() - (1 - ab)) < 0.03 * (1 - ab)


def test_forward_noise_range():
    with pytest.raises(ValueError):
        forward_noise(np.zeros(2), 51, DiffusionSchedule.linear(50), make_rng(0))


# ---------------------------------------------------------------- analytic denoiser

def test_single_standard_gaussian():
    sched = DiffusionSchedule.linear(50)
    x = make_rng(0).standard_normal((5, 4))
    for t in (1, 10, 50):
        eps = analytic_denoiser(x, t, _single(), sched)
        assert np.allclose(eps, x * np.sqrt(1 - sched.alpha_bar[t]), atol=1e-14)


def test_single_gaussian_closed_form():
    sched = DiffusionSchedule.linear(50)
    mix = _single(3, mean=0.4, var=0.2)
    x = make_rng(1).standard_normal((7, 3))
    t = 17
    ab = sched.alpha_bar[t]
    expect = np.sqrt(1 - ab) * (x - np.sqrt(ab) * 0.4) / (ab * 0.2 + 1 - ab)
    assert np.allclose(analytic_denoiser(x, t, mix, sched), expect, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_mixture_matches_conditioning_oracle(t, seed):
    sched = DiffusionSchedule.linear(50)
    rng = make_rng(seed)
    mix = MixtureModel(np.array([0.2, 0.5, 0.3]), rng.standard_normal((3, 4)),
                       np.array([0.05, 0.3, 1.2]))
    x = 2 * rng.standard_normal(4)
    ref = mixture_eps_oracle(x, sched.alpha_bar[t], mix.means, mix.variances, mix.weights)
    assert np.allclose(analytic_denoiser(x, t, mix, sched), ref, atol=1e-10)


def test_responsibility_at_far_component():
    sched = DiffusionSchedule.linear(50)
    means = np.array([[20.0, 0.0], [-20.0, 0.0]])
    mix = MixtureModel(np.array([0.5, 0.5]), means, np.array([0.05, 0.05]))
    t = 5
    x = np.sqrt(sched.alpha_bar[t]) * means[0]
    assert responsibilities(x, t, mix, sched)[0, 0] >= 1 - 1e-6


def test_symmetric_mixture_origin():
    sched = DiffusionSchedule.linear(50)
    mix = MixtureModel(np.array([0.5, 0.5]), np.array([[1.0, -2.0], [-1.0, 2.0]]), np.array([0.1, 0.1]))
    for t in (1, 25, 50):
        assert np.allclose(analytic_denoiser(np.zeros(2), t, mix, sched), 0.0, atol=1e-15)


def test_denoiser_finite_for_extreme_inputs():
    sched = DiffusionSchedule.linear(50)
    mix = MixtureModel.hypercube()
    x = np.full((2, 16), 1e4)
    x[1] *= -1
    assert np.all(np.isfinite(analytic_denoiser(x, 1, mix, sched)))
    with pytest.raises(ValueError):
        analytic_denoiser(x, 0, mix, sched)


# ---------------------------------------------------------------- reverse step

def test_ddim_zero_eps_scales():
    sched = DiffusionSchedule.linear(50, "ddim")
    x = make_rng(0).standard_normal(6)
    ab = sched.alpha_bar
    for t in (1, 30, 50):
        out = reverse_step(x, np.zeros(6), t, sched)
        assert np.allclose(out, x * np.sqrt(ab[t - 1]) / np.sqrt(ab[t]), rtol=1e-14)


@pytest.mark.parametrize("sampler", ["ddpm", "ddim"])
def test_single_step_recovers_x0(sampler):
    sched = DiffusionSchedule.linear(1, sampler)
    rng = make_rng(4)
    x0, eps = rng.standard_normal(8), rng.standard_normal(8)
    ab = sched.alpha_bar[1]
    x1 = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    assert np.max(np.abs(reverse_step(x1, eps, 1, sched) - x0)) <= 1e-10


def test_ddpm_noise_source():
    sched = DiffusionSchedule.linear(50)
    x, e = np.ones(3), np.zeros(3)
    a = reverse_step(x, e, 10, sched, rng=make_rng(1))
    assert np.array_equal(a, reverse_step(x, e, 10, sched, rng=make_rng(1)))
    assert not np.array_equal(a, reverse_step(x, e, 10, sched, noise=np.zeros(3)))
    with pytest.raises(ValueError):
        reverse_step(x, e, 10, sched)
    with pytest.raises(ValueError):
        reverse_step(x, e, 0, sched)
    # the last step adds no noise
    assert np.array_equal(reverse_step(x, e, 1, sched, rng=make_rng(1)),
                          reverse_step(x, e, 1, sched, rng=make_rng(2)))


# ---------------------------------------------------------------- surrogate

def _grid_samples(T, d, per_step, seed=0, steps=None):
    rng = make_rng(seed)
    steps = range(T) if steps is None else steps
    feats, ts = [], []
    for s in steps:
        feats.append(rng.standard_normal((per_step, d)))
        ts += [s] * per_step
    n = len(ts)
    return SampleSet(np.vstack(feats), np.array(ts), np.zeros(n))


def test_surrogate_exact_for_linear_denoiser():
    sched = DiffusionSchedule.linear(10)
    mix = _single(4, mean=0.3, var=0.5)
    sur = fit_surrogate(_grid_samples(10, 4, 12), mix, sched)
    x = make_rng(9).standard_normal((50, 4))
    for t in range(1, 11):
        err = sur(x, t) - analytic_denoiser(x, t, mix, sched)
        assert np.sqrt(np.mean(err ** 2)) <= 1e-8
    assert not sur.borrowed.any()


def test_surrogate_borrows_for_empty_steps():
    sched = DiffusionSchedule.linear(10)
    mix = _single(3)
    sur = fit_surrogate(_grid_samples(10, 3, 8, steps=[0, 1, 2, 3, 4]), mix, sched)
    assert not sur.borrowed[:5].any() and sur.borrowed[5:].all()


def test_surrogate_ridge_on_duplicates():
    sched = DiffusionSchedule.linear(5)
    mix = MixtureModel.hypercube(dim=4, components=2)
    s = SampleSet(np.ones((30, 4)), np.repeat(np.arange(5), 6), np.zeros(30))
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        sur = fit_surrogate(s, mix, sched)
    assert sur.ridge.all()
    assert np.all(np.isfinite(sur(np.ones((2, 4)), 3)))


def test_surrogate_residual_not_worse_than_zero_map(lab, pool):
    sur = fit_surrogate(pool, lab.mixture, lab.schedule)
    for step in (0, 20, 49):
        m = pool.timesteps == step
        X = pool.features[m]
        Y = lab.analytic(X, step + 1)
        assert np.sum((sur(X, step + 1) - Y) ** 2) <= np.sum(Y ** 2)


def test_surrogate_deterministic(lab, pool):
    a = fit_surrogate(pool, lab.mixture, lab.schedule)
    b = fit_surrogate(pool, lab.mixture, lab.schedule)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_surrogate_needs_samples(lab):
    with pytest.raises(ValueError):
        fit_surrogate(SampleSet(np.empty((0, 16)), [], []), lab.mixture, lab.schedule)


def test_quantized_surrogate_per_timestep(lab, pool):
    sur = fit_surrogate(pool, lab.mixture, lab.schedule)
    q = quantize_surrogate(sur, pool, 8, 8, per_timestep=True)
    assert isinstance(q.act_in, list) and len(q.act_in) == lab.T
    x = pool.features[pool.timesteps == 0][:4]
    assert np.allclose(q(x, 1), sur(x, 1), atol=0.1)


# ---------------------------------------------------------------- pipeline

def test_null_pipeline_equals_direct_loop(lab):
    seeds = [3, 4, 5]
    batch = lab.run(lab.truth(), seeds)
    noise = initial_noise(seeds, lab.T, lab.dim)
    x = noise[:, 0].copy()
    for i, t in enumerate(range(lab.T, 0, -1)):
        x = reverse_step(x, lab.analytic(x, t), t, lab.schedule, noise=noise[:, i + 1])
        assert np.array_equal(batch.xs[:, i + 1], x)
    assert batch.cache["recomputes"] == lab.T and batch.cache["reuses"] == 0


def test_trajectory_shape_and_order(lab):
    batch = lab.run(lab.truth(), [0, 1])
    assert batch.xs.shape == (2, lab.T + 1, lab.dim)
    assert np.all(np.diff(batch.ts) < 0) and batch.ts[0] == lab.T and batch.ts[-1] == 0
    assert np.all(np.isnan(batch.eps[:, -1])) and np.all(np.isfinite(batch.eps[:, :-1]))
    assert np.array_equal(batch.at(lab.T), batch.xs[:, 0])
    assert np.array_equal(batch.trajectory(1).xs, batch.xs[1])


def test_cache_interval_five_counts(lab):
    batch = lab.run(lab.cache_only(5), [0])
    assert batch.cache["recomputes"] == 10 and batch.cache["reuses"] == 40
    # reused steps serve the same prediction
    assert np.array_equal(batch.eps[0, 1], batch.eps[0, 0])


def test_pipeline_reproducible_and_batch_independent(lab):
    a = lab.run(lab.cache_only(5), [7, 8])
    b = lab.run(lab.cache_only(5), [7, 8])
    c = lab.run(lab.cache_only(5), [8])
    assert np.array_equal(a.xs, b.xs)
    # equal up to round-off from batched matrix products
    assert np.allclose(a.xs[1], c.xs[0], rtol=0, atol=1e-12)


def test_sample_needs_dim(lab):
    with pytest.raises(ValueError):
        sample(lab.truth(), [0])


def test_model_inputs(lab):
    batch = lab.run(lab.truth(), [11, 12])
    s = batch.model_inputs()
    assert len(s) == 2 * lab.T
    assert s.timesteps[0] == lab.T - 1 and s.timesteps[lab.T - 1] == 0
    assert set(s.traj_ids) == {11, 12}


def test_correction_hook_sees_every_new_sample(lab):
    seen = []
    cfg = PipelineConfig(lab.schedule, lab.analytic, 1, lambda t, x: seen.append(t) or x)
    lab.run(cfg, [0])
    assert seen == list(range(lab.T - 1, -1, -1))


def test_bits_monotone(lab, pool):
    cal = pool.subset(make_rng(0).choice(len(pool), 800, replace=False))
    seeds = range(200_000, 200_016)
    truth = lab.run(lab.truth(), seeds)
    devs = []
    for bits in (4, 8, 16):
        _, qs = fit_quantized(lab, cal, bits, bits)
        run = lab.run(PipelineConfig(lab.schedule, qs, 1), seeds)
        devs.append(np.mean((run.xs[:, -1] - truth.xs[:, -1]) ** 2))
    assert devs[0] > devs[1] > devs[2]


@pytest.mark.slow
def test_ground_truth_variance_profile(lab):
    batch = lab.run(lab.truth(), range(5000))
    v_T = batch.at(lab.T).var(axis=0)
    v_0 = batch.at(0).var(axis=0)
    assert np.all((v_T >= 0.9) & (v_T <= 1.1))
    assert v_0.mean() < v_T.mean()
    assert v_0.mean() < 2 * lab.mixture.total_variance()


def test_quant_cache_variance_exceeds_truth(lab, pool):
    cal = pool.subset(make_rng(0).choice(len(pool), 800, replace=False))
    _, qs = fit_quantized(lab, cal, 4, 4)
    seeds = range(200_000, 200_064)
    qc = lab.run(PipelineConfig(lab.schedule, qs, 5), seeds)
    gt = lab.run(lab.truth(), seeds)
    for t in (0, 5, 10):
        a = variance_density(qc, [t])[t]
        b = variance_density(gt, [t])[t]
        assert stochastically_larger(a, b) < 0.01


def test_trajectory_csv(tmp_path, lab):
    batch = lab.run(lab.truth(), [1])
    p = tmp_path / "traj.csv"
    write_trajectories_csv(p, batch)
    lines = p.read_text().splitlines()
    assert lines[0] == "traj_id,t,coord_index,x,eps_hat"
    assert len(lines) == 1 + (lab.T + 1) * lab.dim
    assert lines[-1].endswith(",")
