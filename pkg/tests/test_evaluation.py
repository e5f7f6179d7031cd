import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import logsumexp

from boltzvae import evaluation, graph, rbm, vae
from boltzvae.nets import bernoulli_loglik
from boltzvae.samplers import ExactSampler

from conftest import random_params


def enumerable_model(seed=3, prior_seed=0, conn=None):
    conn = conn or graph.build_chimera(1, 2, 4)
    arch = vae.ArchConfig(
        input_dim=16, trunk_widths=(10,), head_width=8, decoder_widths=(10,),
        dropout_rate=0.0,
    )
    model = vae.build_model(conn, arch, tau=1 / 7, seed=seed)
    rng = np.random.default_rng(prior_seed)
    model.prior.b[:] = rng.uniform(-0.5, 0.5, conn.num_nodes)
    model.prior.W[:] = rng.uniform(-0.5, 0.5, conn.num_edges)
    return model


def exact_log_likelihood(model, xs):
    """Enumeration over all latent states: log p(x) = lse_z [log p(x|z) + log p(z)]."""
    states = rbm.bit_states(model.conn.num_nodes)
    log_pz = -rbm.energy(model.prior, states) - rbm.exact_log_z(model.prior)
    o = model.decoder.forward(states, train=False)
    return np.array([logsumexp(bernoulli_loglik(o, x[None, :]) + log_pz) for x in xs])


class TestLogLikelihood:
    def test_matches_enumeration_on_small_model(self):
        model = enumerable_model()
        rng = np.random.default_rng(1)
        xs = (rng.random((64, 16)) < 0.4).astype(float)
        exact = exact_log_likelihood(model, xs).mean()
        lz = rbm.exact_log_z(model.prior)
        ll, err = evaluation.log_likelihood(model, xs, 2000, lz, 0.0, rng)
        assert abs(ll - exact) < 0.05

    def test_monotone_in_k(self):
        model = enumerable_model(seed=5, prior_seed=6)
        rng = np.random.default_rng(2)
        xs = (rng.random((128, 16)) < 0.4).astype(float)
        lz = rbm.exact_log_z(model.prior)
        means, errs = [], []
        for K in (1, 5, 50):
            vals = [evaluation.log_likelihood(model, xs, K, lz, 0.0, np.random.default_rng(10 + r))[0]
                    for r in range(4)]
            means.append(np.mean(vals))
            errs.append(np.std(vals, ddof=1) / 2)
        exact = exact_log_likelihood(model, xs).mean()
        assert means[0] <= means[1] + 3 * np.hypot(errs[0], errs[1])
        assert means[1] <= means[2] + 3 * np.hypot(errs[1], errs[2])
        assert means[2] <= exact + 3 * errs[2]

    def test_k1_estimates_agree_across_seeds(self):
        model = enumerable_model(seed=7, prior_seed=8)
        rng = np.random.default_rng(3)
        xs = (rng.random((256, 16)) < 0.4).astype(float)
        lz = rbm.exact_log_z(model.prior)
        a, ea = evaluation.log_likelihood(model, xs, 1, lz, 0.0, np.random.default_rng(4))
        b, eb = evaluation.log_likelihood(model, xs, 1, lz, 0.0, np.random.default_rng(5))
        assert abs(a - b) < 3 * np.hypot(ea, eb)

    def test_log_z_error_propagates(self):
        model = enumerable_model()
        xs = np.zeros((4, 16))
        _, err = evaluation.log_likelihood(model, xs, 2, 10.0, 0.5, np.random.default_rng(6))
        assert err >= 0.5

    def test_k_below_one_rejected(self):
        model = enumerable_model()
        with pytest.raises(ValueError):
            evaluation.log_likelihood(model, np.zeros((1, 16)), 0, 0.0, 0.0, np.random.default_rng(0))


class TestActiveUnits:
    def test_saturated_logits_mean_no_active_units(self):
        model = enumerable_model(seed=9)
        for head, group in ((model.encoder.head1, model.mapping.group1),
                            (model.encoder.head2, model.mapping.group2)):
            head.layers[-1].W[:] = 0.0
            head.layers[-1].b[:] = 40.0  # every unit fires deterministically
        xs = (np.random.default_rng(7).random((64, 16)) < 0.5).astype(float)
        assert evaluation.active_units(model, xs, np.random.default_rng(8)) == 0

    def test_uniform_logits_mean_all_units_active(self):
        model = enumerable_model(seed=10)
        for head in (model.encoder.head1, model.encoder.head2):
            head.layers[-1].W[:] = 0.0
            head.layers[-1].b[:] = 0.0  # hard-draw variance 0.25 per unit
        xs = (np.random.default_rng(9).random((256, 16)) < 0.5).astype(float)
        assert evaluation.active_units(model, xs, np.random.default_rng(10)) == 16

    def test_invariant_under_unit_relabeling(self):
        model = enumerable_model(seed=11)
        xs = (np.random.default_rng(11).random((128, 16)) < 0.5).astype(float)
        z, _ = evaluation.hard_encode(model, xs, np.random.default_rng(12))
        var = z.var(axis=0)
        count = int((var > 0.01).sum())
        perm = np.random.default_rng(13).permutation(16)
        assert int((var[perm] > 0.01).sum()) == count
        assert evaluation.active_units(model, xs, np.random.default_rng(12)) == count

    def test_empty_set_rejected(self):
        model = enumerable_model()
        with pytest.raises(ValueError):
            evaluation.active_units(model, np.zeros((0, 16)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            evaluation.active_units(model, np.zeros((4, 16)), np.random.default_rng(0), threshold=0.0)


class TestGibbsWalk:
    def test_zero_prior_gives_uncorrelated_frames(self):
        model = enumerable_model(seed=12)
        model.prior.b[:] = 0.0
        model.prior.W[:] = 0.0
        latents, decoded = evaluation.gibbs_walk(model, 2000, np.random.default_rng(14))
        assert abs(evaluation.latent_lag_autocorr(latents, 1)) < 0.05
        assert decoded.shape == (2001, 16)

    def test_bernoulli_prior_walk_is_iid(self):
        conn = graph.build_bernoulli(16)
        model = enumerable_model(seed=13, conn=conn)
        model.prior.b[:] = np.random.default_rng(15).uniform(-0.5, 0.5, 16)
        latents, _ = evaluation.gibbs_walk(model, 2000, np.random.default_rng(16))
        assert abs(evaluation.latent_lag_autocorr(latents, 1)) < 0.05

    def test_exact_frame_control_has_no_autocorrelation(self):
        # control for the multimodality probe: independent exact draws in
        # place of chained sweeps kill autocorrelation for any connectivity
        for conn in (graph.build_chimera(1, 2, 4), graph.build_complete(12)):
            params = random_params(conn, 17, scale=1.0)
            frames = ExactSampler(seed=18).draw(params, 2000).bits
            assert abs(evaluation.latent_lag_autocorr(frames, 1)) < 0.05

    def test_strong_couplings_slow_the_walk(self):
        # zero-field ferromagnet: all-on and all-off modes of equal weight
        # separated by a single-flip barrier, so the chain decorellates slowly
        conn = graph.build_complete(8)
        model = enumerable_model(seed=14, conn=conn)
        ferro = rbm.from_ising(rbm.IsingView(conn, np.zeros(8), np.full(conn.num_edges, -0.3), 1.0))
        model.prior.b[:] = ferro.b
        model.prior.W[:] = ferro.W
        latents, _ = evaluation.gibbs_walk(model, 2000, np.random.default_rng(19))
        assert evaluation.latent_lag_autocorr(latents, 1) > 0.2

    def test_frame_cosine_similarity_bounds(self):
        decoded = np.random.default_rng(20).random((50, 16))
        sim = evaluation.frame_cosine_similarity(decoded)
        assert 0.0 <= sim <= 1.0


class TestGenerateAndAblate:
    def test_zero_samples_give_empty_grid(self):
        model = enumerable_model()
        out = evaluation.generate(model, ExactSampler(seed=21), 0)
        assert out.shape == (0, 16)

    def test_ablation_on_coupling_free_prior_changes_nothing(self):
        conn = graph.build_bernoulli(16)
        model = enumerable_model(seed=15, conn=conn)
        ablated = evaluation.ablate_couplings(model)
        a = evaluation.generate(model, ExactSampler(seed=22), 64)
        b = evaluation.generate(ablated, ExactSampler(seed=22), 64)
        assert_allclose(a, b)
        assert ablated.prior is not model.prior  # independent copy

    def test_ablation_shifts_class_histogram_of_coupled_prior(self):
        # engineered two-mode model: ferromagnetic couplings concentrate
        # mass on the all-on state; zeroing them tips the prior to all-off,
        # and a probe classifier on the two decoded prototypes sees the mix
        # change
        from boltzvae.nets import DENSE, LayerSpec, NetStack

        conn = graph.build_complete(4)
        arch = vae.ArchConfig(input_dim=9, trunk_widths=(8,), head_width=6,
                              decoder_widths=(8,), dropout_rate=0.0)
        model = vae.build_model(conn, arch, tau=1 / 7, seed=16)
        model.prior.b[:] = 2.0
        model.prior.W[:] = -2.5
        proto_on = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=float)
        proto_off = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1], dtype=float)
        model.decoder = NetStack([LayerSpec(DENSE, 4, 9)], np.random.default_rng(23))
        lay = model.decoder.layers[0]
        lay.W[:] = np.outer(np.ones(4), 16.0 * (proto_on - proto_off)) / 4.0
        lay.b[:] = -8.0 + 16.0 * proto_off
        clf = evaluation.SoftmaxClassifier(9, 2, seed=24)
        clf.fit(np.repeat(np.vstack([proto_on, proto_off]), 50, axis=0), np.repeat([0, 1], 50))
        intact = evaluation.generate(model, ExactSampler(seed=25), 1024)
        ablated = evaluation.generate(evaluation.ablate_couplings(model), ExactSampler(seed=25), 1024)
        _, p = evaluation.class_histogram_shift(clf, intact, ablated)
        assert p < 0.01

    def test_identical_sets_show_no_shift(self):
        rng = np.random.default_rng(26)
        xs = rng.random((500, 9))
        clf = evaluation.SoftmaxClassifier(9, 2, seed=27)
        clf.fit((rng.random((100, 9)) > 0.5).astype(float), rng.integers(0, 2, 100))
        _, p = evaluation.class_histogram_shift(clf, xs, xs)
        assert p > 0.99


class TestClassifier:
    def test_learns_bars_vs_stripes_with_quadratic_features(self):
        from boltzvae.data import synth_bars_stripes

        rng = np.random.default_rng(28)
        x, y = synth_bars_stripes(4, 2000, rng)
        feats = evaluation.quadratic_features(x)
        clf = evaluation.SoftmaxClassifier(feats.shape[1], 2, seed=29)
        clf.fit(feats[:1500], y[:1500])
        # ambiguous all-on/all-off grids belong to both classes, so score
        # accuracy on the unambiguous remainder
        test_x, test_y = x[1500:], y[1500:]
        clear = ~((test_x.min(axis=1) == test_x.max(axis=1)))
        acc = (clf.predict(evaluation.quadratic_features(test_x[clear])) == test_y[clear]).mean()
        assert acc > 0.95


class TestEstimateLogZ:
    def test_exact_below_cap(self, cell_pair):
        _, params = cell_pair
        lz, err = evaluation.estimate_log_z(params, np.random.default_rng(30))
        assert err == 0.0
        assert_allclose(lz, rbm.exact_log_z(params), atol=1e-12)

    def test_pa_above_cap(self):
        conn = graph.build_chimera(2, 3, 4)  # 48 units
        params = random_params(conn, 31, scale=0.3)
        lz, err = evaluation.estimate_log_z(params, np.random.default_rng(32))
        assert err > 0.0
        assert np.isfinite(lz)
