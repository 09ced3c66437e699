"""Corruption, deterministic reverse updates, and sequence conversion."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from priorshift.denoiser import init_denoiser, init_residual
from priorshift.latent import Codebook, LatentSequence, Standardizer
from priorshift.prior import (
    ConditionalGMM,
    gaussian_posterior_moments,
    sample_prior,
)
from priorshift.rng import PURPOSE_DATA, substream
from priorshift.sampler import (
    ConvertContext,
    SamplerConfig,
    convert,
    convert_sequences,
    ddim_step,
    denoise_from,
    forward_corrupt,
    frame_metrics,
    model_eps_source,
    prior_eps_source,
    reconstruct_x0,
)
from priorshift.schedule import Schedule, alpha_bar_at, default_schedule

SCHED = default_schedule()


class ZeroRng:
    """Stands in for a generator when a test needs the no-noise trajectory."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def _plateau_schedule(ab: float, T: int = 4) -> Schedule:
    beta = np.concatenate([[1 - ab], np.zeros(T - 1)])
    return Schedule(T=T, beta=beta, alpha=1 - beta,
                    alpha_bar=np.full(T, ab, dtype=np.longdouble))


def _identity_standardizer(d: int) -> Standardizer:
    return Standardizer(mean=np.zeros(d), std=np.ones(d))


class TestForwardCorrupt:
    def test_first_step_coefficients(self):
        x0 = np.array([[1.0, -2.0]])
        eps = np.array([[0.5, 1.0]])
        got = forward_corrupt(x0, 0, eps, SCHED)
        ab = 0.9999
        assert_allclose(got, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, rtol=1e-15)

    def test_terminal_step_frozen_value(self):
        got = forward_corrupt(np.array([[1.0]]), 99, np.array([[1.0]]), SCHED)
        assert_allclose(got[0, 0], 1.4007319233875881, atol=1e-15)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            forward_corrupt(np.zeros((2, 3)), 5, np.zeros((2, 2)), SCHED)

    def test_step_range_checked(self):
        x = np.zeros((1, 1))
        with pytest.raises(ValueError):
            forward_corrupt(x, -1, x, SCHED)
        with pytest.raises(ValueError):
            forward_corrupt(x, SCHED.T, x, SCHED)


class TestReconstruct:
    def test_inverts_corruption_with_true_noise(self):
        rng = np.random.default_rng(0)
        for t in (0, 13, 57, 99):
            x0 = rng.standard_normal((5, 3))
            eps = rng.standard_normal((5, 3))
            x_t = forward_corrupt(x0, t, eps, SCHED)
            assert_allclose(reconstruct_x0(x_t, t, eps, SCHED), x0, rtol=0, atol=1e-12)

    def test_equals_posterior_mean_under_gaussian_prior(self):
        """With the exact predictor the reconstruction is the conjugate
        posterior mean, computed here by an unrelated closed form."""
        mu, var = 1.3, 0.7
        p = ConditionalGMM.from_components([1.0], [[mu]], [[var]])
        eps_fn = prior_eps_source(p, SCHED)
        rng = np.random.default_rng(1)
        for t in (0, 7, 33, 60, 99):
            x_t = rng.normal(0, 2, (8, 1))
            xhat = reconstruct_x0(x_t, t, eps_fn(x_t, t, np.zeros(8, dtype=int)), SCHED)
            for i in range(8):
                mean, _ = gaussian_posterior_moments(mu, var, t, float(x_t[i, 0]), SCHED)
                assert_allclose(xhat[i, 0], mean, atol=1e-16 + 1e-14 * abs(mean))


class TestDdimStep:
    def test_final_step_returns_reconstruction(self):
        rng = np.random.default_rng(2)
        x_t = rng.standard_normal((4, 2))
        eps_hat = rng.standard_normal((4, 2))
        got = ddim_step(x_t, 0, eps_hat, SCHED)
        assert np.array_equal(got, reconstruct_x0(x_t, 0, eps_hat, SCHED))

    def test_true_noise_walks_the_corruption_path(self):
        """Feeding the actual corruption noise back in must land exactly on
        the previous step of the forward path."""
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((6, 2))
        eps = rng.standard_normal((6, 2))
        for t in (1, 25, 70, 99):
            x_t = forward_corrupt(x0, t, eps, SCHED)
            want = forward_corrupt(x0, t - 1, eps, SCHED)
            assert_allclose(ddim_step(x_t, t, eps, SCHED), want, rtol=0, atol=1e-12)

    def test_constant_noise_level_is_a_fixed_point(self):
        """If the cumulative signal fraction does not change between steps,
        the update must return its input for any noise estimate."""
        sched = _plateau_schedule(0.37)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 2))
        eps_hat = rng.standard_normal((3, 2))
        assert_allclose(ddim_step(x, 2, eps_hat, sched), x, rtol=0, atol=1e-15)


class TestDenoiseFrom:
    def test_zero_start_is_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 2))
        p = ConditionalGMM.from_components([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        out = denoise_from(x, 0, np.zeros(4, dtype=int), prior_eps_source(p, SCHED), SCHED)
        assert np.array_equal(out, x)

    def test_single_step_equals_ddim_step(self):
        p = ConditionalGMM.from_components([1.0], [[0.5]], [[1.0]])
        eps_fn = prior_eps_source(p, SCHED)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((5, 1))
        labels = np.zeros(5, dtype=int)
        want = ddim_step(x, 0, eps_fn(x, 0, labels), SCHED)
        assert np.array_equal(denoise_from(x, 1, labels, eps_fn, SCHED), want)

    def test_start_range_checked(self):
        p = ConditionalGMM.from_components([1.0], [[0.0]], [[1.0]])
        eps_fn = prior_eps_source(p, SCHED)
        with pytest.raises(ValueError):
            denoise_from(np.zeros((1, 1)), SCHED.T + 1, np.zeros(1, dtype=int), eps_fn, SCHED)
        with pytest.raises(ValueError):
            denoise_from(np.zeros((1, 1)), -1, np.zeros(1, dtype=int), eps_fn, SCHED)

    def test_transports_terminal_marginal_onto_prior(self):
        """Corrupt prior draws to the last step, then run the full reverse
        chain: outputs must be distributed like fresh prior draws up to
        discretization (the spread contracts by well under a percent)."""
        mu, var = 1.3, 0.7
        p = ConditionalGMM.from_components([1.0], [[mu]], [[var]])
        n = 20_000
        rng = substream(1, PURPOSE_DATA)
        x0 = sample_prior(p, 0, n, rng)
        eps = rng.standard_normal((n, 1))
        x_T = forward_corrupt(x0, SCHED.T - 1, eps, SCHED)
        out = denoise_from(x_T, SCHED.T, np.zeros(n, dtype=int),
                           prior_eps_source(p, SCHED), SCHED)
        assert abs(out.mean() - mu) < 4 * np.sqrt(var / n)
        assert 0.98 < out.std() / np.sqrt(var) < 1.005

    def test_rows_are_independent_for_exact_predictor(self):
        p = ConditionalGMM.from_components(
            [0.4, 0.6], [[-1.0, 0.5], [1.0, -0.5]], [[1.0, 0.8], [0.6, 1.2]]
        )
        eps_fn = prior_eps_source(p, SCHED)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((6, 2))
        labels = np.zeros(6, dtype=int)
        batch = denoise_from(x, 40, labels, eps_fn, SCHED)
        for i in range(6):
            row = denoise_from(x[i:i + 1], 40, labels[i:i + 1], eps_fn, SCHED)
            assert np.array_equal(batch[i], row[0])

    def test_rows_nearly_independent_for_network_predictor(self):
        """Matrix-matrix and matrix-vector products may round differently,
        so the network path is only required to agree to float precision."""
        rng = np.random.default_rng(8)
        theta = init_denoiser(2, 1, (8,), 4, 4, rng)
        for arr in theta.tensors.values():
            arr += 0.2 * rng.standard_normal(arr.shape)
        eps_fn = model_eps_source(theta)
        x = rng.standard_normal((5, 2))
        labels = np.zeros(5, dtype=int)
        batch = denoise_from(x, 30, labels, eps_fn, SCHED)
        for i in range(5):
            row = denoise_from(x[i:i + 1], 30, labels[i:i + 1], eps_fn, SCHED)
            assert_allclose(batch[i], row[0], atol=1e-12)


class TestSamplerConfig:
    def test_negative_start_rejected(self):
        with pytest.raises(ValueError, match="t_start"):
            SamplerConfig(t_start=-1)

    def test_unknown_source_rejected(self):
        with pytest.raises(ValueError, match="eps_source"):
            SamplerConfig(t_start=10, eps_source="oracle")

    def test_defaults(self):
        cfg = SamplerConfig(t_start=25)
        assert cfg.eps_source == "exact" and cfg.snap and not cfg.predict_residual


class TestFrameMetrics:
    def test_identical_frames(self):
        p = ConditionalGMM.from_components([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        x = np.array([[1.0, 2.0], [-1.0, 0.5]])
        l2d, cos, prob = frame_metrics(x, x, np.zeros(2, dtype=int), p, p)
        assert_allclose(l2d, 0.0)
        assert_allclose(cos, 1.0)
        assert_allclose(prob, 0.5)

    def test_zero_vector_does_not_blow_up(self):
        p = ConditionalGMM.from_components([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        x = np.zeros((1, 2))
        y = np.array([[1.0, 0.0]])
        l2d, cos, prob = frame_metrics(x, y, np.zeros(1, dtype=int), p, p)
        assert np.isfinite(cos).all()
        assert_allclose(l2d, 1.0)


def _convert_fixture(d=2, snap=True):
    native = ConditionalGMM.from_components([1.0], [[0.0] * d], [[1.0] * d])
    shifted = ConditionalGMM.from_components([1.0], [[2.0] * d], [[1.0] * d])
    rng = np.random.default_rng(9)
    entries = rng.normal(0, 1, (32, d))
    ctx = ConvertContext(
        sched=SCHED,
        standardizer=_identity_standardizer(d),
        eps_fn=prior_eps_source(native, SCHED),
        native=native,
        l2=shifted,
        codebook=Codebook(entries=entries) if snap else None,
    )
    frames = rng.normal(1.5, 1.0, (20, d))
    seq = LatentSequence(id="case", labels=rng.integers(0, 1, 20), frames=frames)
    return ctx, seq


class TestConvert:
    def test_zero_start_without_snap_is_identity(self):
        ctx, seq = _convert_fixture(snap=False)
        cfg = SamplerConfig(t_start=0, snap=False)
        out, diag = convert(seq, ctx, cfg, np.random.default_rng(0))
        assert_allclose(out.frames, seq.frames, atol=1e-12)
        assert diag.identity_l2 < 1e-12
        assert_allclose(diag.identity_cos, 1.0, atol=1e-12)
        assert diag.n_frames == 20
        assert diag.t_start == 0

    def test_snapped_output_lands_on_codebook(self):
        ctx, seq = _convert_fixture(snap=True)
        cfg = SamplerConfig(t_start=30)
        out, _ = convert(seq, ctx, cfg, np.random.default_rng(1))
        for row in out.frames:
            assert any(np.array_equal(row, e) for e in ctx.codebook.entries)

    def test_no_noise_single_step_matches_posterior_mean(self):
        """With zero corruption noise and one reverse step the pipeline
        collapses to the conjugate posterior mean at step zero, computed
        here by the closed form instead of the update rule."""
        d = 1
        ctx, _ = _convert_fixture(d=d, snap=False)
        frames = np.array([[0.8], [-0.4], [2.2]])
        seq = LatentSequence(id="z", labels=np.zeros(3, dtype=int), frames=frames)
        cfg = SamplerConfig(t_start=1, snap=False)
        out, _ = convert(seq, ctx, cfg, ZeroRng())
        ab = alpha_bar_at(SCHED, 0)
        for i in range(3):
            mean, _ = gaussian_posterior_moments(0.0, 1.0, 0, np.sqrt(ab) * frames[i, 0], SCHED)
            assert_allclose(out.frames[i, 0], mean, rtol=1e-12)

    def test_standardizer_round_trip_preserved(self):
        ctx, seq = _convert_fixture(snap=False)
        std = Standardizer(mean=np.array([0.7, -0.3]), std=np.array([1.4, 0.6]))
        ctx2 = ConvertContext(sched=ctx.sched, standardizer=std, eps_fn=ctx.eps_fn,
                              native=ctx.native, l2=ctx.l2)
        cfg = SamplerConfig(t_start=0, snap=False)
        out, _ = convert(seq, ctx2, cfg, np.random.default_rng(2))
        assert_allclose(out.frames, seq.frames, atol=1e-9)

    def test_residual_head_adds_to_snapped_frames(self):
        ctx, seq = _convert_fixture(snap=True)
        phi = init_residual(2, (), np.random.default_rng(3))
        phi.tensors["out_w"][:] = 0
        phi.tensors["out_b"][:] = [0.25, -0.5]
        h = np.random.default_rng(4).normal(0, 1, seq.frames.shape)
        seq2 = LatentSequence(id=seq.id, labels=seq.labels, frames=seq.frames, h=h)
        ctx2 = ConvertContext(sched=ctx.sched, standardizer=ctx.standardizer,
                              eps_fn=ctx.eps_fn, native=ctx.native, l2=ctx.l2,
                              codebook=ctx.codebook, residual=phi)
        cfg_plain = SamplerConfig(t_start=15)
        cfg_res = SamplerConfig(t_start=15, predict_residual=True)
        base, _ = convert(seq2, ctx2, cfg_plain, np.random.default_rng(5))
        res, _ = convert(seq2, ctx2, cfg_res, np.random.default_rng(5))
        assert_allclose(res.frames - base.frames,
                        np.tile([0.25, -0.5], (20, 1)), atol=1e-12)

    def test_missing_pieces_raise(self):
        ctx, seq = _convert_fixture(snap=False)
        with pytest.raises(ValueError, match="codebook"):
            convert(seq, ctx, SamplerConfig(t_start=5), np.random.default_rng(0))
        with pytest.raises(ValueError, match="residual"):
            convert(seq, ctx, SamplerConfig(t_start=5, snap=False, predict_residual=True),
                    np.random.default_rng(0))
        phi = init_residual(2, (), np.random.default_rng(1))
        ctx3 = ConvertContext(sched=ctx.sched, standardizer=ctx.standardizer,
                              eps_fn=ctx.eps_fn, native=ctx.native, l2=ctx.l2,
                              residual=phi)
        with pytest.raises(ValueError, match="h track"):
            convert(seq, ctx3, SamplerConfig(t_start=5, snap=False, predict_residual=True),
                    np.random.default_rng(0))

    def test_start_beyond_schedule_rejected(self):
        ctx, seq = _convert_fixture(snap=False)
        with pytest.raises(ValueError, match="t_start"):
            convert(seq, ctx, SamplerConfig(t_start=SCHED.T + 1, snap=False),
                    np.random.default_rng(0))


class TestConvertSequences:
    def _many(self, n=6):
        ctx, _ = _convert_fixture(snap=False)
        rng = np.random.default_rng(10)
        seqs = [
            LatentSequence(id=f"s-{i:05d}", labels=np.zeros(8, dtype=int),
                           frames=rng.normal(1.0, 1.0, (8, 2)))
            for i in range(n)
        ]
        return ctx, seqs

    def test_order_and_ids_preserved(self):
        ctx, seqs = self._many()
        cfg = SamplerConfig(t_start=20, snap=False, seed=3)
        results = convert_sequences(seqs, ctx, cfg)
        assert [r[0].id for r in results] == [s.id for s in seqs]

    def test_thread_count_does_not_change_results(self):
        ctx, seqs = self._many()
        cfg = SamplerConfig(t_start=20, snap=False, seed=3)
        serial = convert_sequences(seqs, ctx, cfg, threads=1)
        pooled = convert_sequences(seqs, ctx, cfg, threads=4)
        for (a, da), (b, db) in zip(serial, pooled):
            assert np.array_equal(a.frames, b.frames)
            assert da == db

    def test_reruns_identical(self):
        ctx, seqs = self._many(3)
        cfg = SamplerConfig(t_start=40, snap=False, seed=11)
        r1 = convert_sequences(seqs, ctx, cfg)
        r2 = convert_sequences(seqs, ctx, cfg)
        for (a, _), (b, _) in zip(r1, r2):
            assert np.array_equal(a.frames, b.frames)

    def test_noise_differs_per_sequence(self):
        ctx, seqs = self._many(2)
        clone = LatentSequence(id="twin", labels=seqs[0].labels.copy(),
                               frames=seqs[0].frames.copy())
        cfg = SamplerConfig(t_start=60, snap=False, seed=0)
        results = convert_sequences([seqs[0], clone], ctx, cfg)
        assert not np.array_equal(results[0][0].frames, results[1][0].frames)

    def test_bad_thread_count(self):
        ctx, seqs = self._many(1)
        with pytest.raises(ValueError, match="thread"):
            convert_sequences(seqs, ctx, SamplerConfig(t_start=5, snap=False), threads=0)
