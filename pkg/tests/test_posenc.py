import numpy as np
import pytest

from eegpe import tensor as T
from eegpe.errors import ConfigError
from eegpe.geometry import spe_channel_table, synthetic_ring_montage, temporal_sinusoid_table
from eegpe.posenc import (ACPE, SPE, Learnable, NoPE, SPEProj, acpe_term, apply_pe, expected_param_count,
                          learnable_term, make_pe, reinitialize_for_montage, spe_proj_term, spe_term)
from eegpe.tensor import grad_check_many

from .test_tensor import brute_depthwise

D = 16


@pytest.fixture
def montage():
    return synthetic_ring_montage(8)


@pytest.fixture
def emb():
    return T.as_tensor(np.random.default_rng(0).normal(size=(2, 8, 4, D)))


def test_nope_is_identity(emb, montage):
    out = apply_pe(NoPE(D), emb, montage)
    assert out is emb
    assert np.array_equal(out.data, emb.data)


def test_learnable_zero_tables_identity(emb, montage):
    pe = Learnable(D, 8, 4)
    for p in pe.params.values():
        p.data[:] = 0
    assert np.array_equal(apply_pe(pe, emb, montage).data, emb.data)


def test_spe_offset_matches_independent_tables(emb, montage):
    out = apply_pe(SPE(D), emb, montage)
    diff = out.data - emb.data
    pos_c = spe_channel_table(montage, D)
    pos_w = temporal_sinusoid_table(4, D)
    for c in range(8):
        for w in range(4):
            np.testing.assert_allclose(diff[:, c, w], np.broadcast_to(pos_c[c] + pos_w[w], (2, D)), atol=1e-14)
    assert np.max(np.abs(diff[0] - diff[1])) < 1e-14


def test_spe_term_range(montage):
    t = spe_term(montage, 8, 5, D)
    assert t.shape == (8, 5, D)
    assert np.all(np.abs(t) <= 2.0)


def test_spe_proj_identity_and_zero(montage):
    eye, zero = T.as_tensor(np.eye(D)), T.as_tensor(np.zeros((D, D)))
    np.testing.assert_allclose(spe_proj_term(montage, 8, 4, D, eye, eye).data, spe_term(montage, 8, 4, D),
                               atol=1e-15)
    np.testing.assert_array_equal(spe_proj_term(montage, 8, 4, D, zero, zero).data, 0.0)


def test_spe_permutation_equivariance(montage):
    perm = np.random.default_rng(3).permutation(8)
    np.testing.assert_array_equal(spe_term(montage.permuted(perm), 8, 4, D), spe_term(montage, 8, 4, D)[perm])


def test_spe_montage_mismatch(emb):
    with pytest.raises(ConfigError, match="SPE"):
        apply_pe(SPE(D), emb, synthetic_ring_montage(6))


class TestACPE:
    def test_zero_in_zero_out(self):
        pe = ACPE(D, (7, 3), np.random.default_rng(0))
        out = acpe_term(T.as_tensor(np.zeros((2, 8, 4, D))), pe.params["kernel"])
        np.testing.assert_array_equal(out.data, 0.0)

    def test_constant_input_constant_interior(self):
        k = np.random.default_rng(1).normal(size=(D, 3, 1))
        emb = T.as_tensor(np.ones((1, 7, 5, D)) * np.arange(D))
        out = acpe_term(emb, T.as_tensor(k)).data
        interior = out[0, 1:-1]
        np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-13)
        assert not np.allclose(out[0, 0], interior[0, 0])

    def test_impulse_matches_brute_force(self):
        k = np.random.default_rng(2).normal(size=(2, 3, 1))
        emb = np.zeros((1, 4, 3, 2))
        emb[0, 1, 1, :] = 1.0
        out = acpe_term(T.as_tensor(emb), T.as_tensor(k)).data
        ref = brute_depthwise(emb.transpose(0, 3, 1, 2), k).transpose(0, 2, 3, 1)
        np.testing.assert_allclose(out, ref, atol=1e-15)
        # kernel stamped (flipped) along channels around the impulse channel
        np.testing.assert_allclose(out[0, 0:3, 1, 0], k[0, ::-1, 0])

    def test_channel_order_sensitivity(self):
        # impulse on channel 0; a kernel that only looks one channel "up"
        k = np.zeros((1, 3, 1))
        k[0, 2, 0] = 1.0
        emb = np.zeros((1, 4, 1, 1))
        emb[0, 0, 0, 0] = 1.0
        sigma = np.array([3, 1, 2, 0])
        permuted_then = acpe_term(T.as_tensor(emb[:, sigma]), T.as_tensor(k)).data
        then_permuted = acpe_term(T.as_tensor(emb), T.as_tensor(k)).data[:, sigma]
        assert not np.array_equal(permuted_then, then_permuted)

    def test_kernel_shape_rules(self):
        with pytest.raises(ConfigError):
            ACPE(D, (3, 3))
        with pytest.raises(ConfigError):
            ACPE(D, (6, 3))
        with pytest.raises(ConfigError):
            acpe_term(T.as_tensor(np.zeros((1, 4, 4, 2))), T.as_tensor(np.zeros((2, 3, 5))))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        emb = T.parameter(rng.uniform(-1, 1, (1, 5, 3, 2)))
        k = T.parameter(rng.uniform(-1, 1, (2, 5, 3)))
        R = rng.uniform(-1, 1, (1, 5, 3, 2))
        errs = grad_check_many(lambda: T.tsum(acpe_term(emb, k) * R), [emb, k])
        assert max(errs.values()) < 1e-4


class TestLearnable:
    def test_zero_channel_table_constant_across_channels(self):
        e_c = T.as_tensor(np.zeros((5, D)))
        e_w = T.as_tensor(np.random.default_rng(0).normal(size=(3, D)))
        t = learnable_term(e_c, e_w).data
        for c in range(5):
            np.testing.assert_array_equal(t[c], t[0])

    def test_channel_row_gradient_sums_patch_gradients(self):
        rng = np.random.default_rng(5)
        e_c = T.parameter(rng.normal(size=(4, D)))
        e_w = T.parameter(rng.normal(size=(3, D)))
        G = rng.normal(size=(4, 3, D))
        T.tsum(learnable_term(e_c, e_w) * G).backward()
        np.testing.assert_allclose(e_c.grad, G.sum(axis=1), atol=1e-14)
        errs = grad_check_many(lambda: T.tsum(learnable_term(e_c, e_w) * G), [e_c, e_w])
        assert max(errs.values()) < 1e-6

    def test_size_mismatch(self, montage):
        with pytest.raises(ConfigError, match="C=8"):
            apply_pe(Learnable(D, 8, 4), T.as_tensor(np.zeros((1, 6, 4, D))), montage)


class TestParams:
    @pytest.mark.parametrize("tag", ["nope", "acpe", "spe", "spe-proj", "learnable"])
    def test_counts(self, tag):
        pe = make_pe(tag, D, 8, 4, np.random.default_rng(0), (7, 3))
        assert pe.n_params() == expected_param_count(tag, D, 8, 4, (7, 3))

    def test_count_table(self):
        assert [expected_param_count(t, 32, 8, 4, (7, 3)) for t in ("nope", "spe", "acpe", "spe-proj", "learnable")] \
            == [0, 0, 32 * 21, 2 * 32 * 32, 12 * 32]

    def test_transferability_flags(self):
        assert NoPE.montage_transferable and SPE.montage_transferable and SPEProj.montage_transferable
        assert not Learnable.montage_transferable
        assert ACPE.montage_transferable and ACPE.order_sensitive

    def test_spe_proj_starts_near_identity(self):
        pe = SPEProj(D, rng=np.random.default_rng(0))
        dev = pe.params["proj_w"].data - np.eye(D)
        assert 0 < np.std(dev) < 0.02

    def test_unknown_tag(self):
        with pytest.raises(ConfigError):
            make_pe("rope", D, 8, 4)


class TestReinitialize:
    def test_nope_unchanged(self):
        pe = NoPE(D)
        assert reinitialize_for_montage(pe, synthetic_ring_montage(6), 4) is pe

    def test_spe_recomputes(self, montage):
        pe = SPE(D)
        a = pe.term(T.as_tensor(np.zeros((1, 8, 4, D))), montage).data
        new = synthetic_ring_montage(6)
        pe2 = reinitialize_for_montage(pe, new, 4)
        b = pe2.term(T.as_tensor(np.zeros((1, 6, 4, D))), new).data
        assert pe2.n_params() == 0 and b.shape == (6, 4, D)
        np.testing.assert_array_equal(b, spe_term(new, 6, 4, D))
        assert a.shape == (8, 4, D)

    def test_learnable_fresh_tables(self):
        old = Learnable(D, 8, 4, np.random.default_rng(0))
        new = reinitialize_for_montage(old, synthetic_ring_montage(6), 4, np.random.default_rng(1))
        assert new is not old
        assert new.params["channel"].shape == (6, D)
        assert new.params["patch"].shape == (4, D)
        old_vals = set(np.concatenate([p.data.ravel() for p in old.params.values()]))
        assert not old_vals & set(np.concatenate([p.data.ravel() for p in new.params.values()]))
