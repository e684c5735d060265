from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ltpic.core import AUX_ION_TAG, AUX_META_TAG, CODATA, Grid, ParticleStore, Rng
from ltpic.dsmc import (
    BelowThreshold,
    ChannelKind,
    CollisionChannel,
    NullUnderflow,
    ProbabilityOverflow,
    SLOT_SELECT,
    apply_boundary,
    collision_probability,
    compute_p_null,
    dsmc_step,
    dsmc_step_sequential,
    elastic_scatter,
    inelastic_scatter,
    make_channel,
    null_collision_step,
    push,
    select_channel,
    select_channels,
)
from ltpic.xsect import XsecTable, fit_piecewise

from conftest import maxwellian_store

ARGON = {
    ChannelKind.ELASTIC: "argon_elastic.txt",
    ChannelKind.IONIZATION: "argon_ionization.txt",
    ChannelKind.EXCITATION: "argon_excitation.txt",
    ChannelKind.TWO_STEP_IONIZATION: "argon_two_step_ionization.txt",
}


@pytest.fixture(scope="module")
def argon():
    return [make_channel(k, f) for k, f in ARGON.items()]


def constant_channel(kind, sigma, threshold=0.0, mass_ratio=CODATA.mass_ratio):
    t = XsecTable("c", threshold, np.array([threshold, 1e4]), np.array([sigma, sigma]))
    target = "m" if kind is ChannelKind.TWO_STEP_IONIZATION else "n"
    return CollisionChannel(kind, target, threshold, fit_piecewise(t), mass_ratio)


def energy(v):
    return CODATA.energy_ev(np.asarray(v))


# ----- probabilities and selection ----- #


def test_probability_zero_speed():
    assert collision_probability(0.0, 1e-19, 1e22, 1e-9) == 0.0


def test_probability_half():
    assert collision_probability(np.log(2.0), 1.0, 1.0, 1.0) == pytest.approx(0.5, rel=1e-15)


def test_probability_reference_value():
    getcontext().prec = 40
    exact = 1 - (-(Decimal("1e-10") * Decimal("1e6") * Decimal("1e-20") * Decimal("3.22e22"))).exp()
    got = collision_probability(1e6, 1e-20, 3.22e22, 1e-10)
    assert got == pytest.approx(float(exact), rel=1e-14)
    assert got == pytest.approx(0.031687, abs=5e-7)


@given(st.floats(0, 1e7), st.floats(0, 1e-18), st.floats(0, 1e23), st.floats(0, 1e-9), st.floats(1.0, 2.0))
def test_probability_bounded_and_monotone(speed, sigma, n, dt, factor):
    p = collision_probability(speed, sigma, n, dt)
    assert 0.0 <= p <= 1.0
    for args in ((speed * factor, sigma, n, dt), (speed, sigma * factor, n, dt),
                 (speed, sigma, n * factor, dt), (speed, sigma, n, dt * factor)):
        assert collision_probability(*args) >= p


def test_select_no_channels_hit():
    assert select_channel([0.0, 0.0], 0.3).channel is None


def test_select_interval_rule():
    assert select_channel([0.3], 0.2).channel == 0
    assert select_channel([0.3], 0.5).channel is None


def test_select_secondary_flag():
    out = select_channel([0.1, 0.5], 0.3, creates=[False, True])
    assert out.channel == 1 and out.secondary


def test_select_overflow():
    with pytest.raises(ProbabilityOverflow):
        select_channel([0.6, 0.5], 0.1)


def test_select_frequencies():
    r = Rng(9).uniform(np.arange(1_000_000), 0, 0)
    chan = select_channels(np.tile([0.1, 0.2], (r.size, 1)), r)
    for c, p in enumerate((0.1, 0.2)):
        k = np.count_nonzero(chan == c)
        sigma = np.sqrt(r.size * p * (1 - p))
        assert abs(k - r.size * p) < 3 * sigma


# ----- scattering ----- #


def test_elastic_massless_keeps_speed():
    v = np.array([3e5, -2e5, 1e5])
    out = elastic_scatter(v, 0.0, 0.37, 0.81)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), rel=1e-15)


def test_elastic_forward_is_identity():
    v = np.array([3e5, -2e5, 1e5])
    np.testing.assert_allclose(elastic_scatter(v, CODATA.mass_ratio, 0.0, 0.42), v, rtol=1e-15)


@given(st.floats(0, 0.999), st.floats(0, 0.999), st.floats(1e-6, 1e-3))
def test_elastic_loss_factor(r1, r2, mr):
    v = np.array([1e6, 2e5, -3e5])
    out = elastic_scatter(v, mr, r1, r2)
    cos_chi = 1 - 2 * r1
    assert energy(out) == pytest.approx(energy(v) * (1 - 2 * mr * (1 - cos_chi)), rel=1e-13)


def test_elastic_mean_loss_and_isotropy():
    n = 1_000_000
    rng = Rng(2)
    r1, r2 = rng.uniform(np.arange(n), 0, 1), rng.uniform(np.arange(n), 0, 2)
    mr = 1e-3
    v = np.tile([1e6, 0.0, 0.0], (n, 1))
    out = elastic_scatter(v, mr, r1, r2)
    loss = 1 - energy(out) / energy(v)
    # E[loss] = 2 mr E[1 - cos chi] = 2 mr, Var = 4 mr^2 Var(1 - cos chi) = 4 mr^2 / 3
    assert abs(loss.mean() - 2 * mr) < 3 * np.sqrt(4 * mr**2 / 3 / n)
    # Rayleigh test on 1e5 directions: 3 |sum u|^2 / n ~ chi2(3)
    u = out[:100_000] / np.linalg.norm(out[:100_000], axis=1)[:, None]
    stat = 3 * np.sum(u.sum(axis=0) ** 2) / u.shape[0]
    assert stats.chi2.sf(stat, 3) > 0.01


def test_inelastic_at_threshold():
    v = np.array([0.0, 0.0, CODATA.speed_from_ev(15.76)])
    v1, v2 = inelastic_scatter(v, 15.76, 0.3, 0.2, 0.7, True, 0.1, 0.9)
    assert energy(v1) == pytest.approx(0.0, abs=1e-12) and energy(v2) == pytest.approx(0.0, abs=1e-12)


def test_split_one_leaves_secondary_at_rest():
    v = np.array([CODATA.speed_from_ev(30.0), 0.0, 0.0])
    _, v2 = inelastic_scatter(v, 15.76, 1.0, 0.2, 0.7, True, 0.1, 0.9)
    assert np.all(v2 == 0.0)


def test_split_example():
    v = np.array([CODATA.speed_from_ev(20.0), 0.0, 0.0])
    v1, v2 = inelastic_scatter(v, 15.76, 0.5, 0.2, 0.7, True, 0.1, 0.9)
    assert energy(v1) == pytest.approx(2.12, rel=1e-12)
    assert energy(v2) == pytest.approx(2.12, rel=1e-12)


def test_excitation_keeps_residual():
    v = np.array([CODATA.speed_from_ev(20.0), 0.0, 0.0])
    v1, v2 = inelastic_scatter(v, 11.5, 0.0, 0.2, 0.7)
    assert v2 is None
    assert energy(v1) == pytest.approx(8.5, rel=1e-13)


def test_below_threshold():
    v = np.array([CODATA.speed_from_ev(10.0), 0.0, 0.0])
    with pytest.raises(BelowThreshold):
        inelastic_scatter(v, 11.5, 0.0, 0.2, 0.7)


@given(st.floats(15.76, 500.0), st.floats(0, 1), st.floats(0, 0.999), st.floats(0, 0.999))
def test_inelastic_energy_bookkeeping(eps, split, r1, r2):
    v = np.array([0.3, -0.4, np.sqrt(0.75)]) * CODATA.speed_from_ev(eps)
    e_in = energy(v)
    v1, v2 = inelastic_scatter(v, 15.76, split, r1, r2, True, 0.5, 0.25)
    total = energy(v1) + energy(v2) + 15.76
    assert abs(total - e_in) <= 8 * np.spacing(e_in)


# ----- push and boundary ----- #


def test_push_field_free_drift():
    x, v = push(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]), 0.0, CODATA.q_over_m, 0.5)
    np.testing.assert_array_equal(x, [3.0, 4.5, 6.0])
    np.testing.assert_array_equal(v, [4.0, 5.0, 6.0])


def test_push_from_rest():
    _, v = push(np.zeros(3), np.zeros(3), 100.0, CODATA.q_over_m, 1e-9)
    assert v[0] == 1e-9 * CODATA.q_over_m * 100.0 and v[1] == v[2] == 0.0


def test_push_reference_kick():
    _, v = push(np.zeros(3), np.zeros(3), 3220.0, CODATA.q_over_m, 1e-10)
    assert v[0] == pytest.approx(-1.602176634e-19 / 9.1093837e-31 * 3220.0 * 1e-10, rel=1e-8)
    assert v[0] == pytest.approx(-5.664e4, rel=1e-3)


def test_boundary():
    L, dx = 1.0, 0.1
    assert apply_boundary(L / 2, L, 2.0) == 2.0
    assert apply_boundary(-dx / 2, L, 2.0) == 0.0
    assert apply_boundary(L, L, 2.0) == 0.0


# ----- kernels ----- #


def test_zero_density_is_pure_push(argon):
    g = Grid(M=4, L=1.0)
    g.efield[:] = [1.0, 2.0, 3.0, 4.0]
    s = maxwellian_store(500, 2.0, L=1.0, seed=3)
    x0, v0 = s.pos[:500].copy(), s.vel[:500].copy()
    st_ = dsmc_step(s, g, argon, 1e-12, Rng(0), 0)
    assert st_.collisions.sum() == 0
    vx = v0[:, 0] + 1e-12 * CODATA.q_over_m * g.efield[g.cell_of(x0[:, 0])]
    np.testing.assert_array_equal(s.vel[:500, 0], vx)
    np.testing.assert_array_equal(s.pos[:500, 0], x0[:, 0] + 1e-12 * vx)


def test_forced_collision_counted_once():
    ch = [constant_channel(ChannelKind.ELASTIC, 1e-10)]
    g = Grid(M=1, L=1.0)
    g.n_n[:] = 1e30
    s = ParticleStore.from_arrays([[0.5, 0, 0]], [[1e6, 0, 0]], [1.0], capacity=2)
    assert collision_probability(1e6, 1e-10, 1e30, 1e-9) == 1.0
    st_ = dsmc_step(s, g, ch, 1e-9, Rng(0), 0)
    assert st_.collisions.tolist() == [1]


def _expected_counts(store, grid, channels, dt):
    """Brute-force sum of per-particle probabilities, one particle at a time."""
    exp = np.zeros(len(channels))
    var = np.zeros(len(channels))
    for l in store.live_indices():
        v = store.vel[l]
        eps = float(energy(v))
        j = int(np.floor(store.pos[l, 0] / grid.dx))
        for c, ch in enumerate(channels):
            p = 1.0 - np.exp(-dt * np.sqrt(v @ v) * float(ch.sigma(eps)) * grid.density(ch.target)[j])
            exp[c] += p
            var[c] += p * (1 - p)
    return exp, var


def test_counts_match_expectation(argon):
    g = Grid(M=10, L=0.01)
    g.n_n[:] = 3.22e22
    g.n_m[:] = 1e20
    s = maxwellian_store(20_000, 5.0, L=0.01, seed=4, capacity=60_000)
    exp, var = _expected_counts(s, g, argon, 1e-11)
    st_ = dsmc_step(s, g, argon, 1e-11, Rng(4), 0)
    assert np.all(np.abs(st_.collisions - exp) <= 3 * np.sqrt(var) + 1e-9)


def test_counts_unbiased_across_seeds(argon):
    g = Grid(M=20, L=0.01)
    g.n_n[:] = 3.22e22
    z = []
    for seed in range(40):
        s = maxwellian_store(20_000, 4.0, L=0.01, seed=seed, capacity=60_000)
        live = s.live_indices()
        eps = energy(s.vel[live])
        p = collision_probability(np.linalg.norm(s.vel[live], axis=1), argon[0].sigma(eps), 3.22e22, 1e-11)
        got = dsmc_step(s, g, argon, 1e-11, Rng(seed), 0).collisions[0]
        z.append((got - p.sum()) / np.sqrt(np.sum(p * (1 - p))))
    z = np.array(z)
    assert abs(z.mean()) <= 3 / np.sqrt(z.size)
    assert 0.6 <= z.std(ddof=1) <= 1.4


def test_parallel_equals_sequential(argon):
    g = Grid(M=10, L=0.01)
    g.n_n[:] = 3.22e22
    g.n_m[:] = 1e21
    g.efield[:] = np.linspace(-5e4, 5e4, 10)
    s = maxwellian_store(3000, 8.0, L=0.01, seed=5, capacity=9000)
    ref, gref = s.copy(), g.copy()
    a = dsmc_step(s, g, argon, 1e-10, Rng(7), 3, workers=4)
    b = dsmc_step_sequential(ref, gref, argon, 1e-10, Rng(7), 3)
    assert a.collisions.tolist() == b.collisions.tolist()
    assert (a.created, a.absorbed) == (b.created, b.absorbed)
    assert s.cursor == ref.cursor
    for name in ("pos", "vel", "weight", "aux", "uid"):
        assert np.array_equal(getattr(s, name), getattr(ref, name)), name
    assert np.array_equal(g.pending, gref.pending)


@given(st.integers(1, 6), st.integers(0, 2**32))
def test_ledger_and_worker_invariance(workers, seed):
    ch = [constant_channel(ChannelKind.ELASTIC, 2e-19), constant_channel(ChannelKind.IONIZATION, 1e-19, 15.76)]
    g = Grid(M=5, L=1e-3)
    g.n_n[:] = 3e22
    g.efield[:] = 1e5
    s = maxwellian_store(400, 20.0, L=1e-3, seed=seed % 1000, capacity=2000)
    ref = s.copy()
    a = dsmc_step(s, g, ch, 5e-12, Rng(seed), 1, workers=workers)
    b = dsmc_step(ref, g.copy(), ch, 5e-12, Rng(seed), 1)
    assert a.n_after == a.n_before + a.created - a.absorbed
    assert a.created == a.collisions[1]
    assert np.array_equal(s.vel, ref.vel) and np.array_equal(s.uid, ref.uid)


def test_ionization_creates_tagged_secondary():
    ch = [constant_channel(ChannelKind.IONIZATION, 1e-10, 15.76)]
    g = Grid(M=1, L=1.0)
    g.n_n[:] = 1e30
    v = CODATA.speed_from_ev(40.0)
    s = ParticleStore.from_arrays([[0.5, 0.1, 0.2]], [[v, 0, 0]], [3.0], capacity=4)
    e0 = float(energy(s.vel[0]))
    st_ = dsmc_step(s, g, ch, 1e-15, Rng(1), 0)
    assert st_.created == 1 and s.cursor == 2
    assert s.weight[1] == 3.0
    assert s.aux[0, AUX_ION_TAG] == 1.0 and s.aux[1, AUX_ION_TAG] == 0.0
    # the secondary was not pushed; the primary moved one step from the shared origin
    assert s.pos[1, 0] == 0.5
    e_after = energy(s.vel[0]) + energy(s.vel[1])
    assert e_after == pytest.approx(e0 - 15.76, rel=1e-9)


def test_two_step_tags():
    ch = [constant_channel(ChannelKind.TWO_STEP_IONIZATION, 1e-10, 4.21)]
    g = Grid(M=1, L=1.0)
    g.n_m[:] = 1e30
    s = ParticleStore.from_arrays([[0.5, 0, 0]], [[CODATA.speed_from_ev(10.0), 0, 0]], [1.0], capacity=4)
    dsmc_step(s, g, ch, 1e-15, Rng(1), 0)
    assert s.aux[0, AUX_ION_TAG] == 1.0 and s.aux[0, AUX_META_TAG] == -1.0


def test_absorbed_tags_go_to_pending():
    ch = [constant_channel(ChannelKind.EXCITATION, 1e-10, 11.5)]
    g = Grid(M=2, L=1.0)
    g.n_n[:] = 1e30
    s = ParticleStore.from_arrays([[0.999999, 0, 0]], [[CODATA.speed_from_ev(20.0), 0, 0]], [2.0], capacity=2)
    s.vel[0] = [CODATA.speed_from_ev(20.0), 0, 0]
    st_ = dsmc_step(s, g, ch, 1e-9, Rng(3), 0)
    if st_.absorbed:
        assert g.pending[1, 1] == 2.0 and s.weight[0] == 0.0
    else:
        assert s.aux[0, AUX_META_TAG] == 1.0


def test_overflow_propagates():
    ch = [constant_channel(ChannelKind.ELASTIC, 1e-10), constant_channel(ChannelKind.EXCITATION, 1e-10, 1.0)]
    g = Grid(M=1, L=1.0)
    g.n_n[:] = 1e30
    s = ParticleStore.from_arrays([[0.5, 0, 0]], [[1e6, 0, 0]], [1.0], capacity=2)
    with pytest.raises(ProbabilityOverflow):
        dsmc_step(s, g, ch, 1e-9, Rng(0), 0)


# ----- null collisions ----- #


def test_p_null_zero_sigma():
    ch = [constant_channel(ChannelKind.ELASTIC, 0.0)]
    assert compute_p_null(ch, [3.22e22], 100.0, 1e-10) == 0.0


def test_p_null_constant_sigma_at_emax():
    ch = [constant_channel(ChannelKind.ELASTIC, 1e-20)]
    v = CODATA.speed_from_ev(50.0)
    assert compute_p_null(ch, [3.22e22], 50.0, 1e-10) == pytest.approx(collision_probability(v, 1e-20, 3.22e22, 1e-10), rel=1e-14)


def test_p_null_matches_sequential_max(argon):
    dens = [3.22e22, 3.22e22, 3.22e22, 0.0]
    n_scan = 20_001
    got = compute_p_null(argon, dens, 100.0, 1e-10, n_scan=n_scan)
    best = 0.0
    for e in np.linspace(0.0, 100.0, n_scan):
        v = CODATA.speed_from_ev(e)
        p = sum(collision_probability(v, ch.sigma(e), n, 1e-10) for ch, n in zip(argon, dens))
        best = max(best, float(p))
    assert got == best
    assert 1e-3 < got < 1


def test_null_all_zero_sigma():
    ch = [constant_channel(ChannelKind.ELASTIC, 0.0)]
    g = Grid(M=1, L=1.0)
    g.n_n[:] = 3e22
    s = maxwellian_store(1000, 2.0, seed=1)
    st_ = null_collision_step(s, g, ch, 1e-10, Rng(0), 0, p_null=0.1)
    assert st_.collisions.sum() == 0
    assert 50 < st_.candidates < 150


def test_null_underflow():
    ch = [constant_channel(ChannelKind.ELASTIC, 1e-18)]
    g = Grid(M=1, L=1.0)
    g.n_n[:] = 3e22
    s = maxwellian_store(1000, 5.0, seed=1)
    with pytest.raises(NullUnderflow):
        null_collision_step(s, g, ch, 1e-10, Rng(0), 0, p_null=0.05)


def test_null_with_unit_ceiling_matches_expectation(argon):
    g = Grid(M=5, L=0.01)
    g.n_n[:] = 3.22e22
    s = maxwellian_store(20_000, 5.0, L=0.01, seed=8, capacity=60_000)
    exp, var = _expected_counts(s, g, argon, 1e-11)
    st_ = null_collision_step(s, g, argon, 1e-11, Rng(8), 0, p_null=1.0)
    assert st_.candidates == 20_000
    assert np.all(np.abs(st_.collisions - exp) <= 3 * np.sqrt(var) + 1e-9)


def test_candidates_use_a_separate_slot():
    # candidate draws must be independent of the selection draw
    rng = Rng(0)
    u = rng.uniform(np.arange(10_000), 0, SLOT_SELECT)
    w = rng.uniform(np.arange(10_000), 0, 7)
    assert abs(np.corrcoef(u, w)[0, 1]) < 0.05
