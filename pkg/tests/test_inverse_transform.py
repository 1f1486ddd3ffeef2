import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from setflow.errors import ConfigError
from setflow.inverse_transform import (
    CONVERGED,
    WARMED,
    DecodeConfig,
    GridTarget,
    MixtureTarget,
    add_noisy_peak,
    decode,
    deduplicate,
    gradient_search,
    init_particles,
    langevin_warmup,
    reflect,
    single_pass_cluster,
)
from setflow.metrics import chamfer
from setflow.point_process import Region
from setflow.representation import GridFunction, MixtureRepr, encode, rasterize

from oracles import gauss, well_separated

UNIT = Region((0.0, 0.0), (1.0, 1.0))


# -- particles


def test_init_uniform_mean():
    reg = Region((-1.0, 2.0), (3.0, 2.5))
    sw = init_particles(reg, 100_000, 0)
    se = reg.widths / math.sqrt(12 * sw.m)
    assert np.all(np.abs(sw.particles.mean(axis=0) - 0.5 * (reg.lo + reg.hi)) < 4 * se)
    assert sw.stage == "init" and reg.contains(sw.particles).all()


def test_init_single_and_deterministic():
    a = init_particles(UNIT, 1, 5)
    assert a.particles.shape == (1, 2) and UNIT.contains(a.particles).all()
    np.testing.assert_array_equal(init_particles(UNIT, 50, 5).particles, init_particles(UNIT, 50, 5).particles)
    with pytest.raises(ConfigError):
        init_particles(UNIT, 0, 5)


def test_reflect_folds_into_box():
    y = np.array([[-0.25, 1.5], [2.25, 0.5], [0.3, -3.1]])
    np.testing.assert_allclose(reflect(y, UNIT), [[0.25, 0.5], [0.25, 0.5], [0.3, 0.9]], atol=1e-12)


# -- Langevin


def test_zero_beta_only_changes_stage():
    r = MixtureRepr([[0.5, 0.5]], [0.1], 0.1)
    sw = init_particles(UNIT, 100, 1)
    out = langevin_warmup(sw, MixtureTarget(r, UNIT), 0.0, 50, 2)
    np.testing.assert_array_equal(out.particles, sw.particles)
    assert out.stage == WARMED


def test_warmup_needs_fresh_swarm():
    r = MixtureRepr([[0.5, 0.5]], [0.1], 0.1)
    sw = langevin_warmup(init_particles(UNIT, 10, 1), MixtureTarget(r, UNIT), 1e-4, 1, 2)
    with pytest.raises(ConfigError):
        langevin_warmup(sw, MixtureTarget(r, UNIT), 1e-4, 1, 2)


def test_langevin_variance_1d():
    s = 0.1
    reg = Region((-1.0,), (1.0,))
    target = MixtureTarget(MixtureRepr([[0.0]], [s], 0.1), reg)
    sw = langevin_warmup(init_particles(reg, 10_000, 3), target, 1e-3, 5000, 4)
    assert np.var(sw.particles[:, 0]) == pytest.approx(s * s, rel=0.1)


def test_langevin_ks_against_target():
    s = 0.05
    target = MixtureTarget(MixtureRepr([[0.5, 0.5]], [s], 0.1), UNIT)
    sw = langevin_warmup(init_particles(UNIT, 5000, 5), target, 0.05 * s * s, 600, 6)
    for k in range(2):
        assert stats.kstest(sw.particles[:, k], "norm", args=(0.5, s)).pvalue > 0.01


def test_warmup_concentrates_mass_in_top_decile():
    r = MixtureRepr([[0.25, 0.3], [0.7, 0.75]], [0.06, 0.08], 0.1)
    target = MixtureTarget(r, UNIT)
    xs = (np.arange(200) + 0.5) / 200
    grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    dens = np.array([0.5 * gauss(p, r.centers[0], 0.06 ** 2) + 0.5 * gauss(p, r.centers[1], 0.08 ** 2)
                     for p in grid])
    cut = np.quantile(dens, 0.9)
    before = init_particles(UNIT, 4000, 7)
    after = langevin_warmup(before, target, (0.5 * 0.06) ** 2, 300, 8)
    frac = [np.mean(target.value(sw.particles) >= cut) for sw in (before, after)]
    assert frac[1] > frac[0] + 0.5


# -- gradient ascent


def test_lone_center_is_fixed_point():
    r = MixtureRepr([[0.4, 0.6]], [0.1], 0.1)
    sw = replace(init_particles(UNIT, 1, 0), particles=np.array([[0.4, 0.6]]))
    out = gradient_search(sw, MixtureTarget(r, UNIT), 1e-3, 100)
    np.testing.assert_array_equal(out.particles, [[0.4, 0.6]])
    assert out.stage == CONVERGED
    assert out.diagnostics["final_grad_norms"][0] == 0.0


def test_ascent_converges_1d():
    sigma = 1.0
    reg = Region((-5.0,), (5.0,))
    sw = replace(init_particles(reg, 1, 0), particles=np.array([[0.5 * sigma]]))
    out = gradient_search(sw, MixtureTarget(MixtureRepr([[0.0]], [sigma], 1.0), reg), 0.1 * sigma ** 2, 1000)
    assert abs(out.particles[0, 0]) < 1e-6 * sigma


def test_ascent_is_monotone():
    rng = np.random.default_rng(11)
    for _ in range(5):
        r = MixtureRepr(rng.uniform(0.2, 0.8, (4, 2)), rng.uniform(0.03, 0.1, 4), 0.1)
        target = MixtureTarget(r, UNIT)
        alpha = 0.5 * r.sigmas.min() ** 2 / target.peak_value()
        sw = replace(init_particles(UNIT, 200, 12), stage=WARMED)
        prev = target.value(sw.particles)
        for _ in range(50):
            sw = replace(gradient_search(sw, target, alpha, 1), stage=WARMED)
            cur = target.value(sw.particles)
            assert np.all(cur >= prev - 1e-12 * target.peak_value())
            prev = cur


# -- de-duplication


def test_dedup_hand_example():
    out = deduplicate(np.array([[0.0], [0.01], [5.0], [5.02], [9.0]]), 0.1, 2)
    np.testing.assert_allclose(out[:, 0], [0.005, 5.01], atol=1e-12)


def test_dedup_identical_and_no_filter():
    out = deduplicate(np.full((7, 2), 0.3), 0.01, 3)
    np.testing.assert_array_equal(out, [[0.3, 0.3]])
    pts = np.array([[0.0], [0.01], [5.0], [5.02], [9.0]])
    assert len(deduplicate(pts, 0.1, 1)) == len(single_pass_cluster(pts, 0.1).sizes) == 3


def test_dedup_order_sensitivity_is_bounded():
    rng = np.random.default_rng(13)
    blobs = np.vstack([c + 0.004 * rng.standard_normal((30, 2)) for c in ([0.2, 0.2], [0.7, 0.4])])
    a = deduplicate(blobs, 0.05, 3)
    b = deduplicate(blobs[rng.permutation(len(blobs))], 0.05, 3)
    a, b = a[np.lexsort(a.T)], b[np.lexsort(b.T)]
    assert a.shape == b.shape and np.abs(a - b).max() < 0.05


def test_dedup_validation():
    with pytest.raises(ConfigError):
        deduplicate(np.zeros((2, 1)), 0.0, 1)
    with pytest.raises(ConfigError):
        deduplicate(np.zeros((2, 1)), 0.1, 0)


# -- full decode


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(m=0)
    with pytest.raises(ConfigError):
        DecodeConfig(merge_radius=0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_round_trip_small_eps(seed):
    rng = np.random.default_rng(seed)
    x = well_separated(rng, int(rng.integers(3, 11)), 0.15)
    r = encode(x, 0.01)
    pts, diag = decode(r, DecodeConfig.for_mixture(r, UNIT, seed=seed), region=UNIT)
    assert len(pts) == len(x)
    assert chamfer(pts, x) < 1e-3
    assert diag["n_groups"] >= len(x) and diag["langevin_resets"] == 0


def test_decode_is_deterministic():
    r = encode(well_separated(np.random.default_rng(3), 4, 0.2), 0.02)
    cfg = DecodeConfig.for_mixture(r, UNIT, seed=9, m=512, s_lgvin=300)
    a, _ = decode(r, cfg, region=UNIT)
    b, _ = decode(r, cfg, region=UNIT)
    np.testing.assert_array_equal(a, b)


def test_near_uniform_target_decodes_to_empty():
    gf = GridFunction(UNIT, (16, 16), 1e-9 * (1 + 1e-3 * np.random.default_rng(0).random(256)))
    cfg = DecodeConfig(m=256, s_lgvin=20, s_grad=20, alpha=1e-3, beta=1e-4,
                       merge_radius=0.01, min_group=200)
    pts, diag = decode(GridTarget(gf), cfg)
    assert pts.shape == (0, 2) and diag["empty_output"]


def test_trajectory_recording():
    r = MixtureRepr([[0.5, 0.5]], [0.1], 0.1)
    cfg = DecodeConfig(m=16, s_lgvin=10, s_grad=5, alpha=1e-3, beta=1e-4, merge_radius=0.05, min_group=1)
    _, diag = decode(r, cfg, region=UNIT, record_every=5)
    assert [s for s, _ in diag["trajectory"]] == [0, 5, 10, 15]


def test_noisy_peak_adds_requested_mass():
    r = encode(np.array([[0.3, 0.3], [0.7, 0.6]]), 0.1)
    gf = rasterize(r, UNIT, (128, 128))
    g2 = add_noisy_peak(gf, [0.5, 0.9], 0.03, 0.01)
    assert g2.integral() - gf.integral() == pytest.approx(0.01 * gf.integral(), rel=1e-3)
