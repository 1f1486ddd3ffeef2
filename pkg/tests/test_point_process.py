import math

import numpy as np
import pytest
from scipy import stats

from setflow.errors import ConfigError, ParseError
from setflow.point_process import (
    IntensitySpec,
    Region,
    as_pointset,
    default_hawkes_spec,
    default_poisson_region,
    default_poisson_spec,
    poisson_intensity,
    read_corpus,
    sample_corpus,
    sample_hawkes,
    sample_poisson,
    write_corpus,
)

from oracles import hawkes_mean_count, poisson_chi2_pvalue, poisson_mass


def test_intensity_at_first_center_matches_hand_value():
    spec = default_poisson_spec()
    b1, b2, b3 = (np.array(c) for c in spec.centers)
    want = 0.3 + 0.3 * math.exp(-np.sum((b1 - b2) ** 2)) + 0.4 * math.exp(-np.sum((b1 - b3) ** 2))
    assert poisson_intensity(b1, spec) == pytest.approx(want, rel=1e-14)


def test_intensity_single_component():
    spec = IntensitySpec.poisson(2.0, [1.0], [[1.0, 0.0]])
    assert poisson_intensity([0.0, 0.0], spec) == pytest.approx(2 * math.exp(-1), rel=1e-14)


def test_intensity_decays_far_away():
    assert poisson_intensity([1e3, -1e3], default_poisson_spec()) == 0.0


def test_intensity_rejects_hawkes_spec():
    with pytest.raises(ConfigError):
        poisson_intensity([0.0, 0.0], default_hawkes_spec())


@pytest.mark.parametrize("weights", [(0.5, 0.6), (-0.1, 1.1)])
def test_weights_must_form_a_distribution(weights):
    with pytest.raises(ConfigError):
        IntensitySpec.poisson(1.0, weights, [[0, 0], [1, 1]])


def test_supercritical_hawkes_rejected():
    with pytest.raises(ConfigError, match="supercritical"):
        IntensitySpec.hawkes(0.5, 3.0, 3.0)


def test_region_validation():
    with pytest.raises(ConfigError):
        Region((0, 0), (1, 0))
    r = Region((0, -1), (2, 1))
    assert r.volume == 4.0 and r.dim == 2
    assert Region.from_dict(r.to_dict()) == r


def test_constant_intensity_mean_count():
    # a unit-width bump seen on a 1e-7 box is flat to ~1e-14, so this is a
    # constant intensity with total mass 3
    region = Region((0.5 - 1e-7, 0.5 - 1e-7), (0.5 + 1e-7, 0.5 + 1e-7))
    spec = IntensitySpec.poisson(3.0 / region.volume, [1.0], [[0.5, 0.5]])
    counts = np.array([len(s) for s in sample_corpus(spec, 100_000, 7, region=region)])
    se = math.sqrt(3.0 / len(counts))
    assert abs(counts.mean() - 3.0) < 3 * se


def test_zero_rate_gives_empty_sets():
    spec = IntensitySpec.poisson(0.0, [1.0], [[0.0, 0.0]])
    for s in sample_corpus(spec, 20, 0, region=Region((-1, -1), (1, 1))):
        assert s.shape == (0, 2)


def test_poisson_deterministic_per_seed():
    spec, reg = default_poisson_spec(), default_poisson_region()
    a, b = sample_poisson(spec, reg, 11), sample_poisson(spec, reg, 11)
    np.testing.assert_array_equal(a, b)
    assert reg.contains(a).all()


def test_poisson_count_law_chi_square():
    spec, reg = default_poisson_spec(), default_poisson_region()
    lam = poisson_mass(spec.mu, spec.weights, spec.centers, reg.lower, reg.upper)
    counts = [len(s) for s in sample_corpus(spec, 10_000, 2024)]
    assert poisson_chi2_pvalue(counts, lam) > 0.01


def test_hawkes_without_excitation_is_poisson():
    spec = IntensitySpec.hawkes(0.5, 0.0, 3.0)
    counts = np.array([len(s) for s in sample_corpus(spec, 4000, 3, horizon=20.0)])
    se = math.sqrt(10.0 / len(counts))
    assert abs(counts.mean() - 10.0) < 4 * se
    # given the count, homogeneous event times are i.i.d. uniform on the window
    times = np.concatenate([s[:, 0] for s in sample_corpus(spec, 500, 4, horizon=20.0)])
    assert stats.kstest(times, "uniform", args=(0, 20.0)).pvalue > 0.01


def test_hawkes_mean_count_paper_params():
    spec = default_hawkes_spec()
    counts = np.array([len(s) for s in sample_corpus(spec, 10_000, 5, horizon=100.0)])
    want = hawkes_mean_count(0.5, 0.5, 3.0, 100.0)
    assert want == pytest.approx(60.0, abs=0.05)
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - want) < 3 * se


def test_hawkes_events_sorted_inside_horizon():
    ev = sample_hawkes(default_hawkes_spec(), 50.0, 1)
    assert ev.ndim == 2 and ev.shape[1] == 1
    assert np.all(np.diff(ev[:, 0]) > 0) and ev.min() >= 0 and ev.max() <= 50.0
    np.testing.assert_array_equal(ev, sample_hawkes(default_hawkes_spec(), 50.0, 1))


def test_corpus_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    sets = [rng.normal(size=(rng.integers(0, 6), 2)) for _ in range(100)]
    sets[3] = np.zeros((0, 2))
    write_corpus(tmp_path / "c.jsonl", sets, meta={"note": "x"})
    back, header = read_corpus(tmp_path / "c.jsonl", return_header=True)
    assert header["count"] == 100 and header["meta"] == {"note": "x"}
    assert len(back) == 100
    for a, b in zip(sets, back):
        np.testing.assert_array_equal(a, b)
    assert back[3].shape == (0, 2)


def test_empty_corpus_has_header_only(tmp_path):
    write_corpus(tmp_path / "e.jsonl", [])
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert read_corpus(tmp_path / "e.jsonl") == []


def test_malformed_record_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    write_corpus(p, [np.ones((2, 2)), np.ones((1, 2))])
    lines = p.read_text().splitlines()
    lines[2] = '{"dim": 2, "points": [[1.0, 2.0], [3.0'
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="line 3"):
        read_corpus(p)


def test_mixed_dims_rejected(tmp_path):
    with pytest.raises(ConfigError):
        write_corpus(tmp_path / "m.jsonl", [np.ones((1, 2)), np.ones((1, 3))])


def test_as_pointset_shapes():
    assert as_pointset([]).shape == (0, 1)
    assert as_pointset(np.zeros((0, 2))).shape == (0, 2)
    assert as_pointset([1.0, 2.0]).shape == (2, 1)
