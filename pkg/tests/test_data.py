import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metafap.data import (
    CSV_HEADER,
    Dataset,
    Sample,
    Scaler,
    SplitSpec,
    build_pools,
    fit_scaler,
    frequency_sweep,
    generate_dataset,
    interval_mask,
    preset_split,
    read_csv,
    sample_task,
    write_csv,
)
from metafap.errors import DomainError, InsufficientDataError, ValidationError
from metafap.oracle import DesignVector, response_array


@pytest.fixture(scope="module")
def data10k():
    return generate_dataset(10_000, seed=1)


def test_generation_deterministic():
    a, b = generate_dataset(100, seed=7), generate_dataset(100, seed=7)
    assert a.equals(b)
    assert list(a) == list(b)
    assert not a.equals(generate_dataset(100, seed=8))


def test_generation_respects_gap_and_domain(data10k):
    f = data10k.freq_ghz
    assert not np.any((f > 11) & (f < 15))
    assert f.min() >= 5 and f.max() <= 25
    assert set(np.unique(data10k.x[:, 7])) == {2.0, 3.0, 4.0, 5.0, 6.0}


def test_generation_labels_are_oracle_labels(data10k):
    assert np.all(data10k.y.sum(axis=1) == 1.0)
    np.testing.assert_array_equal(data10k.y[:50], response_array(data10k.x[:50]))


def test_frequency_mass_proportional_to_band_length(data10k):
    low = np.mean(data10k.freq_ghz <= 11)
    assert low == pytest.approx(6 / 16, abs=0.02)


def test_generate_rejects_nonpositive():
    with pytest.raises(ValidationError):
        generate_dataset(0)


def test_dataset_sequence_protocol():
    d = generate_dataset(5, seed=2)
    s = d[0]
    assert isinstance(s, Sample)
    assert isinstance(d[1:3], Dataset) and len(d[1:3]) == 2
    assert Dataset.from_samples(list(d)).equals(d)
    with pytest.raises(ValueError):
        d.x[0, 0] = 1.0


def test_frequency_sweep_skips_gap():
    base = DesignVector(10.0, 30.0, 0.375, 200.0, 2.0, 10.0, 800.0, 4)
    s = frequency_sweep(base, np.linspace(5, 25, 41))
    assert not np.any((s.freq_ghz > 11) & (s.freq_ghz < 15))
    assert np.all(s.x[:, 1:] == base.to_array()[1:])


# -- splits -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "name,expected",
    [
        ("primary", ([(5, 11), (15, 16.5)], [(16.5, 19)], [(19, 22)], [(22, 25)])),
        ("easy", ([(5, 11), (15, 17)], [(17, 20)], [(20, 22.5)], [(22.5, 25)])),
        ("hard", ([(5, 11), (15, 16)], [(16, 18)], [(18, 21.5)], [(21.5, 25)])),
    ],
)
def test_presets_exact(name, expected):
    s = preset_split(name)
    got = (s.train_support_ghz, s.train_query_ghz, s.eval_support_ghz, s.eval_query_ghz)
    assert [list(g) for g in got] == [list(e) for e in expected]
    assert s.name == name
    assert SplitSpec.from_dict(s.to_dict()) == s


def test_unknown_preset_lists_names():
    with pytest.raises(ValidationError, match="primary, easy, hard"):
        preset_split("medium")


def test_split_validation():
    with pytest.raises(ValidationError):
        SplitSpec([(5, 5)], [(6, 7)], [(8, 9)], [(9, 10)])
    with pytest.raises(ValidationError):
        SplitSpec([(5, 8)], [(7, 9)], [(19, 22)], [(22, 25)])
    with pytest.raises(ValidationError):
        SplitSpec([], [(7, 9)], [(19, 22)], [(22, 25)])


def test_interval_mask_closed():
    m = interval_mask(np.array([4.9, 5.0, 11.0, 11.1]), [(5, 11)])
    assert m.tolist() == [False, True, True, False]


def test_shared_endpoint_goes_to_support():
    s = preset_split("primary")
    sup, qry = s.region_masks(np.array([16.5, 19.0, 22.0, 25.0]), "train")
    assert sup.tolist() == [True, False, False, False]
    assert qry.tolist() == [False, True, False, False]
    sup, qry = s.region_masks(np.array([19.0, 22.0, 25.0]), "eval")
    assert sup.tolist() == [True, True, False]
    assert qry.tolist() == [False, False, True]


def test_pools_disjoint_and_cover(data10k):
    split = preset_split("primary")
    pools = build_pools(data10k, split, seed=0)
    assert pools.train.freq_ghz.max() <= 19
    for pool in (pools.val, pools.test):
        assert pool.freq_ghz.min() > 19 - 1e-12
    # val/test rows are disjoint halves of the eval region
    rows = lambda d: {tuple(r) for r in d.x}  # noqa: E731
    assert not rows(pools.val) & rows(pools.test)
    assert abs(len(pools.val) - len(pools.test)) <= 1
    n_eval = np.sum((data10k.freq_ghz > 19) & (data10k.freq_ghz <= 25))
    assert len(pools.val) + len(pools.test) == n_eval
    assert len(pools.train) + n_eval == len(data10k)


# -- scaler -----------------------------------------------------------------------


def test_scaler_idempotent_on_fit_set(data10k):
    sc = fit_scaler(data10k)
    z = sc.transform(data10k.x)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-9
    assert np.max(np.abs(z.std(axis=0) - 1)) < 1e-9
    np.testing.assert_allclose(sc.inverse(z), data10k.x, rtol=1e-12, atol=1e-12)


def test_scaler_constant_column():
    x = np.random.default_rng(0).normal(size=(10, 8))
    x[:, 3] = 7.0
    sc = fit_scaler(x)
    assert sc.std[3] == 1.0
    assert np.all(sc.transform(x)[:, 3] == 0.0)


def test_scaler_not_refit_on_shifted_data(data10k):
    pools = build_pools(data10k, preset_split("primary"))
    sc = fit_scaler(pools.train)
    assert abs(sc.transform(pools.test.x)[:, 0].mean()) > 0.5


def test_scaler_errors_and_roundtrip():
    with pytest.raises(ValidationError):
        fit_scaler(np.empty((0, 8)))
    with pytest.raises(ValidationError):
        Scaler(np.zeros(8), np.zeros(8))
    sc = Scaler(np.arange(8.0), np.ones(8))
    back = Scaler.from_dict(sc.to_dict())
    assert np.array_equal(back.mean, sc.mean) and np.array_equal(back.std, sc.std)


# -- tasks ------------------------------------------------------------------------


def test_task_region_purity(data10k):
    split = preset_split("primary")
    pools = build_pools(data10k, split)
    rng = np.random.default_rng(0)
    for phase, pool in (("train", pools.train), ("eval", pools.test)):
        for tid in range(10):
            n_s = 512 if phase == "train" else 256
            t = sample_task(pool, split, phase, n_s, 128, rng, task_id=tid)
            sup, qry = split.regions(phase)
            assert interval_mask(t.support_freq_ghz, sup).all()
            assert interval_mask(t.query_freq_ghz, qry).all()
            assert t.n_support == n_s and t.n_query == 128 and t.id == tid


def test_task_support_in_train_support(data10k):
    split = preset_split("primary")
    t = sample_task(data10k, split, "train", 512, 256, np.random.default_rng(3))
    f = t.support_freq_ghz
    assert np.all(((f >= 5) & (f <= 11)) | ((f >= 15) & (f <= 16.5)))


def test_task_without_replacement_and_scaling(data10k):
    split = preset_split("primary")
    sc = fit_scaler(data10k)
    t = sample_task(data10k, split, "train", 300, 100, np.random.default_rng(4), sc)
    raw = sc.inverse(t.support_x)
    assert len({tuple(np.round(r, 6)) for r in raw}) == 300
    np.testing.assert_allclose(raw[:, 0], t.support_freq_ghz, rtol=1e-12)


def test_task_determinism(data10k):
    split = preset_split("primary")
    a = sample_task(data10k, split, "train", 64, 32, np.random.default_rng(9))
    b = sample_task(data10k, split, "train", 64, 32, np.random.default_rng(9))
    assert np.array_equal(a.support_x, b.support_x) and np.array_equal(a.query_y, b.query_y)


def test_task_errors(data10k):
    split = preset_split("primary")
    with pytest.raises(ValidationError):
        sample_task(data10k, split, "train", 0, 10, np.random.default_rng(0))
    with pytest.raises(InsufficientDataError, match="eval query region"):
        sample_task(data10k[:200], split, "eval", 1, 10_000, np.random.default_rng(0))
    with pytest.raises(InsufficientDataError, match="train support region"):
        sample_task(data10k[:200], split, "train", 10_000, 1, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        sample_task(data10k, split, "test", 1, 1, np.random.default_rng(0))


# -- CSV --------------------------------------------------------------------------


def test_csv_roundtrip_exact(tmp_path):
    d = generate_dataset(1000, seed=5)
    p = tmp_path / "d.csv"
    write_csv(d, p)
    back = read_csv(p)
    rel = np.abs(back.x - d.x) / np.maximum(np.abs(d.x), 1e-300)
    assert rel.max() < 1e-12
    assert back.equals(d)
    assert p.read_text().splitlines()[0] == ",".join(CSV_HEADER)


def test_csv_header_mismatch(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("freq,theta\n1,2\n")
    with pytest.raises(ValidationError, match=":1:"):
        read_csv(p)


def test_csv_gap_frequency_rejected(tmp_path):
    p = tmp_path / "gap.csv"
    write_csv(generate_dataset(3, seed=0), p)
    lines = p.read_text().splitlines()
    cells = lines[2].split(",")
    cells[0] = "13"
    lines[2] = ",".join(cells)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DomainError, match=":3:"):
        read_csv(p)


def test_csv_malformed_row(tmp_path):
    p = tmp_path / "m.csv"
    write_csv(generate_dataset(3, seed=0), p)
    with open(p, "a") as fh:
        fh.write("1,2,3\n")
    with pytest.raises(ValidationError, match=":5:"):
        read_csv(p)
    p.write_text(",".join(CSV_HEADER) + "\n" + ",".join(["x"] * len(CSV_HEADER)) + "\n")
    with pytest.raises(ValidationError, match=":2:"):
        read_csv(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_csv_roundtrip_property(tmp_path_factory, seed):
    d = generate_dataset(20, seed=seed)
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(list(d), p)
    assert read_csv(p).equals(d)
