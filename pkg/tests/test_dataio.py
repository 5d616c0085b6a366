import filecmp
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from adamhf import dataio
from adamhf.dataio import (FormatError, decode_tensor, encode_tensor, generate_synthetic, make_folds,
                           read_manifest, read_tensor_file, subsample_patches, write_tensor_file)
from adamhf.numerics import ConfigurationError
from adamhf.survival import c_index_harrell


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_roundtrip_is_byte_exact(x):
    buf = encode_tensor(x)
    back = decode_tensor(buf)
    assert back.shape == x.shape
    assert back.tobytes() == x.tobytes()
    assert encode_tensor(back) == buf


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert buf[:5] == b"AMHF\x01"
    assert struct.unpack("<3I", buf[5:17]) == (2, 2, 3)
    assert len(buf) == 17 + 6 * 4


def test_file_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)
    write_tensor_file(tmp_path / "a.amhf", x)
    assert read_tensor_file(tmp_path / "a.amhf").tobytes() == x.tobytes()


def test_empty_file(tmp_path):
    (tmp_path / "e.amhf").write_bytes(b"")
    with pytest.raises(FormatError) as err:
        read_tensor_file(tmp_path / "e.amhf")
    assert err.value.offset == 0


def test_bad_magic_offset_zero():
    buf = bytearray(encode_tensor(np.ones(3, dtype=np.float32)))
    buf[0] ^= 0xFF
    with pytest.raises(FormatError, match="offset 0") as err:
        decode_tensor(bytes(buf))
    assert err.value.offset == 0


def test_truncated_payload():
    buf = encode_tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(FormatError, match="truncated"):
        decode_tensor(buf[:-1])


def test_dimension_overflow():
    buf = b"AMHF\x01" + struct.pack("<3I", 2, 0xFFFFFFFF, 0xFFFFFFFF)
    with pytest.raises(FormatError, match="overflow"):
        decode_tensor(buf)


def test_rank_limit():
    with pytest.raises(ConfigurationError):
        encode_tensor(np.zeros((1, 1, 1, 1)))
    with pytest.raises(FormatError):
        decode_tensor(b"AMHF\x01" + struct.pack("<I", 4))


def test_generation_is_byte_identical(tmp_path):
    a = generate_synthetic(tmp_path / "a", n_samples=12, n_p_range=(5, 9), seed=3)
    generate_synthetic(tmp_path / "b", n_samples=12, n_p_range=(5, 9), seed=3)
    for name in ["manifest.csv", "dataset.meta"] + [r.patho_path for r in a.rows] + [r.geno_path for r in a.rows]:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name


def test_manifest_contract(tmp_path):
    m = generate_synthetic(tmp_path, n_samples=15, d=6, n_p_range=(3, 8), t_bins=3, seed=1)
    m2 = read_manifest(tmp_path / "manifest.csv")
    assert m2.ids == m.ids and len(set(m2.ids)) == 15
    assert m2.d == 6 and m2.t_bins == 3
    for row in m2.rows:
        bag = m2.load(row)
        assert bag.x_g.shape == (6, 6)
        assert 3 <= bag.x_p.shape[0] <= 8 and bag.x_p.shape[1] == 6
        assert 1 <= bag.t <= 3 and bag.c in (0, 1)


def test_manifest_duplicate_ids(tmp_path):
    generate_synthetic(tmp_path, n_samples=10, n_p_range=(2, 3))
    text = (tmp_path / "manifest.csv").read_text().splitlines()
    (tmp_path / "manifest.csv").write_text("\n".join(text + [text[1]]) + "\n")
    with pytest.raises(ConfigurationError):
        read_manifest(tmp_path)


@pytest.mark.parametrize("kwargs", [dict(n_samples=5), dict(d=2), dict(t_bins=1), dict(n_p_range=(5, 2)),
                                    dict(noise=-1.0)])
def test_generation_rejects_bad_settings(tmp_path, kwargs):
    with pytest.raises(ConfigurationError):
        generate_synthetic(tmp_path, **kwargs)


def test_noise_free_highest_risk_dies_first():
    planted = dataio.planted_signal(0, 16, 4)
    risks = np.random.default_rng(0).normal(size=200)
    top = risks.max()
    probs = dataio.event_distribution(dataio.hazard_table(top, planted.thresholds, 0.0))
    expected_t = float(np.sum(np.arange(1, 5) * probs))
    assert expected_t == 1.0


def test_noise_free_hazard_is_step():
    planted = dataio.planted_signal(0, 8, 4)
    # thresholds are the 3/4, 1/2, 1/4 quantiles of N(0,1)
    assert np.allclose(planted.thresholds, [0.6744897501960817, 0.0, -0.6744897501960817])
    assert list(dataio.hazard_table(0.1, planted.thresholds, 0.0)) == [0, 1, 1, 1]


def test_hazards_increase_with_risk():
    th = dataio.planted_signal(0, 8, 4).thresholds
    lo, hi = dataio.hazard_table(-1.0, th, 0.3), dataio.hazard_table(1.0, th, 0.3)
    assert np.all(hi >= lo)


def test_censor_fraction(tmp_path):
    m = generate_synthetic(tmp_path, n_samples=500, d=4, n_p_range=(1, 2), seed=0)
    frac = np.mean([r.c for r in m.rows])
    assert abs(frac - 0.3) <= 0.1


def test_censored_times_fall_before_event(tmp_path):
    m = generate_synthetic(tmp_path, n_samples=300, d=4, n_p_range=(1, 2), seed=2, noise=0.0)
    # every censored record sits strictly below the last bin
    assert all(r.t < m.t_bins for r in m.rows if r.c == 1)


def test_planted_genomic_signal_is_learnable(tmp_path):
    from sklearn.linear_model import LogisticRegression

    m = generate_synthetic(tmp_path, n_samples=200, d=16, n_p_range=(8, 16), seed=0)
    planted = dataio.planted_signal(0, 16, 4)
    bags = m.load_all()
    X = np.stack([bags[i].x_g[planted.geno_groups].ravel() for i in m.ids])
    t = np.array([bags[i].t for i in m.ids])
    c = np.array([bags[i].c for i in m.ids])
    early = (t <= 2).astype(int)
    clf = LogisticRegression(max_iter=1000).fit(X, early)
    risk = clf.decision_function(X)
    uncensored = c == 0
    assert c_index_harrell(risk[uncensored], t[uncensored], c[uncensored]) >= 0.8


def test_folds_even_partition():
    ids = [f"s{i}" for i in range(10)]
    folds = make_folds(ids, 5, seed=0)
    assert [len(f.valid_ids) for f in folds] == [2] * 5
    assert sorted(sum((f.valid_ids for f in folds), [])) == sorted(ids)
    for f in folds:
        assert not set(f.train_ids) & set(f.valid_ids)
        assert set(f.train_ids) | set(f.valid_ids) == set(ids)


@given(st.integers(5, 60), st.integers(2, 5), st.integers(0, 1000))
def test_folds_partition_property(n, k, seed):
    ids = [f"x{i}" for i in range(n)]
    folds = make_folds(ids, k, seed)
    valid = sum((f.valid_ids for f in folds), [])
    assert sorted(valid) == sorted(ids)
    sizes = [len(f.valid_ids) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert [f.valid_ids for f in make_folds(ids, k, seed)] == [f.valid_ids for f in folds]


def test_folds_too_many():
    with pytest.raises(ConfigurationError):
        make_folds(["a", "b"], 5)


def test_subsample_identity_when_small():
    x = np.arange(6.0).reshape(3, 2)
    assert subsample_patches(x, 5, 0) is x


def test_subsample_deterministic_and_without_replacement():
    x = np.arange(40.0).reshape(20, 2)
    a = subsample_patches(x, 7, 11)
    b = subsample_patches(x, 7, 11)
    assert np.array_equal(a, b)
    assert len(set(a[:, 0].tolist())) == 7


def test_default_patch_budget():
    from adamhf.config import RunConfig

    assert RunConfig().n_s == 2048


def test_quantile_bins():
    times = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
    bins = dataio.quantile_bins(times, np.zeros(8), 4)
    assert list(bins) == [1, 1, 2, 2, 3, 3, 4, 4]
