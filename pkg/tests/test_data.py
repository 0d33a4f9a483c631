"""Dataset construction, CSV ingestion, validation, and fold splitting."""

import numpy as np
import pytest

from dlgee.data import (
    ColumnSpec,
    Dataset,
    FitConfig,
    load_csv,
    split_two_folds,
    take_rows,
    validate,
    write_csv,
)
from dlgee.errors import InputError, ModelError, ValidationError

SPEC = ColumnSpec(y="y", x="conc", delta=0.5, u=("age",), z=("creat",))


def make_dataset(n=20, n_censored=5, seed=0, delta=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(1.0, 1.0, n)
    delta = float(np.sort(x)[n_censored]) - 1e-9 if n_censored else delta
    observed = x > delta
    return Dataset(
        y=rng.normal(size=n),
        x_value=np.where(observed, x, delta),
        x_observed=observed,
        u=rng.normal(size=(n, 1)),
        z=rng.normal(size=(n, 2)),
        delta=delta,
    )


def write_file(path, rows, header="y,conc,age,creat"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return str(path)


class TestLoadCsv:
    def test_flags_from_threshold(self, tmp_path):
        # x = {0.2, 0.7, 0.5, 1.1, 0.3} at delta 0.5 -> observed {F,T,F,T,F}
        rows = [
            "1.0,0.2,30,0.9",
            "2.0,0.7,40,1.1",
            "3.0,0.5,50,1.0",
            "4.0,1.1,35,0.8",
            "5.0,0.3,45,1.2",
        ]
        d = load_csv(write_file(tmp_path / "a.csv", rows), SPEC, check=False)
        np.testing.assert_array_equal(d.x_observed, [False, True, False, True, False])
        assert d.delta == 0.5

    def test_missing_value_names_row(self, tmp_path):
        rows = ["1.0,0.7,NA,0.9", "2.0,0.8,40,1.1"]
        with pytest.raises(InputError, match="row 0, column 'age'"):
            load_csv(write_file(tmp_path / "a.csv", rows), SPEC)

    def test_non_numeric_names_cell(self, tmp_path):
        rows = ["1.0,0.7,30,0.9", "2.0,oops,40,1.1"]
        with pytest.raises(InputError, match="row 1, column 'conc'"):
            load_csv(write_file(tmp_path / "a.csv", rows), SPEC)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("y,conc,age\n1.0,0.7,30\n")
        with pytest.raises(InputError, match="missing column 'creat'"):
            load_csv(str(path), SPEC)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="cannot read"):
            load_csv(str(tmp_path / "nope.csv"), SPEC)

    def test_delta_column_constant(self, tmp_path):
        spec = ColumnSpec(y="y", x="conc", delta="dl", u=(), z=("creat",))
        path = tmp_path / "a.csv"
        path.write_text("y,conc,creat,dl\n1,0.7,0.9,0.5\n2,0.2,1.0,0.5\n3,0.9,1.2,0.5\n4,1.4,0.7,0.5\n")
        d = load_csv(str(path), spec, check=False)
        assert d.delta == 0.5

    def test_per_row_delta_rejected(self, tmp_path):
        spec = ColumnSpec(y="y", x="conc", delta="dl", u=(), z=("creat",))
        path = tmp_path / "a.csv"
        path.write_text("y,conc,creat,dl\n1,0.7,0.9,0.5\n2,0.2,1.0,0.6\n")
        with pytest.raises(InputError, match="per-row detection limits"):
            load_csv(str(path), spec, check=False)

    def test_observed_flag_mismatch(self, tmp_path):
        spec = ColumnSpec(y="y", x="conc", delta=0.5, u=(), z=("creat",), observed="obs")
        path = tmp_path / "a.csv"
        path.write_text("y,conc,creat,obs\n1,0.2,0.9,1\n2,0.8,1.0,1\n3,0.9,0.8,1\n4,1.1,0.7,1\n")
        with pytest.raises(ValidationError) as err:
            load_csv(str(path), spec)
        assert any(v.code == "censor-flag-mismatch" for v in err.value.violations)

    def test_round_trip(self, tmp_path):
        d = make_dataset(n=30, n_censored=8, seed=3)
        spec = ColumnSpec(y="y", x="conc", delta="dl", u=("age",), z=("z1", "z2"))
        path = tmp_path / "rt.csv"
        write_csv(path, d, spec)
        back = load_csv(str(path), spec)
        np.testing.assert_array_equal(back.x_observed, d.x_observed)
        np.testing.assert_allclose(back.y, d.y)
        np.testing.assert_allclose(back.x_value[back.x_observed], d.x_value[d.x_observed])
        np.testing.assert_allclose(back.u, d.u)
        np.testing.assert_allclose(back.z, d.z)
        assert back.delta == d.delta


class TestValidate:
    def test_clean(self):
        assert validate(make_dataset()) == []

    def test_censor_flag_mismatch(self):
        d = make_dataset()
        flags = d.x_observed.copy()
        flags[np.nonzero(~flags)[0][0]] = True  # claim a below-limit row observed
        bad = Dataset(d.y, d.x_value, flags, d.u, d.z, d.delta)
        codes = [v.code for v in validate(bad)]
        assert "censor-flag-mismatch" in codes

    def test_no_observed(self):
        d = make_dataset()
        bad = Dataset(d.y, d.x_value, np.zeros(d.n, bool), d.u, d.z, d.delta)
        assert "no-observed-x" in [v.code for v in validate(bad)]

    def test_too_few_observed(self):
        d = make_dataset(n=20, n_censored=18)
        assert "too-few-observed" in [v.code for v in validate(d)]

    def test_non_finite(self):
        d = make_dataset()
        y = d.y.copy()
        y[4] = np.nan
        bad = Dataset(y, d.x_value, d.x_observed, d.u, d.z, d.delta)
        violations = validate(bad)
        assert any(v.code == "non-finite" and v.row == 4 for v in violations)

    def test_censor_fraction(self):
        d = make_dataset(n=20, n_censored=5)
        assert d.censor_fraction == 5 / 20
        assert d.n_obs == 15


class TestSplitTwoFolds:
    def test_partition(self):
        d = make_dataset(n=10, n_censored=2, seed=7)
        f1, f2, (i1, i2) = split_two_folds(d, seed=7)
        assert f1.n == 5 and f2.n == 5
        np.testing.assert_array_equal(np.sort(np.concatenate([i1, i2])), np.arange(10))

    def test_deterministic(self):
        d = make_dataset(n=11, n_censored=3, seed=1)
        _, _, (a1, a2) = split_two_folds(d, seed=42)
        _, _, (b1, b2) = split_two_folds(d, seed=42)
        np.testing.assert_array_equal(a1, b1)
        np.testing.assert_array_equal(a2, b2)
        assert a1.size == 5 and a2.size == 6

    def test_partition_random_sizes(self):
        rng = np.random.default_rng(0)
        for n in (4, 7, 12, 25):
            d = make_dataset(n=n, n_censored=1, seed=int(rng.integers(1000)))
            _, _, (i1, i2) = split_two_folds(d, seed=3)
            assert i1.size == n // 2 and i2.size == n - n // 2
            np.testing.assert_array_equal(np.sort(np.concatenate([i1, i2])), np.arange(n))

    def test_single_observed_always_degenerate(self):
        # n=4 with one observed row: every 2/2 split isolates it, so every
        # seed must raise (exhaustive over the 3 distinct splits).
        d = make_dataset(n=4, n_censored=3, seed=2)
        assert d.n_obs == 1
        for seed in range(50):
            with pytest.raises(ModelError, match="degenerate split"):
                split_two_folds(d, seed)

    def test_take_rows(self):
        d = make_dataset(n=8, n_censored=2)
        sub = take_rows(d, [0, 3, 5])
        assert sub.n == 3
        np.testing.assert_allclose(sub.y, d.y[[0, 3, 5]])


class TestFitConfig:
    def test_defaults(self):
        cfg = FitConfig()
        assert cfg.working_variance == "constant"
        assert FitConfig(link="logit").working_variance == "bernoulli"

    def test_semiparametric_needs_transform(self):
        with pytest.raises(ModelError, match="transform"):
            FitConfig(auxiliary="semiparametric_aft")

    def test_rejects_unknowns(self):
        with pytest.raises(ModelError):
            FitConfig(link="probit")
        with pytest.raises(ModelError):
            FitConfig(transform="sqrt")
        with pytest.raises(ModelError):
            FitConfig(sscf_folds=3)
