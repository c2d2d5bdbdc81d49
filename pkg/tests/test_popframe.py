import math

import numpy as np
import pytest

from survinfer.popframe import (
    CATEGORICAL,
    CONTINUOUS,
    FeatureSchema,
    FinitePopulation,
    PopulationSchema,
    SchemaError,
    SimulationConfig,
    Unit,
    export_population,
    generate_linear_population,
    ingest_population,
)


class TestGeneration:
    def test_equal_seeds_bit_identical(self):
        cfg = SimulationConfig(N=200, n=20, seed=99, n2_grid=(2,))
        a = generate_linear_population(cfg)
        b = generate_linear_population(cfg)
        assert np.array_equal(a.feature_matrix, b.feature_matrix)
        assert np.array_equal(a.y_values, b.y_values)
        assert a == b

    def test_different_seeds_differ(self):
        cfg = SimulationConfig(N=50, n=5, seed=1, n2_grid=(2,))
        other = generate_linear_population(cfg, rng_seed=2)
        assert not np.array_equal(generate_linear_population(cfg).feature_matrix,
                                  other.feature_matrix)

    def test_x1_variance_against_monte_carlo_oracle(self):
        # Oracle: 10^6 lognormal(1,1) draws, independent generator. The
        # population variance of one N-sized realization scatters around the
        # oracle value with a block-estimated standard error.
        oracle_rng = np.random.default_rng(424242)
        draws = oracle_rng.lognormal(1.0, 1.0, 1_000_000)
        oracle_var = draws.var()
        theoretical = (math.e - 1) * math.exp(3)  # exp(4) - exp(3)
        assert abs(oracle_var - theoretical) / theoretical < 0.1

        N = 1000
        block_vars = draws.reshape(1000, N).var(axis=1)
        se = block_vars.std(ddof=1)
        cfg = SimulationConfig(N=N, n=100, seed=7, n2_grid=(2,))
        pop = generate_linear_population(cfg)
        realized = pop.feature_column("x1").var()
        assert abs(realized - oracle_var) < 4 * se

    def test_zero_betas_zero_noise_gives_zero_targets(self):
        cfg = SimulationConfig(N=100, n=10, beta1=0.0, beta2=0.0,
                               noise_scale=0.0, seed=3, n2_grid=(2,))
        pop = generate_linear_population(cfg)
        assert pop.total_y() == 0.0
        assert np.all(pop.y_values == 0.0)

    def test_noise_uses_realized_x1_variance(self):
        cfg = SimulationConfig(N=4000, n=10, beta1=0.0, beta2=0.0, seed=11, n2_grid=(2,))
        pop = generate_linear_population(cfg)
        sigma2 = pop.feature_column("x1").var()
        resid_var = pop.y_values.var()
        assert resid_var == pytest.approx(sigma2 / 4, rel=0.15)


class TestSimulationConfig:
    def test_rejects_bad_sizes(self):
        with pytest.raises(SchemaError):
            SimulationConfig(N=10, n=20)
        with pytest.raises(SchemaError):
            SimulationConfig(N=10, n=5, n2_grid=(5,))
        with pytest.raises(SchemaError):
            SimulationConfig(N=10, n=5, n2_grid=(0,))
        with pytest.raises(SchemaError):
            SimulationConfig(N=10, n=5, replicates=0)


class TestIngestion:
    def _schema(self, with_y=True, domains=()):
        feats = FeatureSchema(names=("turnover", "sector"),
                              kinds=(CONTINUOUS, CATEGORICAL))
        return PopulationSchema(features=feats,
                                y_column="y" if with_y else None,
                                domain_columns=tuple(domains))

    def test_three_row_csv(self, tmp_path):
        path = tmp_path / "pop.csv"
        path.write_text("id,turnover,sector,y\na,1.5,ind,10\nb,2.5,srv,20\nc,3.5,ind,\n")
        pop = ingest_population(path, self._schema())
        assert pop.N == 3
        assert pop.ids == ("a", "b", "c")
        assert pop.units[2].y is None
        # sorted label table: ind -> 0, srv -> 1
        assert pop.feature_schema.categories["sector"] == ("ind", "srv")
        assert pop.feature_column("sector").tolist() == [0.0, 1.0, 0.0]

    def test_duplicate_id_names_the_id(self, tmp_path):
        path = tmp_path / "pop.csv"
        path.write_text("id,turnover,sector,y\na,1,ind,1\na,2,srv,2\n")
        with pytest.raises(SchemaError, match="'a'"):
            ingest_population(path, self._schema())

    def test_missing_y_column_gives_all_missing(self, tmp_path):
        path = tmp_path / "pop.csv"
        path.write_text("id,turnover,sector\na,1,ind\nb,2,srv\n")
        pop = ingest_population(path, self._schema())
        assert all(u.y is None for u in pop.units)

    def test_non_numeric_reports_row_index(self, tmp_path):
        path = tmp_path / "pop.csv"
        path.write_text("id,turnover,sector,y\na,1,ind,1\nb,oops,srv,2\n")
        with pytest.raises(SchemaError, match="row 2"):
            ingest_population(path, self._schema())

    def test_missing_feature_column_rejected(self, tmp_path):
        path = tmp_path / "pop.csv"
        path.write_text("id,turnover,y\na,1,1\n")
        with pytest.raises(SchemaError, match="sector"):
            ingest_population(path, self._schema())

    @pytest.mark.parametrize("suffix", [".csv", ".json"])
    def test_round_trip(self, tmp_path, suffix):
        path = tmp_path / ("pop" + suffix)
        path2 = tmp_path / ("pop2" + suffix)
        src = tmp_path / "src.csv"
        src.write_text(
            "id,turnover,sector,y,region\n"
            "a,1.25,ind,10.5,N\nb,2.5,srv,,S\nc,0.125,ind,7.25,N\n"
        )
        schema = self._schema(domains=("region",))
        pop = ingest_population(src, schema)
        export_population(pop, path, schema)
        again = ingest_population(path, schema)
        assert again == pop
        export_population(again, path2, schema)
        assert path.read_bytes() == path2.read_bytes()


class TestInvariants:
    def test_arity_enforced(self):
        schema = FeatureSchema(names=("a", "b"), kinds=(CONTINUOUS, CONTINUOUS))
        units = [Unit(id="u0", x=(1.0, 2.0)), Unit(id="u1", x=(1.0,))]
        with pytest.raises(SchemaError, match="u1"):
            FinitePopulation(units, schema)

    def test_domain_schemes_consistent(self):
        schema = FeatureSchema(names=("a",), kinds=(CONTINUOUS,))
        units = [Unit(id="u0", x=(1.0,), domain_labels={"region": "N"}),
                 Unit(id="u1", x=(2.0,))]
        with pytest.raises(SchemaError, match="domain schemes"):
            FinitePopulation(units, schema)

    def test_duplicate_unit_ids(self):
        schema = FeatureSchema(names=("a",), kinds=(CONTINUOUS,))
        units = [Unit(id="u", x=(1.0,)), Unit(id="u", x=(2.0,))]
        with pytest.raises(SchemaError, match="duplicate"):
            FinitePopulation(units, schema)

    def test_total_requires_observed_y(self):
        schema = FeatureSchema(names=("a",), kinds=(CONTINUOUS,))
        units = [Unit(id="u0", x=(1.0,), y=None)]
        with pytest.raises(SchemaError):
            FinitePopulation(units, schema).total_y()
