import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from latticeblow.drift import get_drift
from latticeblow.harness import (
    GOLDEN_CONFIGS,
    LatticeRun,
    MomentsRun,
    PipelineRun,
    SCHEMA_VERSION,
    Sde1dRun,
    Stage1Exhausted,
    config_to_json,
    derive_constants,
    golden_check,
    load_config,
    merge,
    merge_pipeline_results,
    parse_config,
    plan_chunks,
    product_bound,
    render_long,
    render_summary,
    run_blowup_pipeline,
    run_chunk,
    run_experiment,
    slowed_drift,
    summary_dict,
    write_goldens,
    write_outputs,
)
from latticeblow.kernel import get_walk, kernel_slice
from latticeblow.noise import McEstimate, NoiseField

QUAD = get_drift("quadratic")
SRW = get_walk("srw")

# lowered start level: every stage fires at desk scale, unlike the
# certified level, which no finite window reaches in time delta
BASE = dict(start_exponent=0)


def _base_run(origin_level=0.25, delta=0.1, seed=2024, **kw):
    return run_blowup_pipeline(
        delta, origin_level, QUAD, SRW, 8, 200, seed, **BASE, **kw
    )


class TestConfig:
    def test_round_trip_all_experiments(self):
        for cfg in GOLDEN_CONFIGS.values():
            again = parse_config(json.loads(config_to_json(cfg)))
            assert again == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            parse_config({"experiment": "moments", "bogus": 1})

    def test_unknown_experiment_rejected(self):
        with pytest.raises(ValueError, match="experiment must be one of"):
            parse_config({"experiment": "nope"})

    def test_defaults_fill_in(self):
        cfg = parse_config({"experiment": "pipeline"})
        assert cfg.delta == 0.1
        assert cfg.L == 10.0
        assert cfg.reps == 200

    def test_ladder_must_increase(self):
        with pytest.raises(ValidationError, match="strictly increasing"):
            LatticeRun(experiment="lattice", J_ladder=(4.0, 2.0))

    def test_unknown_drift_rejected(self):
        with pytest.raises(ValidationError, match="unknown drift"):
            Sde1dRun(experiment="sde1d", drift="cubicish")

    def test_unknown_walk_rejected(self):
        with pytest.raises(ValidationError, match="unknown walk"):
            MomentsRun(experiment="moments", walk="levy")

    def test_seed_bounds(self):
        with pytest.raises(ValidationError):
            MomentsRun(experiment="moments", seed=-1)
        with pytest.raises(ValidationError):
            MomentsRun(experiment="moments", seed=2**63)

    def test_load_config_json_and_toml(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(config_to_json(GOLDEN_CONFIGS["picard"]))
        assert load_config(str(p)) == GOLDEN_CONFIGS["picard"]
        t = tmp_path / "run.toml"
        t.write_text('experiment = "moments"\nseed = 11\nk = 3\n')
        cfg = load_config(str(t))
        assert cfg == MomentsRun(experiment="moments", seed=11, k=3)

    def test_configs_are_frozen(self):
        cfg = GOLDEN_CONFIGS["moments"]
        with pytest.raises(ValidationError):
            cfg.seed = 5


class TestMerge:
    def test_empty_is_identity(self):
        e = merge([])
        assert e.reps == 0
        assert math.isnan(e.stderr)
        one = McEstimate.from_samples(np.arange(5.0))
        assert merge([e, one]) == one

    def test_any_order_same_bits(self):
        rng = np.random.default_rng(3)
        parts = [
            McEstimate.from_samples(rng.normal(size=rng.integers(1, 40)))
            for _ in range(6)
        ]
        ref = merge(parts)
        for _ in range(10):
            perm = [parts[i] for i in rng.permutation(len(parts))]
            assert merge(perm) == ref

    def test_pooled_mean_matches_concat(self):
        rng = np.random.default_rng(4)
        chunks = [rng.normal(size=n) for n in (7, 1, 30, 12)]
        pooled = merge(McEstimate.from_samples(c) for c in chunks)
        direct = McEstimate.from_samples(np.concatenate(chunks))
        assert pooled.reps == direct.reps
        assert pooled.mean == pytest.approx(direct.mean, rel=1e-12)
        assert pooled.stderr == pytest.approx(direct.stderr, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(
            st.lists(
                st.floats(-100.0, 100.0, allow_nan=False), min_size=1, max_size=20
            ),
            min_size=1,
            max_size=5,
        )
    )
    def test_pooled_mean_property(self, chunks):
        pooled = merge(McEstimate.from_samples(np.array(c)) for c in chunks)
        flat = np.concatenate([np.array(c) for c in chunks])
        assert pooled.reps == flat.size
        assert pooled.mean == pytest.approx(float(flat.mean()), rel=1e-9, abs=1e-9)


class TestPipelineConstants:
    def test_product_bound_value(self):
        assert product_bound(0.1) == 0.5021384694927669
        with pytest.raises(ValueError):
            product_bound(0.0)

    def test_slowed_drift_halves_quadratic(self):
        s = slowed_drift(QUAD, 2)
        assert s.name == "quadratic/2"
        assert s.expr == "0.5 * (x ** 2)"
        assert s.b(4.0) == 8.0
        with pytest.raises(ValueError):
            slowed_drift(QUAD, 0)

    def test_slowed_drift_needs_margin(self):
        with pytest.raises(ValueError, match="no superlinear margin"):
            slowed_drift(get_drift("linear2x"), 2)

    def test_certified_constants(self):
        c = derive_constants(0.1, QUAD, epsilon=0.1)
        assert c.start_exponent == 9
        assert c.start_level == 512.0
        assert c.slowdown == 2
        assert c.growth_threshold == pytest.approx(9.513656920021768, rel=1e-12)
        assert c.explosion_bound == pytest.approx(0.9966269694329881, rel=1e-12)
        assert c.chained_bound == product_bound(0.1)

    def test_explicit_exponent_skips_search(self):
        c = derive_constants(0.1, QUAD, epsilon=0.1, start_exponent=0)
        assert c.start_level == 1.0
        # hand-lowered levels sit below the comparison argument's domain
        assert math.isnan(c.explosion_bound)


class TestPipelineRun:
    def test_frozen_outcome(self):
        res = _base_run()
        assert res.estimate.reps == 200
        assert res.estimate.mean == 0.485
        assert res.stage1_rate == 1.0
        assert res.stage2_rate == 0.485
        assert res.stage3_rate == 1.0
        assert res.widened == 0
        assert sum(r.capped for r in res.reports) == 4

    def test_report_invariants(self):
        res = _base_run()
        weight = kernel_slice(SRW, 0.1)
        for r in res.reports:
            assert (r.stage2 is None) == (not r.stage1)
            if r.stage2 is None or not r.stage2:
                assert r.stage3 is None
                assert math.isnan(r.hit_time)
            else:
                assert 0.1 <= r.hit_time <= 0.2
                assert r.stage3 is not None
            if r.stage1:
                assert r.site is not None
                assert r.site_value >= 1.0
                w = weight.value_at(r.site)
                expected = 2.0 * 0.25 / w if w > 0.0 else math.inf
                assert r.target_level == expected
            else:
                assert r.site is None
            if r.capped:
                assert r.stage2 is False
            assert r.success == bool(r.stage1 and r.stage2 and r.stage3)

    def test_deterministic(self):
        assert _base_run().reports == _base_run().reports

    def test_chunked_equals_whole(self):
        whole = _base_run()
        parts = [
            _base_run(rep_range=(lo, hi))
            for lo, hi in ((0, 64), (64, 128), (128, 200))
        ]
        merged = merge_pipeline_results(parts)
        assert merged.reports == whole.reports
        assert merged.estimate == whole.estimate

    def test_merge_validations(self):
        a = _base_run(rep_range=(0, 10))
        with pytest.raises(ValueError, match="at least one part"):
            merge_pipeline_results([])
        with pytest.raises(ValueError, match="overlap"):
            merge_pipeline_results([a, a])
        other = _base_run(origin_level=0.5, rep_range=(10, 20))
        with pytest.raises(ValueError, match="disagree"):
            merge_pipeline_results([a, other])

    def test_doubling_level_nests_success(self):
        lo = _base_run(origin_level=0.25)
        hi = _base_run(origin_level=0.5)
        assert lo.estimate.mean == 0.485
        assert hi.estimate.mean == 0.325
        for a, b in zip(lo.reports, hi.reports):
            assert a.success or not b.success

    def test_halving_delta_does_not_hurt(self):
        base = _base_run(delta=0.1)
        half = _base_run(delta=0.05)
        slack = 2.0 * math.hypot(base.estimate.stderr, half.estimate.stderr)
        assert half.estimate.mean >= base.estimate.mean - slack

    def test_certified_level_exhausts_stage1(self):
        with pytest.raises(Stage1Exhausted, match="widened to 16"):
            run_blowup_pipeline(0.1, 10.0, QUAD, SRW, 8, 20, 2024)

    def test_range_run_defers_exhaustion_to_merge(self):
        part = run_blowup_pipeline(
            0.1, 10.0, QUAD, SRW, 8, 20, 2024, rep_range=(0, 10)
        )
        assert part.exhausted == 10
        with pytest.raises(Stage1Exhausted):
            merge_pipeline_results([part])

    def test_validation(self):
        with pytest.raises(ValueError, match="delta"):
            run_blowup_pipeline(0.0, 1.0, QUAD, SRW, 8, 10, 0)
        with pytest.raises(ValueError, match="multiple of dt"):
            run_blowup_pipeline(0.1, 1.0, QUAD, SRW, 8, 10, 0, dt=3e-4)
        with pytest.raises(ValueError, match="rep_range"):
            run_blowup_pipeline(
                0.1, 1.0, QUAD, SRW, 8, 10, 0, rep_range=(5, 30), **BASE
            )


class TestRunner:
    def test_plan_chunks(self):
        cfg = PipelineRun(experiment="pipeline", reps=200)
        assert plan_chunks(cfg) == [(0, 64), (64, 128), (128, 192), (192, 200)]
        m = MomentsRun(experiment="moments", reps=1000, chunk=512)
        assert plan_chunks(m) == [(0, 512), (512, 1000)]

    def test_chunk_bounds_validated(self):
        cfg = GOLDEN_CONFIGS["sde1d"]
        with pytest.raises(ValueError):
            run_chunk(cfg, 5, 5)
        with pytest.raises(ValueError):
            run_chunk(cfg, 0, cfg.reps + 1)

    def test_moments_chunks_are_pinned(self):
        cfg = GOLDEN_CONFIGS["moments"]
        with pytest.raises(ValueError, match="pinned"):
            run_chunk(cfg, 10, 20)

    def test_chunking_invisible_in_tables(self):
        # two plan chunks versus one hand-run whole chunk, same bytes
        cfg = Sde1dRun(
            experiment="sde1d", seed=3, reps=520, drift="quadratic",
            x0=512.0, dt=1e-4, horizon=0.05, xmax=1e6,
        )
        out = run_experiment(cfg)
        whole = run_chunk(cfg, 0, 520)["replicates"]
        for col, arr in out.tables["replicates"].items():
            assert np.array_equal(arr, whole[col], equal_nan=True)

    @pytest.mark.parametrize("name", ["sde1d", "moments", "pipeline"])
    def test_pool_matches_serial(self, name):
        cfg = {
            "sde1d": Sde1dRun(
                experiment="sde1d", seed=3, reps=520, drift="quadratic",
                x0=512.0, dt=1e-4, horizon=0.05, xmax=1e6,
            ),
            "moments": GOLDEN_CONFIGS["moments"],
            "pipeline": PipelineRun(
                experiment="pipeline", seed=7, reps=96, delta=0.1, L=0.25,
                drift="quadratic", walk="srw", window=8, start_exponent=0,
            ),
        }[name]
        assert len(plan_chunks(cfg)) > 1
        serial = run_experiment(cfg, workers=1)
        pooled = run_experiment(cfg, workers=3)
        assert render_summary(serial) == render_summary(pooled)
        assert render_long(serial) == render_long(pooled)

    def test_summary_dict_shape(self):
        cfg = Sde1dRun(
            experiment="sde1d", seed=1, reps=8, drift="quadratic",
            x0=1.0, dt=1e-4, horizon=2e-4, xmax=1e6,
        )
        out = run_experiment(cfg)
        blob = summary_dict(out)
        assert blob["schema_version"] == SCHEMA_VERSION
        assert blob["experiment"] == "sde1d"
        assert blob["config"]["seed"] == 1
        assert blob["estimates"]["explosion_frequency"]["mean"] == 0.0
        # nothing exploded: the time estimate is empty, nan becomes null
        assert blob["estimates"]["explosion_time_mean"]["stderr"] is None

    def test_write_outputs_files(self, tmp_path):
        out = run_experiment(GOLDEN_CONFIGS["splitting"])
        paths = write_outputs(out, str(tmp_path / "run"))
        assert set(paths) == {"replicates", "domination", "summary", "long"}
        rep = open(paths["replicates"]).read().splitlines()
        assert rep[0] == "replicate,n,probe,sq_gap"
        assert rep[1].startswith("0,8,0,")
        assert len(rep) == 1 + 64 * 2
        dom = open(paths["domination"]).read().splitlines()
        assert dom[0] == "replicate,violated,checked_steps"
        long_rows = open(paths["long"]).read().splitlines()
        assert long_rows[0] == "experiment,parameter,value,stderr"
        assert all(row.startswith("splitting,") for row in long_rows[1:])
        blob = json.load(open(paths["summary"]))
        assert blob["schema_version"] == SCHEMA_VERSION

    def test_missing_cells_written_empty(self, tmp_path):
        cfg = Sde1dRun(
            experiment="sde1d", seed=1, reps=4, drift="quadratic",
            x0=1.0, dt=1e-4, horizon=2e-4, xmax=1e6,
        )
        paths = write_outputs(run_experiment(cfg), str(tmp_path))
        rows = open(paths["replicates"]).read().splitlines()
        assert rows[1] == "0,0,"  # no explosion: flag 0, empty time

    def test_lattice_probe_window_check(self):
        cfg = LatticeRun(
            experiment="lattice", reps=4, window=6, probes=(0, 9),
            T=0.125, dt=1.0 / 256.0,
        )
        with pytest.raises(ValueError, match="outside the window"):
            run_experiment(cfg)


class TestGolden:
    def test_write_then_check(self, tmp_path):
        write_goldens(str(tmp_path), names=["moments", "splitting"])
        for name in ("moments", "splitting"):
            chk = golden_check(name, str(tmp_path))
            assert chk.ok, chk.mismatches

    @pytest.mark.parametrize("name", sorted(GOLDEN_CONFIGS))
    def test_repo_goldens_reproduce(self, name):
        chk = golden_check(name)
        assert chk.ok, chk.mismatches

    def test_mismatch_names_first_divergent_field(self, tmp_path):
        write_goldens(str(tmp_path), names=["moments"])
        p = tmp_path / "moments" / "summary.json"
        blob = json.loads(p.read_text())
        blob["estimates"]["moment"]["mean"] += 1e-9
        p.write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n")
        chk = golden_check("moments", str(tmp_path))
        assert not chk.ok
        assert any(
            "$.estimates.moment.mean" in m for m in chk.mismatches
        ), chk.mismatches

    def test_mismatch_in_long_csv_names_line_and_column(self, tmp_path):
        write_goldens(str(tmp_path), names=["moments"])
        p = tmp_path / "moments" / "long.csv"
        rows = p.read_text().splitlines()
        cells = rows[1].split(",")
        cells[2] = "999.0"
        rows[1] = ",".join(cells)
        p.write_text("\n".join(rows) + "\n")
        chk = golden_check("moments", str(tmp_path))
        assert not chk.ok
        assert any("line 2, column value" in m for m in chk.mismatches)

    def test_unknown_golden_rejected(self):
        with pytest.raises(KeyError, match="unknown golden"):
            golden_check("warp")

    def test_empty_store_reported_missing(self, tmp_path):
        chk = golden_check("moments", str(tmp_path))
        assert not chk.ok
        assert any("missing from the golden store" in m for m in chk.mismatches)
