import filecmp
import os

import numpy as np
import pytest

from bbvi import cli, io, zoo

SMALL = ["--n-patients", "3", "--n-test-patients", "2", "--n-visits", "3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def generate(out, seed=1, *extra):
    return run("generate", "--seed", seed, "--out", out, *SMALL, *extra)


def csvs(path):
    return sorted(f for f in os.listdir(path) if f.endswith(".csv"))


# generate ----------------------------------------------------------------------------------

def test_generate_byte_identical(tmp_path):
    assert generate(tmp_path / "a") == 0
    assert generate(tmp_path / "b") == 0
    names = csvs(tmp_path / "a")
    assert names == ["data.csv", "split.csv", "truth.csv"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert match == names


def test_generate_full_sparsity_row_count(tmp_path):
    assert generate(tmp_path, 2, "--sparsity", "1.0") == 0
    rows = io.read_rows(tmp_path / "data.csv")
    assert len(rows) == 5 * 3 * 5


def test_generate_round_trip(tmp_path):
    assert generate(tmp_path, 3) == 0
    cfg = zoo.model_config("gamma-normal-ts", n_patients=3, n_test_patients=2, n_visits=3,
                           sigma_x=zoo.DATA_SIGMA_X)
    ds, truth = zoo.generate_synthetic(cfg, 0.7, seed=3)
    back = zoo.LongitudinalDataset.read_csv(tmp_path / "data.csv", tmp_path / "split.csv")
    assert np.array_equal(back.value, ds.value) and np.array_equal(back.lab, ds.lab)
    assert back.split == ds.split
    t = io.read_rows(tmp_path / "truth.csv")
    assert float(t[0]["value"]) == truth["W[0]"][0]


def test_refuses_overwrite_without_force(tmp_path):
    assert generate(tmp_path) == 0
    assert generate(tmp_path) == cli.EXIT_IO
    assert generate(tmp_path, 1, "--force") == 0


def test_every_csv_has_config_comment(tmp_path):
    assert generate(tmp_path) == 0
    for name in csvs(tmp_path):
        comment = io.read_comment(tmp_path / name)
        assert comment.startswith("config:") and "seed=1" in comment


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert run("generate", "--seed", 1, *SMALL) == 0
    assert csvs(tmp_path / "env") == ["data.csv", "split.csv", "truth.csv"]


# fit -------------------------------------------------------------------------------------

def test_fit_conjugate_oracle_end_to_end(tmp_path):
    assert run("fit", "--model", "conjugate-oracle", "--engine", "bbvi-rbcv", "--eta", 0.5,
               "--max-iterations", 2000, "--seed", 4, "--out", tmp_path) == 0
    params = io.read_params(tmp_path / "params.csv")
    assert abs(params[("z", "mean[0]")] - 0.5) < 0.05
    assert abs(np.exp(2 * params[("z", "log_std[0]")]) - 0.5) < 0.05
    assert io.read_rows(tmp_path / "trace.csv")[0]["iter"] == "1"


def test_fit_zero_iterations_writes_init(tmp_path):
    assert run("fit", "--model", "conjugate-oracle", "--max-iterations", 0, "--seed", 5,
               "--out", tmp_path) == 0
    m, _ = zoo.build_conjugate_oracle()
    fam = m.default_family()
    lam = io.read_params(tmp_path / "params.csv", fam)
    assert np.array_equal(lam, fam.init_params(np.random.default_rng(5)))


def test_fit_mh_gibbs_conjugate(tmp_path):
    assert run("fit", "--model", "conjugate-oracle", "--engine", "mh-gibbs", "--sweeps", 60000,
               "--burn-in", 1000, "--thin", 10, "--proposal-scale", 1.0, "--seed", 6, "--out", tmp_path) == 0
    m, post = zoo.build_conjugate_oracle()
    samples = io.read_samples(tmp_path / "samples.csv", m)
    assert samples.shape == (5900, 1)
    assert abs(samples.mean() - post.mean) < 0.03
    acc = io.read_rows(tmp_path / "acceptance.csv")
    assert 0 < float(acc[0]["acceptance"]) < 1


@pytest.mark.parametrize("engine", ["bbvi-naive", "bbvi-rb", "bbvi-rbcv", "bbvi-subsampled"])
def test_fit_factor_model_engines(tmp_path, engine):
    generate(tmp_path / "data")
    assert run("fit", "--engine", engine, "--data", tmp_path / "data", "--n-samples", 20,
               "--max-iterations", 3, "--batch-size", 2, "--seed", 1, "--out", tmp_path / "fit") == 0
    rows = io.read_rows(tmp_path / "fit" / "params.csv")
    assert rows[0]["latent_id"] == "W[0]"


def test_fit_deterministic(tmp_path):
    generate(tmp_path / "data")
    args = ["fit", "--data", tmp_path / "data", "--n-samples", 30, "--max-iterations", 5, "--seed", 2]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    names = csvs(tmp_path / "a")
    assert filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)[0] == names


def test_diverged_run_exit_code(tmp_path):
    code = run("fit", "--model", "conjugate-oracle", "--engine", "bbvi-naive", "--eta", 1e308,
               "--schedule", "robbins-monro", "--n-samples", 5, "--seed", 1, "--out", tmp_path)
    assert code == cli.EXIT_DIVERGED
    assert os.path.exists(tmp_path / "trace.csv")


# variance ---------------------------------------------------------------------------------

def test_variance_rows_and_determinism(tmp_path):
    generate(tmp_path / "data")
    args = ["variance", "--data", tmp_path / "data", "--n-samples", 20, "--checkpoints", 3,
            "--every", 2, "--seed", 3]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert filecmp.cmp(tmp_path / "a" / "variance.csv", tmp_path / "b" / "variance.csv", shallow=False)
    rows = io.read_rows(tmp_path / "a" / "variance.csv")
    assert list(rows[0]) == ["iteration", "estimator", "coordinate", "variance", "a_star"]
    ds = zoo.LongitudinalDataset.read_csv(tmp_path / "data" / "data.csv", tmp_path / "data" / "split.csv")
    cfg = zoo.model_config("gamma-normal-ts")
    fam = zoo.default_family(zoo.build_model(cfg, ds.select(patients=ds.patients_in("train"))))
    assert len(rows) == 3 * 3 * fam.n_params
    assert {r["iteration"] for r in rows} == {"0", "2", "4"}
    assert {r["estimator"] for r in rows} == {"naive", "rb", "rb_cv"}


# eval -----------------------------------------------------------------------------------

def test_eval_bbvi_report(tmp_path):
    generate(tmp_path / "data")
    common = ["--data", tmp_path / "data", "--n-samples", 30, "--seed", 4]
    assert run("fit", *common, "--max-iterations", 5, "--out", tmp_path / "fit") == 0
    assert run("eval", *common, "--fit", tmp_path / "fit", "--local-iterations", 5,
               "--n-draws", 50, "--out", tmp_path / "ev") == 0
    rows = io.read_rows(tmp_path / "ev" / "eval.csv")
    assert [r["patient_id"] for r in rows] == ["3", "4", "all"]
    n = np.array([int(r["n_obs"]) for r in rows[:-1]])
    v = np.array([float(r["log_predictive"]) for r in rows[:-1]])
    assert float(rows[-1]["log_predictive"]) == pytest.approx((n * v).sum() / n.sum(), rel=1e-12)
    assert int(rows[-1]["n_obs"]) == n.sum()


def test_eval_gibbs_report(tmp_path):
    generate(tmp_path / "data")
    common = ["--engine", "mh-gibbs", "--data", tmp_path / "data", "--seed", 5]
    assert run("fit", *common, "--sweeps", 200, "--burn-in", 50, "--out", tmp_path / "fit") == 0
    assert run("eval", *common, "--fit", tmp_path / "fit", "--out", tmp_path / "ev") == 0
    rows = io.read_rows(tmp_path / "ev" / "eval.csv")
    assert rows[-1]["patient_id"] == "all"
    assert np.isfinite(float(rows[-1]["log_predictive"]))


def test_eval_conjugate_oracle(tmp_path):
    assert run("fit", "--model", "conjugate-oracle", "--eta", 0.5, "--max-iterations", 2000,
               "--seed", 6, "--out", tmp_path) == 0
    assert run("eval", "--model", "conjugate-oracle", "--fit", tmp_path, "--heldout", "0.5",
               "--n-draws", 20000, "--seed", 6, "--out", tmp_path) == 0
    row = io.read_rows(tmp_path / "eval.csv")[0]
    # posterior predictive N(0.5, 1.5) at its mean
    assert float(row["log_predictive"]) == pytest.approx(-0.5 * np.log(2 * np.pi * 1.5), abs=0.03)


# usage and config ----------------------------------------------------------------------------

def test_usage_errors(tmp_path):
    assert run("fit", "--model", "conjugate-oracle", "--out", tmp_path) == cli.EXIT_USAGE  # no seed
    assert run("fit", "--model", "bogus", "--seed", 1) == cli.EXIT_USAGE
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run("fit", "--seed", 1, "--out", tmp_path) == cli.EXIT_USAGE  # no --data
    assert run("fit", "--model", "conjugate-oracle", "--n-samples", 1, "--seed", 1,
               "--out", tmp_path) == cli.EXIT_USAGE


def test_missing_input_is_io_error(tmp_path):
    assert run("fit", "--data", tmp_path / "nowhere", "--seed", 1, "--out", tmp_path) == cli.EXIT_IO


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "job.cfg"
    cfg.write_text("# experiment\nseed = 7\nmodel = conjugate-oracle\nmax-iterations = 3\n"
                   "threshold=1e-12\n")
    assert run("fit", "--config", cfg, "--out", tmp_path / "a") == 0
    assert len(io.read_rows(tmp_path / "a" / "trace.csv")) == 3
    assert run("fit", "--config", cfg, "--max-iterations", 5, "--out", tmp_path / "b") == 0
    assert len(io.read_rows(tmp_path / "b" / "trace.csv")) == 5
    comment = io.read_comment(tmp_path / "b" / "params.csv")
    assert "seed=7" in comment and "max_iterations=5" in comment and "n_samples=1000" in comment


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "job.cfg"
    cfg.write_text("seed=1\nwarp_factor=9\n")
    assert run("fit", "--config", cfg) == cli.EXIT_USAGE
    cfg.write_text("seed=1\nengine=quantum\n")
    assert run("fit", "--config", cfg) == cli.EXIT_USAGE
