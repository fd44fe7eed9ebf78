import numpy as np
import pytest

from maxentnet import cli
from maxentnet.errors import TrainingDiverged
from maxentnet.expfamily import ActivationKind, lambda_prime, mean_lambda
from maxentnet.io import read_matrix, save_model, write_csv
from maxentnet.manifold import conditional_mean_oracle
from maxentnet.numerics import RngStream
from maxentnet.pbn import PbnLayer, PbnNetwork, init_network
from maxentnet.saddle import LayerMap, gamma_inverse

TED, TG, LINEAR = ActivationKind.TED, ActivationKind.TG, ActivationKind.LINEAR


def write(path, rows):
    with open(path, "w") as fh:
        write_csv(fh, np.atleast_2d(rows))
    return str(path)


def footer(path):
    return [l[2:].rstrip("\n") for l in open(path) if l.startswith("# ") and ":" in l and not l.startswith("# maxentnet")]


@pytest.fixture
def run(capsys):
    def go(*argv):
        code = cli.main([str(a) for a in argv])
        out = capsys.readouterr()
        return code, out.out, out.err
    return go


@pytest.fixture
def problem(tmp_path):
    """A 5x2 weight matrix with a feasible TED feature and an infeasible one."""
    W = np.random.default_rng(0).uniform(0.2, 1.0, (5, 2))
    return {
        "W": write(tmp_path / "W.csv", W),
        "z": write(tmp_path / "z.csv", np.full(5, 0.4) @ W),
        "z_bad": write(tmp_path / "zbad.csv", np.full(5, 1.5) @ W),
        "W_arr": W,
    }


class TestExitCodes:
    def test_bad_kind(self, run):
        with pytest.raises(SystemExit) as info:
            cli.main(["activations", "--kind", "sigmoid"])
        assert info.value.code == 2

    def test_domain_violation(self, run, tmp_path):
        code, _, err = run("activations", "--kind", "exp", "--min", "-2", "--max", "1", "-o", tmp_path / "a.csv")
        assert code == 2 and "error" in err

    def test_nonpositive_option(self, run, problem):
        code, _, _ = run("invert", "-W", problem["W"], "-z", problem["z"], "--kind", "ted", "--tol", "0")
        assert code == 2

    def test_dimension_mismatch(self, run, problem, tmp_path):
        z3 = write(tmp_path / "z3.csv", [0.1, 0.2, 0.3])
        code, _, err = run("invert", "-W", problem["W"], "-z", z3, "--kind", "ted")
        assert code == 2 and "columns" in err

    def test_missing_file(self, run, problem, tmp_path):
        code, _, _ = run("invert", "-W", tmp_path / "nope.csv", "-z", problem["z"], "--kind", "ted")
        assert code == 2

    def test_infeasible_invert(self, run, problem, tmp_path):
        out = tmp_path / "s.csv"
        code, _, _ = run("invert", "-W", problem["W"], "-z", problem["z_bad"], "--kind", "ted", "-o", out)
        assert code == 3
        sol = read_matrix(out, header=True)
        assert sol[0, -1] == 0 and sol[0, -3] > 1e-10

    def test_infeasible_sample_start(self, run, problem):
        code, _, err = run("sample", "-W", problem["W"], "-z", problem["z_bad"], "--kind", "ted")
        assert code == 3 and "starting point" in err

    def test_oracle_too_large(self, run, problem):
        code, _, err = run("oracle", "-W", problem["W"], "-z", problem["z"], "--kind", "ted")
        assert code == 2 and "desk scale" in err

    def test_bad_magic(self, run, tmp_path):
        model = tmp_path / "m.pbn"
        model.write_bytes(b"XXXX" + bytes(8))
        code, _, err = run("reconstruct", "--model", model, "--data", write(tmp_path / "d.csv", [0.1, 0.2]))
        assert code == 2 and "magic" in err

    def test_divergence(self, run, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise TrainingDiverged(3)
        monkeypatch.setattr(cli, "train_autoencoder", boom)
        data = write(tmp_path / "d.csv", np.random.default_rng(0).uniform(size=(5, 4)))
        model = tmp_path / "m.pbn"
        code, _, err = run("train", "--data", data, "--widths", "4,2", "--kinds", "tg", "--model-out", model)
        assert code == 4 and "epoch 3" in err
        assert not model.exists()

    def test_config_reserved(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["--config", "x.toml", "activations", "--kind", "ted"])
        assert info.value.code == 2


class TestActivations:
    def test_ted_table(self, run, tmp_path):
        out = tmp_path / "a.csv"
        assert run("activations", "--kind", "ted", "--min", "-8", "--max", "8", "-n", "161", "-o", out)[0] == 0
        a = read_matrix(out, header=True)
        assert a.shape == (161, 5)
        assert np.all((a[:, 1] > 0) & (a[:, 1] < 1)) and np.all(np.diff(a[:, 1]) > 0)
        np.testing.assert_allclose(a[:, 3], 1 / (1 + np.exp(-a[:, 0])), rtol=1e-15)

    def test_tg_softplus_gap(self, run, tmp_path):
        out = tmp_path / "a.csv"
        run("activations", "--kind", "tg", "-o", out)
        a = read_matrix(out, header=True)
        gap = np.max(np.abs(a[:, 1] - np.logaddexp(0, a[:, 0])))
        line = [l for l in footer(out) if l.startswith("max |lambda - softplus|")][0]
        assert float(line.split(": ")[1]) == gap

    def test_header_echoes_defaults(self, run, tmp_path):
        out = tmp_path / "a.csv"
        run("activations", "--kind", "tg", "-o", out)
        text = out.read_text()
        for key in ("# command: activations", "# kind: tg", "# min: -8", "# n_points: 161", "# header: False"):
            assert key in text


class TestInvert:
    def test_linear_least_squares_12_digits(self, run, tmp_path):
        rng = np.random.default_rng(1)
        W = rng.standard_normal((6, 3))
        Z = rng.standard_normal((4, 3))
        out = tmp_path / "s.csv"
        code, _, _ = run("invert", "-W", write(tmp_path / "W.csv", W), "-z", write(tmp_path / "z.csv", Z),
                         "--kind", "linear", "-o", out)
        assert code == 0
        sol = read_matrix(out, header=True)
        h_ls = np.linalg.solve(W.T @ W, Z.T).T
        fixture = [[format(v, ".12g") for v in row] for row in np.hstack([h_ls, h_ls @ W.T])]
        got = [[format(v, ".12g") for v in row] for row in sol[:, :9]]
        assert got == fixture

    def test_ted_round_trip(self, run, tmp_path):
        rng = np.random.default_rng(2)
        W = rng.standard_normal((8, 3))
        h = rng.standard_normal((5, 3))
        Z = np.asarray(mean_lambda(TED, h @ W.T)) @ W
        out = tmp_path / "s.csv"
        code, _, _ = run("invert", "-W", write(tmp_path / "W.csv", W), "-z", write(tmp_path / "z.csv", Z),
                         "--kind", "ted", "-o", out)
        assert code == 0
        sol = read_matrix(out, header=True)
        np.testing.assert_allclose(sol[:, :3], h, atol=1e-8)
        assert footer(out)[-1] == "converged: 5/5"

    def test_header_flag(self, run, tmp_path, problem):
        W = tmp_path / "Wh.csv"
        with open(W, "w") as fh:
            write_csv(fh, problem["W_arr"], columns=["m1", "m2"])
        z = tmp_path / "zh.csv"
        with open(z, "w") as fh:
            write_csv(fh, [np.full(5, 0.4) @ problem["W_arr"]], columns=["z1", "z2"])
        assert run("invert", "-W", W, "-z", z, "--kind", "ted", "--header")[0] == 0


class TestSample:
    def test_byte_identical(self, run, problem, tmp_path):
        out = tmp_path / "a.csv"
        runs = []
        for _ in range(2):
            code, stdout, _ = run("sample", "-W", problem["W"], "-z", problem["z"], "--kind", "ted",
                                  "--seed", 5, "--chains", 2, "--n-samples", 200, "-o", out)
            assert code == 0 and "max |W'x - z|" in stdout
            runs.append(out.read_bytes())
        assert runs[0] == runs[1]
        x = read_matrix(out, header=True)
        assert x.shape == (400, 6) and set(x[:, 0]) == {0.0, 1.0}

    def test_linear_mean(self, run, tmp_path):
        rng = np.random.default_rng(3)
        W = rng.standard_normal((5, 2))
        z = rng.standard_normal(2)
        out = tmp_path / "s.csv"
        n = 4000
        run("sample", "-W", write(tmp_path / "W.csv", W), "-z", write(tmp_path / "z.csv", z),
            "--kind", "linear", "--n-samples", n, "-o", out)
        x = read_matrix(out, header=True)[:, 1:]
        P = np.eye(5) - W @ np.linalg.solve(W.T @ W, W.T)
        mean = W @ np.linalg.solve(W.T @ W, z)
        se = np.sqrt(np.diag(P) / n)
        assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se)

    def test_tg_matches_oracle(self, run, tmp_path):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((3, 2))
        z = rng.uniform(0.2, 1.5, 3) @ W
        Wp, zp = write(tmp_path / "W.csv", W), write(tmp_path / "z.csv", z)
        so, oo = tmp_path / "s.csv", tmp_path / "o.csv"
        assert run("sample", "-W", Wp, "-z", zp, "--kind", "tg", "--n-samples", 100_000, "-o", so)[0] == 0
        assert run("oracle", "-W", Wp, "-z", zp, "--kind", "tg", "-o", oo)[0] == 0
        oracle = read_matrix(oo, header=True)[0]
        np.testing.assert_allclose(oracle, conditional_mean_oracle(LayerMap(W, TG), z), rtol=1e-12)
        mean = read_matrix(so, header=True)[:, 1:].mean(axis=0)
        assert np.max(np.abs(mean - oracle)) < 0.01

    def test_one_feature_row_only(self, run, problem, tmp_path):
        Z = write(tmp_path / "z2.csv", np.full((2, 5), 0.4) @ problem["W_arr"])
        assert run("sample", "-W", problem["W"], "-z", Z, "--kind", "ted")[0] == 2


class TestTrainReconstruct:
    @pytest.fixture
    def data(self, tmp_path):
        rng = np.random.default_rng(1)
        X = rng.uniform(0, 1, (100, 2)) @ rng.uniform(0, 1, (2, 16)) + 0.05 * rng.uniform(size=(100, 16))
        return write(tmp_path / "X.csv", X), X

    def test_tg_smoke_and_reproducible(self, run, tmp_path, data):
        path, _ = data
        files = []
        model, trace = tmp_path / "m.pbn", tmp_path / "t.csv"
        for _ in range(2):
            code, _, _ = run("train", "--data", path, "--widths", "16,8,4", "--kinds", "tg", "--epochs", 50,
                             "--seed", 7, "--model-out", model, "--trace-out", trace)
            assert code == 0
            files.append((model.read_bytes(), trace.read_bytes()))
        assert files[0] == files[1]
        loss = read_matrix(trace, header=True)[:, 1]
        assert loss.shape == (50,)
        smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) <= 0) and loss[-1] < loss[0]

    def test_linear_pca(self, run, tmp_path):
        X = np.random.default_rng(30).multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], size=500)
        trace = tmp_path / "t.csv"
        code, _, _ = run("train", "--data", write(tmp_path / "X.csv", X), "--widths", "2,1", "--kinds", "linear",
                         "--step", 0.1, "--trace-out", trace)
        assert code == 0
        best = np.linalg.eigvalsh(X.T @ X / len(X))[0]
        assert read_matrix(trace, header=True)[-1, 1] <= 1.05 * best

    def test_reconstruct_forward_features(self, run, tmp_path, data):
        path, X = data
        model = tmp_path / "m.pbn"
        run("train", "--data", path, "--widths", "16,8,4", "--kinds", "tg", "--epochs", 20, "--model-out", model)
        out = tmp_path / "r.csv"
        code, stdout, _ = run("reconstruct", "--model", model, "--data", path, "-o", out)
        assert code == 0
        assert "layerwise efficiency: 1 (100/100)" in stdout
        r = read_matrix(out, header=True)
        assert r.shape == (100, 18)
        ok = np.isfinite(r[:, 16])
        assert np.all(r[ok, 16] < 1e-8)
        mse = float([l for l in footer(out) if l.startswith("mse")][0].split(": ")[1])
        np.testing.assert_allclose(mse, r[ok, 17].mean(), rtol=1e-12)

    def test_dims_mismatch(self, run, tmp_path, data):
        path, _ = data
        model = tmp_path / "m.pbn"
        save_model(init_network([5, 2], [TG], RngStream(0)), model)
        assert run("reconstruct", "--model", model, "--data", path)[0] == 2

    def test_stochastic_vs_deterministic(self, run, tmp_path):
        W = np.random.default_rng(5).standard_normal((6, 3))
        model = tmp_path / "m.pbn"
        save_model(PbnNetwork([PbnLayer(LayerMap(W, TG))]), model)
        z = np.full(6, 0.7) @ W
        zp = write(tmp_path / "z.csv", np.vstack([z, z]))
        det, sto, avg = tmp_path / "d.csv", tmp_path / "s.csv", tmp_path / "m.csv"
        run("reconstruct", "--model", model, "--data", zp, "--features", "-o", det)
        run("reconstruct", "--model", model, "--data", zp, "--features", "--mode", "stochastic", "--seed", 1, "-o", sto)
        n = 1000
        run("reconstruct", "--model", model, "--data", zp, "--features", "--mode", "stochastic",
            "--draws", n, "--seed", 1, "-o", avg)
        d = read_matrix(det, header=True)[0, :6]
        s = read_matrix(sto, header=True)[:, :6]
        m = read_matrix(avg, header=True)[:, :6]
        assert not np.allclose(s[0], d) and not np.allclose(s[0], s[1])
        se = np.sqrt(np.asarray(lambda_prime(TG, gamma_inverse(LayerMap(W, TG), z).theta)) / n)
        assert np.all(np.abs(m - d) < 4 * se)
        assert "sampling efficiency: 1 (2000/2000)" in avg.read_text()
