import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from oracles import cli_pipeline, run_cli

from bima import io
from bima.cli import main, parse_grid, parse_kernel, parse_mode
from bima.errors import DivergenceError, InvalidArgumentError
from bima.harness import derive_seeds, sensitivity, split_subjects, worker_count
from bima.kernel_basis import KernelSpec, build_bases
from bima.sampler import SamplerConfig, run_mediator_chain, run_outcome_chain
from bima.simgen import SimDesign, generate


class TestBimt:
    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=6),
                      elements=st.floats(allow_nan=True, allow_infinity=True)))
    def test_roundtrip_bit_exact(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("t") / "a.bimt"
        io.write_tensor(path, arr)
        back = io.read_tensor(path)
        assert back.shape == arr.shape
        assert back.tobytes() == np.ascontiguousarray(arr).tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.bimt"
        io.write_tensor(path, np.arange(6.0).reshape(2, 3))
        raw = path.read_bytes()
        assert raw[:4] == b"BIMT"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert raw[8] == 0 and raw[9] == 2
        assert int.from_bytes(raw[10:18], "little") == 2
        assert int.from_bytes(raw[18:26], "little") == 3
        assert len(raw) == 26 + 8 * 6
        assert np.frombuffer(raw[26:], "<f8").tolist() == list(range(6))

    @pytest.mark.slow
    def test_large_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal(10_000_000)
        io.write_tensor(tmp_path / "big.bimt", arr)
        assert io.read_tensor(tmp_path / "big.bimt").tobytes() == arr.tobytes()

    def test_corrupt_files(self, tmp_path):
        path = tmp_path / "x.bimt"
        io.write_tensor(path, np.ones(4))
        raw = path.read_bytes()
        for bad in (b"NOPE" + raw[4:], raw[:-8], raw[:6], raw[:4] + b"\x02" + raw[5:]):
            path.write_bytes(bad)
            with pytest.raises(InvalidArgumentError):
                io.read_tensor(path)


class TestStores:
    def test_dataset_roundtrip(self, tmp_path):
        data, truth = generate(SimDesign(n=12, seed=1))
        io.save_dataset(tmp_path / "d", data, truth, {"seed": 1})
        back, t = io.load_dataset(tmp_path / "d")
        for name in ("Y", "X", "C", "M"):
            np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
        np.testing.assert_array_equal(back.grid.region_of, data.grid.region_of)
        np.testing.assert_array_equal(t["svme0"], truth.svme0)
        man = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert (man["n"], man["p"], man["q"]) == (12, 400, 2)

    def test_dataset_missing_file(self, tmp_path):
        data, _ = generate(SimDesign(n=12, seed=1))
        io.save_dataset(tmp_path / "d", data)
        (tmp_path / "d" / "M.bimt").unlink()
        with pytest.raises(InvalidArgumentError):
            io.load_dataset(tmp_path / "d")

    def test_trace_and_bases_roundtrip(self, tmp_path):
        data, _ = generate(SimDesign(n=12, seed=2))
        bases = build_bases(data.grid, KernelSpec("matern", 0.2, 0.1), basis_frac=0.2)
        tr = run_mediator_chain(data, bases, SamplerConfig(iters=40, init_iters=5))
        io.save_trace(tmp_path / "t", tr)
        back = io.load_trace(tmp_path / "t")
        assert back.model == "mediator" and back.n_draws == tr.n_draws
        for k in tr.draws:
            np.testing.assert_array_equal(back.draws[k], tr.draws[k])
        io.save_bases(tmp_path / "b", bases)
        for a, b in zip(bases, io.load_bases(tmp_path / "b")):
            np.testing.assert_array_equal(a.Q, b.Q)
            np.testing.assert_array_equal(a.eigvals, b.eigvals)
            assert b.kernel.rho == 0.1
        meta = json.loads((tmp_path / "b" / "bases.json").read_text())
        assert meta["regions"][0]["L"] == bases[0].L


class TestParsers:
    def test_grid(self):
        assert parse_grid("20x20x4") == ((20, 20), (2, 2))
        assert parse_grid("64x64x4") == ((64, 64), (2, 2))
        assert parse_grid("10x2") == ((10,), (2,))
        for bad in ("20", "20x20x3", "axbxc", "0x4x4"):
            with pytest.raises(InvalidArgumentError):
                parse_grid(bad)

    def test_kernel_and_mode(self):
        assert parse_kernel("matern:0.2:2").rho == 2.0
        assert parse_kernel("modified_se:0.01:10").b == 10.0
        assert parse_mode("fdr:0.1") == ("fdr", 0.1)
        assert parse_mode("pip:0.2") == ("pip", 0.2)
        for bad in ("gauss:1:2", "matern:1"):
            with pytest.raises(InvalidArgumentError):
                parse_kernel(bad)
        assert parse_mode("fdr") == ("fdr", 0.1)
        for bad in ("fdr:1.5", "bh:0.1", "pip:x"):
            with pytest.raises(InvalidArgumentError):
                parse_mode(bad)


class TestHarness:
    def test_split(self):
        a, b = split_subjects(10, 3)
        assert len(a) == len(b) == 5 and not set(a) & set(b)
        a2, _ = split_subjects(10, 3)
        np.testing.assert_array_equal(a, a2)
        with pytest.raises(InvalidArgumentError):
            split_subjects(3, 0)

    def test_seeds_and_workers(self, monkeypatch):
        assert derive_seeds(5, 3) == derive_seeds(5, 3)
        assert derive_seeds(5, 4)[:3] == derive_seeds(5, 3)
        assert len(set(derive_seeds(5, 10))) == 10
        monkeypatch.setenv("BIMA_THREADS", "2")
        assert worker_count(8) == 2
        monkeypatch.setenv("BIMA_THREADS", "x")
        with pytest.raises(InvalidArgumentError):
            worker_count(8)

    def test_single_threshold_row(self):
        data, _ = generate(SimDesign(n=16, seed=3))
        bases_kernel = KernelSpec("matern", 0.2, 0.1)
        rows = sensitivity(data, [0.1], SamplerConfig(iters=60, init_iters=5), bases_kernel,
                           basis_frac=0.2)
        assert len(rows) == 1 and set(rows[0]) == {"nu", "rho_scale", "train_mse", "test_mse"}


class TestCli:
    def test_simulate_dims_and_bad_n(self, tmp_path):
        assert main(["simulate", "--n", "200", "--grid", "20x20x4", "--pattern", "sparse",
                     "--seed", "7", "--out", str(tmp_path / "d")]) == 0
        assert io.read_tensor(tmp_path / "d" / "M.bimt").shape == (200, 400)
        assert main(["simulate", "--n", "0", "--out", str(tmp_path / "z")]) == 2

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["simulate", "--n", "10", "--out", str(blocker / "sub")]) == 2

    def test_usage_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["fit"])
        assert exc.value.code == 2
        proc = run_cli("evaluate", "--replications", "0", "--out", "unused")
        assert proc.returncode == 2

    def test_fit_mediate_flow(self, tmp_path):
        d = str(tmp_path / "d")
        assert main(["simulate", "--n", "20", "--grid", "8x8x4", "--seed", "1", "--out", d]) == 0
        assert main(["fit", "outcome", "--data", d, "--kernel", "matern:0.2:0.1",
                     "--basis-frac", "0.5", "--iters", "1000", "--burnin", "0.5", "--thin", "10",
                     "--out", str(tmp_path / "o")]) == 0
        assert io.load_trace(tmp_path / "o").n_draws == 50
        assert main(["fit", "mediator", "--data", d, "--kernel", "matern:0.2:0.1",
                     "--basis-frac", "0.5", "--iters", "100", "--out", str(tmp_path / "m")]) == 0
        args = ["mediate", "--outcome-trace", str(tmp_path / "o"),
                "--mediator-trace", str(tmp_path / "m")]
        assert main(args + ["--mode", "fdr:0.1", "--out", str(tmp_path / "r0")]) == 2
        assert main(args + ["--mode", "pip:0.1", "--x", "1", "--xprime", "0",
                            "--out", str(tmp_path / "r")]) == 0
        rep = json.loads((tmp_path / "r" / "report.json").read_text())
        with open(tmp_path / "r" / "svme.csv") as fh:
            rows = list(csv.DictReader(fh))
        ot, mt = io.load_trace(tmp_path / "o"), io.load_trace(tmp_path / "m")
        T = min(ot.n_draws, mt.n_draws)
        E = ot.draws["beta"][:T] * mt.draws["alpha"][:T]
        assert rep["nie_mean"] == pytest.approx(E.sum(axis=1).mean() / 64)
        assert rep["selected"] == sorted(int(r["voxel"]) for r in rows
                                         if float(r["pip"]) > 0.1)
        assert (tmp_path / "r" / "svme_grid.csv").is_file()
        assert main(args + ["--mode", "fdr:0.1", "--truth", d, "--out",
                            str(tmp_path / "r2")]) == 0

    def test_sensitivity_small_dataset(self, tmp_path):
        d = str(tmp_path / "d")
        assert main(["simulate", "--n", "3", "--xi0-free"] if False else
                    ["simulate", "--n", "20", "--grid", "8x8x4", "--out", d]) == 0
        data, truth = io.load_dataset(d)
        io.save_dataset(tmp_path / "tiny", data.subset([0, 1, 2]) if data.q < 1 else
                        type(data)(data.Y[:3], data.X[:3], data.C[:3, :1], data.M[:3], data.grid))
        assert main(["sensitivity", "--data", str(tmp_path / "tiny"), "--out",
                     str(tmp_path / "s.csv")]) == 2

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        d = str(tmp_path / "d")
        assert main(["simulate", "--n", "10", "--grid", "8x8x4", "--out", d]) == 0

        def boom(*a, **k):
            raise DivergenceError("nan")
        monkeypatch.setattr("bima.cli.run_outcome_chain", boom)
        assert main(["fit", "outcome", "--data", d, "--iters", "10", "--out",
                     str(tmp_path / "o")]) == 3

    @pytest.mark.slow
    def test_pipeline_is_deterministic(self, tmp_path):
        a = cli_pipeline(tmp_path / "a")
        b = cli_pipeline(tmp_path / "b")
        assert a.keys() == b.keys()
        assert [k for k in a if a[k] != b[k]] == []
        assert "eval/metrics.csv" in a and "report/report.json" in a
