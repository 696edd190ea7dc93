"""``bima`` command line: simulate, bases, fit, mediate, sensitivity, evaluate.

Exit codes: 0 success, 2 invalid usage or input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .errors import BimaError, DivergenceError, InvalidArgumentError
from .harness import ReplicationPlan, evaluate, sensitivity, worker_count
from .kernel_basis import KernelSpec, VoxelGrid, build_bases
from .mediation import build_report
from .sampler import SamplerConfig, run_mediator_chain, run_outcome_chain
from .simgen import SimDesign, generate

log = logging.getLogger("bima")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; keep messages on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument parsing helpers


def parse_grid(text: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """``"20x20x4"`` -> ``((20, 20), (2, 2))``: lattice sides then region count."""
    try:
        parts = [int(v) for v in text.lower().split("x")]
    except ValueError as exc:
        raise InvalidArgumentError(f"bad grid {text!r}") from exc
    if len(parts) < 2 or min(parts) < 1:
        raise InvalidArgumentError(f"bad grid {text!r}; expected e.g. 20x20x4")
    *shape, regions = parts
    per_axis = round(regions ** (1.0 / len(shape)))
    if per_axis ** len(shape) != regions:
        raise InvalidArgumentError("region count must be a perfect power of the grid dimension")
    return tuple(shape), (per_axis,) * len(shape)


def parse_kernel(text: str) -> KernelSpec:
    """``matern:u:rho`` or ``modified_se:a:b``."""
    name, *vals = text.split(":")
    try:
        nums = [float(v) for v in vals]
    except ValueError as exc:
        raise InvalidArgumentError(f"bad kernel {text!r}") from exc
    if name == "matern" and len(nums) == 2:
        return KernelSpec("matern", u=nums[0], rho=nums[1])
    if name in ("modified_se", "se") and len(nums) == 2:
        return KernelSpec("modified_se", a=nums[0], b=nums[1])
    raise InvalidArgumentError(f"bad kernel {text!r}; use matern:U:RHO or modified_se:A:B")


def parse_floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidArgumentError(f"bad number list {text!r}") from exc
    if not vals:
        raise InvalidArgumentError("empty number list")
    return vals


def parse_mode(text: str) -> tuple[str, float]:
    name, _, val = text.partition(":")
    if name not in ("fdr", "pip"):
        raise InvalidArgumentError(f"bad mode {text!r}; use fdr:<target> or pip:<t0>")
    try:
        level = float(val) if val else 0.1
    except ValueError as exc:
        raise InvalidArgumentError(f"bad mode {text!r}") from exc
    if not 0 < level < 1:
        raise InvalidArgumentError("mode level must be in (0, 1)")
    return name, level


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


# ---------------------------------------------------------------------------
# commands


def _design_from_args(a) -> SimDesign:
    shape, blocks = parse_grid(a.grid)
    if a.n < 1:
        raise InvalidArgumentError("--n must be positive")
    kw = dict(n=a.n, shape=shape, blocks=blocks, sigma_Y=a.sigma_y, sigma_M=a.sigma_m,
              nu_true=a.nu_true, eta_scale=a.eta_scale, seed=a.seed)
    if a.kernel:
        kw["kernel"] = parse_kernel(a.kernel)
    if getattr(a, "pattern", None) and a.pattern != "mix":
        kw["pattern"] = a.pattern
    return SimDesign(**kw)


def cmd_simulate(a) -> int:
    design = _design_from_args(a)
    data, truth = generate(design)
    prov = {"seed": design.seed, "pattern": design.pattern, "n": design.n,
            "shape": design.shape, "blocks": design.blocks, "sigma_Y": design.sigma_Y,
            "sigma_M": design.sigma_M, "nu_true": design.nu_true,
            "eta_scale": design.eta_scale, "kernel": design.kernel.to_dict()}
    io.save_dataset(a.out, data, truth, prov)
    log.info("wrote %s (n=%d, p=%d)", a.out, data.n, data.p)
    return EXIT_OK


def _bases_from_args(a, grid: VoxelGrid):
    if a.bases:
        bases = io.load_bases(a.bases)
        sizes = grid.region_sizes()
        if len(bases) != len(sizes) or any(b.size != s for b, s in zip(bases, sizes)):
            raise InvalidArgumentError("bases do not match the dataset grid")
        return bases
    spec = parse_kernel(a.kernel) if a.kernel else KernelSpec()
    return build_bases(grid, spec, cutoff_frac=a.cutoff, basis_frac=a.basis_frac)


def cmd_bases(a) -> int:
    data, _ = io.load_dataset(a.data)
    bases = build_bases(data.grid, parse_kernel(a.kernel) if a.kernel else KernelSpec(),
                        cutoff_frac=a.cutoff, basis_frac=a.basis_frac)
    io.save_bases(a.out, bases)
    return EXIT_OK


def _save_grid(out: Path, grid: VoxelGrid):
    io.write_tensor(out / "grid_coords.bimt", grid.coords)
    io.write_tensor(out / "grid_regions.bimt", grid.region_of)
    io.write_json(out / "grid.json", {"shape": list(grid.shape) if grid.shape else None})


def _load_grid(root: Path) -> VoxelGrid:
    if not (root / "grid.json").is_file():
        raise InvalidArgumentError(f"{root} has no grid files")
    shape = io.read_json(root / "grid.json")["shape"]
    return VoxelGrid(io.read_tensor(root / "grid_coords.bimt"),
                     io.read_tensor(root / "grid_regions.bimt").astype(np.int64),
                     tuple(shape) if shape else None)


def cmd_fit(a) -> int:
    data, _ = io.load_dataset(a.data)
    bases = _bases_from_args(a, data.grid)
    burnin = a.burnin if a.burnin is not None else (0.7 if a.model == "outcome" else 0.9)
    cfg = SamplerConfig(iters=a.iters, burnin_frac=burnin, thin=a.thin, seed=a.seed, nu=a.nu,
                        init=a.init, eta_update=a.eta, beta_only_frac=a.beta_only_frac,
                        precond=a.precond)
    runner = run_outcome_chain if a.model == "outcome" else run_mediator_chain
    trace = runner(data, bases, cfg)
    out = io.save_trace(a.out, trace)
    _save_grid(out, data.grid)
    io.save_bases(out / "bases", bases)
    if a.timing:
        io.write_json(a.timing, {"model": a.model, "wall_time_s": round(trace.wall_time, 3)})
    log.info("%s chain: %d draws, acceptance %s, %.1fs", a.model, trace.n_draws,
             np.round(trace.accept_rates, 3).tolist(), trace.wall_time)
    return EXIT_OK


def _load_truth_mask(path: Path, p: int) -> np.ndarray:
    if path.is_dir():
        _, truth = io.load_dataset(path)
        if truth is None:
            raise InvalidArgumentError(f"{path} has no truth maps")
        svme0 = truth["svme0"]
    else:
        svme0 = io.read_tensor(path).ravel()
    if svme0.shape != (p,):
        raise InvalidArgumentError("truth map length does not match the traces")
    return svme0 != 0


def cmd_mediate(a) -> int:
    mode, level = parse_mode(a.mode)
    if mode == "fdr" and not a.truth:
        raise InvalidArgumentError("fdr mode requires --truth")
    ot = io.load_trace(a.outcome_trace)
    mt = io.load_trace(a.mediator_trace)
    if ot.model != "outcome" or mt.model != "mediator":
        raise InvalidArgumentError("expected an outcome trace and a mediator trace")
    grid = _load_grid(Path(a.outcome_trace))
    truth = _load_truth_mask(Path(a.truth), grid.p) if a.truth else None
    report = build_report(ot, mt, grid, mode=mode, t0=level, target_fdr=level,
                          truth=truth if mode == "fdr" else None, x=a.x, xprime=a.xprime)
    io.save_report(a.out, report, grid)
    log.info("NIE %.4g, NDE %.4g, %d voxels selected", report.nie_mean, report.nde_mean,
             len(report.selected))
    return EXIT_OK


def cmd_sensitivity(a) -> int:
    data, _ = io.load_dataset(a.data)
    if data.n < 4:
        raise InvalidArgumentError("need at least 4 subjects")
    cfg = SamplerConfig(iters=a.iters, burnin_frac=a.burnin, thin=a.thin, seed=a.seed,
                        init=a.init, beta_only_frac=a.beta_only_frac)
    spec = parse_kernel(a.kernel) if a.kernel else KernelSpec()
    rows = sensitivity(data, parse_floats(a.nus), cfg, spec, parse_floats(a.rho_scales),
                       cutoff_frac=a.cutoff, basis_frac=a.basis_frac, split_seed=a.seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["nu", "rho_scale", "train_mse", "test_mse"]
    io.write_csv(out, cols, [[repr(r[c]) for c in cols] for r in rows])
    return EXIT_OK


def cmd_evaluate(a) -> int:
    if a.replications < 1:
        raise InvalidArgumentError("--replications must be positive")
    design = _design_from_args(a)
    kernel = parse_kernel(a.kernel) if a.kernel else design.kernel
    plan = ReplicationPlan(
        design=design, kernel=kernel, basis_frac=a.basis_frac, cutoff_frac=a.cutoff,
        outcome=SamplerConfig(iters=a.iters, burnin_frac=0.7, thin=a.thin,
                              beta_only_frac=a.beta_only_frac, nu=a.nu),
        mediator=SamplerConfig(iters=a.mediator_iters, burnin_frac=0.9, nu=a.nu,
                               eta_update=a.eta),
        target_fdr=a.target_fdr, pattern=a.pattern)
    summary, rows, timings = evaluate(plan, a.replications, a.seed, a.workers)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ["fdr", "tpr", "acc", "mse_activation"]
    io.write_csv(out / "metrics.csv", ["metric", "mean", "sd"],
                  [[k, repr(summary[k][0]), repr(summary[k][1])] for k in names])
    cols = ["replication", "seed", "pattern", *names, "threshold", "nie", "nde"]
    io.write_csv(out / "replications.csv", cols,
                  [[r[c] if c in ("replication", "seed", "pattern") else repr(float(r[c]))
                    for c in cols] for r in rows])
    if a.timing:
        io.write_json(a.timing, {
            "outcome_s": [round(t["outcome_s"], 3) for t in timings],
            "mediator_s": [round(t["mediator_s"], 3) for t in timings]})
    for k in names:
        log.info("%s %.2f (%.2f)", k, *summary[k])
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_sim_flags(p, default_n=200):
    p.add_argument("--n", type=int, default=default_n)
    p.add_argument("--grid", default="20x20x4", help="lattice sides and region count")
    p.add_argument("--sigma-y", type=float, default=0.1)
    p.add_argument("--sigma-m", type=float, default=1.0)
    p.add_argument("--nu-true", type=float, default=0.1)
    p.add_argument("--eta-scale", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)


def _add_basis_flags(p):
    p.add_argument("--kernel", help="matern:U:RHO or modified_se:A:B")
    p.add_argument("--cutoff", type=float, default=0.9, help="eigenvalue share to keep")
    p.add_argument("--basis-frac", type=float, default=None,
                   help="fixed basis count as a share of region size")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bima", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_sim_flags(p)
    p.add_argument("--pattern", choices=["sparse", "dense"], default="sparse")
    p.add_argument("--kernel", help="kernel used to draw smooth nuisance fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bases", help="precompute per-region bases for a dataset")
    p.add_argument("--data", required=True)
    _add_basis_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bases)

    p = sub.add_parser("fit", help="run the outcome or mediator sampler")
    p.add_argument("model", choices=["outcome", "mediator"])
    p.add_argument("--data", required=True)
    p.add_argument("--bases", help="directory written by 'bima bases'")
    _add_basis_flags(p)
    p.add_argument("--nu", type=float, default=0.5)
    p.add_argument("--iters", type=_positive_int, default=20000)
    p.add_argument("--burnin", type=float, default=None,
                   help="burn-in share (default 0.7 outcome, 0.9 mediator)")
    p.add_argument("--thin", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=["zero", "gp", "lasso"], default="gp")
    p.add_argument("--eta", choices=["full", "zero"], default="full")
    p.add_argument("--beta-only-frac", type=float, default=0.4)
    p.add_argument("--precond", choices=["identity", "prior"], default="identity")
    p.add_argument("--timing", help="optional JSON file for wall time (not deterministic)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mediate", help="summarise paired traces into effect maps")
    p.add_argument("--outcome-trace", required=True)
    p.add_argument("--mediator-trace", required=True)
    p.add_argument("--mode", default="pip:0.1", help="fdr:<target> or pip:<t0>")
    p.add_argument("--truth", help="dataset directory with truth, or a BIMT effect map")
    p.add_argument("--x", type=float, default=1.0)
    p.add_argument("--xprime", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mediate)

    p = sub.add_parser("sensitivity", help="2-fold train/test MSE over thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--nus", default="0.01,0.05,0.1")
    p.add_argument("--rho-scales", default="1", help="kernel scale factors (Matern)")
    _add_basis_flags(p)
    p.add_argument("--iters", type=_positive_int, default=5000)
    p.add_argument("--burnin", type=float, default=0.7)
    p.add_argument("--thin", type=_positive_int, default=5)
    p.add_argument("--init", choices=["zero", "gp", "lasso"], default="gp")
    p.add_argument("--beta-only-frac", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("evaluate", help="simulation replications scored against truth")
    _add_sim_flags(p)
    p.add_argument("--pattern", choices=["sparse", "dense", "mix"], default="mix")
    p.add_argument("--replications", type=int, default=10)
    _add_basis_flags(p)
    p.add_argument("--nu", type=float, default=0.5)
    p.add_argument("--iters", type=_positive_int, default=20000)
    p.add_argument("--mediator-iters", type=_positive_int, default=5000)
    p.add_argument("--thin", type=_positive_int, default=5)
    p.add_argument("--beta-only-frac", type=float, default=0.4)
    p.add_argument("--eta", choices=["full", "zero"], default="full")
    p.add_argument("--target-fdr", type=float, default=0.1)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--timing", help="optional JSON file for per-replication wall times")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=worker_count(None)):
            return args.func(args)
    except DivergenceError as exc:
        print(f"bima: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (BimaError, ValueError, OSError) as exc:
        print(f"bima: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
