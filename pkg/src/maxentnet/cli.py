"""Command-line entry point.

Every command writes CSV whose ``#`` header echoes the fully resolved
configuration, so outputs are self-describing.  Exit codes: 0 success,
2 input error, 3 numerical infeasibility, 4 training divergence.
"""
import argparse
import contextlib
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import (
    InfeasibleStart,
    InvalidInput,
    MaxEntError,
    NotPositiveDefinite,
    OracleUnavailable,
    ReconstructionInfeasible,
    TrainingDiverged,
)
from .expfamily import ActivationKind, lambda_prime, mean_lambda
from .io import format_float, load_model, read_matrix, save_model, write_csv
from .manifold import conditional_mean_oracle, gaussian_manifold_sample, run_chains
from .numerics import RngStream
from .pbn import (
    forward,
    init_network,
    layerwise_efficiency,
    reconstruct_batch,
    train_autoencoder,
)
from .saddle import LayerMap, SolverConfig, gamma_inverse

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4

_SEED_LIMIT = 2**64


@dataclass
class RunConfig:
    """Resolved options of one command, in flag order."""

    command: str
    options: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args):
        opts = {k: v for k, v in vars(args).items() if k not in ("command", "handler", "config")}
        cfg = cls(args.command, opts)
        cfg.validate()
        return cfg

    def validate(self):
        for key in ("tol", "step", "grid", "n_points", "epochs", "max_iter", "chains",
                    "n_samples", "thin", "draws", "batch_size"):
            v = self.options.get(key)
            if v is not None and not v > 0:
                raise InvalidInput(f"--{key.replace('_', '-')} must be positive")
        if self.options.get("burn_in", 0) < 0:
            raise InvalidInput("--burn-in must be non-negative")
        seed = self.options.get("seed")
        if seed is not None and not 0 <= seed < _SEED_LIMIT:
            raise InvalidInput("--seed must be a 64-bit unsigned integer")

    def header(self):
        meta = {"maxentnet": __version__, "command": self.command}
        for k, v in self.options.items():
            meta[k] = _show(v)
        return meta

    def solver(self):
        return SolverConfig(tol=self.options["tol"], max_iter=self.options["max_iter"])


def _show(v):
    if isinstance(v, ActivationKind):
        return v.name.lower()
    if isinstance(v, float):
        return format_float(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_show(x) for x in v)
    return "-" if v is None else str(v)


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="\n") as fh:
            yield fh


def _kind(text):
    try:
        return ActivationKind.parse(text)
    except (InvalidInput, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kinds(text):
    return [_kind(t) for t in text.split(",")]


def _widths(text):
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("widths must be comma-separated integers") from None


def _cols(prefix, n):
    return [f"{prefix}{i + 1}" for i in range(n)]


def _load_problem(cfg):
    o = cfg.options
    W = read_matrix(o["weights"], header=o["header"])
    Z = read_matrix(o["features"], header=o["header"])
    if Z.shape[1] != W.shape[1]:
        raise InvalidInput(f"features have {Z.shape[1]} columns but W has {W.shape[1]}")
    return LayerMap(W, o["kind"]), Z


# ---------------------------------------------------------------- commands

def cmd_activations(cfg):
    o = cfg.options
    kind = o["kind"]
    if not o["min"] < o["max"] and o["n_points"] > 1:
        raise InvalidInput("--min must be below --max")
    theta = np.linspace(o["min"], o["max"], o["n_points"])
    lam = np.asarray(mean_lambda(kind, theta))
    dlam = np.asarray(lambda_prime(kind, theta))
    sigmoid = 1.0 / (1.0 + np.exp(-theta))
    softplus = np.logaddexp(0.0, theta)
    with _output(o["out"]) as fh:
        write_csv(
            fh,
            np.column_stack([theta, lam, dlam, sigmoid, softplus]),
            columns=["theta", "lambda", "lambda_prime", "sigmoid", "softplus"],
            meta=cfg.header(),
            footer=[
                f"max |lambda - sigmoid|: {format_float(np.max(np.abs(lam - sigmoid)))}",
                f"max |lambda - softplus|: {format_float(np.max(np.abs(lam - softplus)))}",
            ],
        )
    return EXIT_OK


def cmd_invert(cfg):
    o = cfg.options
    lmap, Z = _load_problem(cfg)
    sol = gamma_inverse(lmap, Z, cfg.solver())
    N, M = lmap.shape
    rows = np.column_stack([sol.h, sol.x_hat, sol.residual_inf, sol.iterations,
                            sol.converged.astype(int)])
    n_bad = int((~sol.converged).sum())
    with _output(o["out"]) as fh:
        write_csv(
            fh, rows,
            columns=_cols("h", M) + _cols("x_hat", N) + ["residual", "iterations", "converged"],
            meta=cfg.header(),
            footer=[f"converged: {Z.shape[0] - n_bad}/{Z.shape[0]}"],
        )
    if n_bad:
        print(f"error: {n_bad} of {Z.shape[0]} solves did not converge", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_sample(cfg):
    o = cfg.options
    lmap, Z = _load_problem(cfg)
    if Z.shape[0] != 1:
        raise InvalidInput("sample takes exactly one feature row")
    z = Z[0]
    N, _ = lmap.shape
    rngs = RngStream(o["seed"]).spawn(o["chains"])
    sol = gamma_inverse(lmap, z, SolverConfig(tol=min(o["tol"], 1e-12), max_iter=o["max_iter"]))
    if not sol.converged:
        raise InfeasibleStart(f"no interior starting point: gamma inverse residual {sol.residual_inf:.3g}")
    if lmap.kind is ActivationKind.LINEAR:
        samples = np.stack([gaussian_manifold_sample(lmap, z, r, o["n_samples"]) for r in rngs])
    else:
        C = o["chains"]
        samples = run_chains([lmap] * C, [z] * C, [sol.x_hat] * C,
                             o["burn_in"], o["n_samples"], o["thin"], rngs)
    flat = samples.reshape(-1, N)
    chain = np.repeat(np.arange(o["chains"]), o["n_samples"])
    mean = flat.mean(axis=0)
    feas = float(np.max(np.abs(flat @ lmap.W - z))) if flat.size else 0.0
    summary = [
        "mean: " + ",".join(format_float(v) for v in mean),
        "x_hat: " + ",".join(format_float(v) for v in sol.x_hat),
        f"max |mean - x_hat|: {format_float(np.max(np.abs(mean - sol.x_hat)))}",
        f"max |W'x - z|: {format_float(feas)}",
    ]
    with _output(o["out"]) as fh:
        rows = ([str(c)] + [format_float(v) for v in x] for c, x in zip(chain, flat))
        write_csv(fh, rows, columns=["chain"] + _cols("x", N), meta=cfg.header(), footer=summary)
    if o["out"] not in (None, "-"):
        print("\n".join(summary))
    return EXIT_OK


def cmd_oracle(cfg):
    o = cfg.options
    lmap, Z = _load_problem(cfg)
    N, M = lmap.shape
    if N - M > 2:
        raise OracleUnavailable(f"oracle restricted to desk scale (N - M = {N - M} > 2)")
    means = np.stack([conditional_mean_oracle(lmap, z, grid=o["grid"]) for z in Z])
    with _output(o["out"]) as fh:
        write_csv(fh, means, columns=_cols("x", N), meta=cfg.header())
    return EXIT_OK


def cmd_train(cfg):
    o = cfg.options
    X = read_matrix(o["data"], header=o["header"])
    widths = o["widths"]
    kinds = o["kinds"]
    if len(kinds) == 1:
        kinds = kinds * (len(widths) - 1)
    if len(kinds) != len(widths) - 1:
        raise InvalidInput(f"{len(widths) - 1} layers need 1 or {len(widths) - 1} kinds")
    if X.shape[1] != widths[0]:
        raise InvalidInput(f"data has {X.shape[1]} columns but the first width is {widths[0]}")
    rng = RngStream(o["seed"])
    init_rng, batch_rng = rng.spawn(2)
    net = init_network(widths, kinds, init_rng, scale=o["scale"], data=X)
    trace = []
    code = EXIT_OK
    try:
        trace = train_autoencoder(net, X, o["epochs"], o["step"], rng=batch_rng,
                                  cfg=cfg.solver(), batch_size=o["batch_size"])
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    if code == EXIT_OK and o["model_out"]:
        save_model(net, o["model_out"])
    with _output(o["trace_out"]) as fh:
        write_csv(fh, ([str(i), format_float(v)] for i, v in enumerate(trace)),
                  columns=["epoch", "loss"], meta=cfg.header())
    return code


def cmd_reconstruct(cfg):
    o = cfg.options
    net = load_model(o["model"])
    data = read_matrix(o["data"], header=o["header"])
    if o["features"]:
        if data.shape[1] != net.widths[-1]:
            raise InvalidInput(f"features have {data.shape[1]} columns, model outputs {net.widths[-1]}")
        X, Z = None, data
    else:
        if data.shape[1] != net.widths[0]:
            raise InvalidInput(f"data has {data.shape[1]} columns, model expects {net.widths[0]}")
        X = data
        _, Z = forward(net, X)
    S = Z.shape[0]
    draws = o["draws"] if o["mode"] == "stochastic" else 1
    rng = RngStream(o["seed"])
    xr, failed = reconstruct_batch(net, np.repeat(Z, draws, axis=0), o["mode"], rng, cfg.solver())
    ok = (failed < 0).reshape(S, draws)
    xr = xr.reshape(S, draws, -1)
    n_ok = ok.sum(axis=1)
    with np.errstate(invalid="ignore"):
        x_mean = np.where(n_ok[:, None] > 0,
                          np.nansum(xr, axis=1) / np.maximum(n_ok, 1)[:, None], np.nan)
    good = n_ok > 0
    resid = np.full(S, np.nan)
    if good.any():
        _, z_back = forward(net, x_mean[good])
        resid[good] = np.max(np.abs(z_back - Z[good]), axis=1)
    cols = _cols("x", net.widths[0]) + ["feature_residual"]
    rows = np.column_stack([x_mean, resid])
    footer = []
    if X is not None:
        sq = np.sum((x_mean - X) ** 2, axis=1)
        rows = np.column_stack([rows, sq])
        cols.append("squared_error")
        mse = float(np.mean(sq[good])) if good.any() else float("nan")
        footer.append(f"mse: {format_float(mse)}")
    eff = ok.sum() / ok.size
    footer.append(f"sampling efficiency: {format_float(eff)} ({int(ok.sum())}/{ok.size})")
    if X is not None:
        lw = layerwise_efficiency(net, X, cfg.solver())
        footer.append(f"layerwise efficiency: {format_float(lw.efficiency)} ({lw.successes}/{lw.attempts})")
    with _output(o["out"]) as fh:
        write_csv(fh, rows, columns=cols, meta=cfg.header(), footer=footer)
    if o["out"] not in (None, "-"):
        print("\n".join(footer))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _solver_flags(p):
    p.add_argument("--tol", type=float, default=1e-10, help="residual tolerance (default 1e-10)")
    p.add_argument("--max-iter", type=int, default=200, help="Newton iteration cap (default 200)")


def _problem_flags(p):
    p.add_argument("--weights", "-W", required=True, help="CSV, N rows by M columns")
    p.add_argument("--features", "-z", required=True, help="CSV, one feature vector per row")
    p.add_argument("--kind", type=_kind, required=True, help="ted, tg, exp or linear")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="maxentnet",
        description="Maximum-entropy layers, their inverse, manifold sampling and PBN autoencoders.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, handler, help):
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(handler=handler)
        p.add_argument("--header", action="store_true", help="input CSVs start with a header row")
        return p

    p = add("activations", cmd_activations, "tabulate lambda and lambda' on a theta grid")
    p.add_argument("--kind", type=_kind, required=True)
    p.add_argument("--min", type=float, default=-8.0)
    p.add_argument("--max", type=float, default=8.0)
    p.add_argument("-n", "--n-points", type=int, default=161)
    p.add_argument("--out", "-o")

    p = add("invert", cmd_invert, "solve W' lambda(theta0 + W h) = z for each feature row")
    _problem_flags(p)
    _solver_flags(p)
    p.add_argument("--out", "-o")

    p = add("sample", cmd_sample, "hit-and-run samples from the manifold posterior of one feature")
    _problem_flags(p)
    _solver_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--out", "-o")

    p = add("oracle", cmd_oracle, "posterior mean by quadrature (N - M <= 2)")
    _problem_flags(p)
    p.add_argument("--grid", type=int, default=2001)
    p.add_argument("--out", "-o")

    p = add("train", cmd_train, "train a PBN autoencoder by gradient descent")
    p.add_argument("--data", required=True)
    p.add_argument("--widths", type=_widths, required=True, help="e.g. 16,8,4")
    p.add_argument("--kinds", type=_kinds, required=True,
                   help="prior kind of each layer's input, one or one per layer")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--scale", type=float, default=1.0, help="initial weight scale")
    _solver_flags(p)
    p.add_argument("--model-out")
    p.add_argument("--trace-out")

    p = add("reconstruct", cmd_reconstruct, "reconstruct inputs through a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="inputs, or top features with --features")
    p.add_argument("--features", action="store_true", help="--data holds top-layer features")
    p.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    p.add_argument("--draws", type=int, default=1, help="stochastic draws averaged per sample")
    p.add_argument("--seed", type=int, default=0)
    _solver_flags(p)
    p.add_argument("--out", "-o")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        parser.error("--config is reserved and not supported yet")
    try:
        cfg = RunConfig.from_args(args)
        return args.handler(cfg)
    except (InfeasibleStart, ReconstructionInfeasible, NotPositiveDefinite) as exc:
        code, msg = EXIT_INFEASIBLE, str(exc)
    except TrainingDiverged as exc:
        code, msg = EXIT_DIVERGED, str(exc)
    except (MaxEntError, ValueError, OSError) as exc:
        code, msg = EXIT_INPUT, str(exc)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
