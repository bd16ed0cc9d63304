"""Command-line driver: ``spacdc {encode,run,train,audit,bench}``.

Every file written starts with a ``#`` header carrying the config hash, the
seed and the fully resolved configuration.  Exit codes: 0 success, 2 config
error, 3 job failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import functools
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec
from .cluster import (
    Cluster,
    TaskSpec,
    WaitPolicy,
    collusion_audit,
    make_profiles,
)
from .codec import CodecConfig, default_anchors
from .config import ExperimentConfig
from .dl import TrainConfig, load_dataset, train
from .ecc import curve_from_config, serialize_cipher
from .errors import InvalidConfig, SpacdcError
from .realmat import read_matrix, write_matrix

log = logging.getLogger("spacdc")

EXIT_OK, EXIT_CONFIG, EXIT_JOB, EXIT_IO = 0, 2, 3, 4


def _config_stage(fn):
    """Report bad values met while building objects as config errors."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvalidConfig:
            raise
        except ValueError as e:
            raise InvalidConfig(str(e)) from e

    return wrapper


# ---------------------------------------------------------------- config -> objects

@_config_stage
def codec_config(cfg: ExperimentConfig) -> CodecConfig:
    N, K, T = cfg.int("codec.n"), cfg.int("codec.k"), cfg.int("codec.t")
    mask_scale = cfg.float("codec.mask_scale")
    alpha, beta = cfg.list("codec.alpha"), cfg.list("codec.beta")
    if not alpha and not beta:
        return default_anchors(N, K, T, mask_scale)
    if not alpha or not beta:
        default = default_anchors(N, K, T, mask_scale)
        alpha = alpha or list(default.alpha)
        beta = beta or list(default.beta)
    return CodecConfig(N, K, T, tuple(beta), tuple(alpha), mask_scale)


@_config_stage
def curve(cfg: ExperimentConfig):
    return curve_from_config(cfg.section("curve"))


@_config_stage
def wait_policy(cfg: ExperimentConfig) -> WaitPolicy:
    text = cfg.get("cluster.wait_policy")
    if text:
        return WaitPolicy.parse(text)
    n_strag = len(cfg.list("cluster.stragglers", int))
    if n_strag:
        return WaitPolicy("first_r", cfg.int("cluster.n") - n_strag)
    return WaitPolicy("all")


@_config_stage
def build_cluster(cfg: ExperimentConfig, colluders: Sequence[int] | None = None) -> Cluster:
    N = cfg.int("cluster.n")
    crv = curve(cfg)
    profiles = make_profiles(
        N, crv,
        stragglers=cfg.list("cluster.stragglers", int),
        colluders=cfg.list("cluster.colluders", int) if colluders is None else colluders,
        base_delay=cfg.float("cluster.base_delay_ms"),
        straggler_delay=cfg.float("cluster.straggler_delay_ms"),
        rng_seed=cfg.seed,
    )
    return Cluster(
        profiles, crv,
        master_seed=cfg.seed,
        encrypt=cfg.bool("cluster.encrypt"),
        scale_bits=cfg.int("cluster.scale_bits"),
        jitter_max=cfg.float("cluster.jitter_ms"),
        realtime=cfg.bool("cluster.realtime"),
    )


def input_matrix(cfg: ExperimentConfig, *, required: bool = False) -> np.ndarray:
    path = cfg.get("cluster.input")
    if path:
        try:
            return read_matrix(path)
        except ValueError as e:
            raise OSError(f"cannot parse input matrix {path}: {e}") from e
    if required:
        raise InvalidConfig("cluster.input (input matrix file) is required")
    # synthetic default: 8 rows per block, 6 columns
    rng = np.random.default_rng([cfg.seed, 0x1A])
    return rng.standard_normal((8 * cfg.int("codec.k"), 6))


def out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.get("output.dir"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path: Path, header: str, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        for line in header.splitlines():
            fh.write(f"# {line}\n")
        csv.writer(fh).writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_encode(cfg: ExperimentConfig) -> list[Path]:
    X = input_matrix(cfg, required=True)
    code = codec_config(cfg)
    cluster = build_cluster(cfg)
    if not cluster.encrypt:
        raise InvalidConfig("encode writes ciphertext shares; cluster.encrypt must be true")
    spec = TaskSpec("identity", X, code)
    messages = cluster.distribute(spec, cfg.seed)
    out = out_dir(cfg)
    written = []
    for msg in messages:
        path = out / f"share_{msg.worker:03d}.bin"
        head = f"# spacdc config_hash={cfg.hash()} seed={cfg.seed} worker={msg.worker}\n"
        path.write_bytes(head.encode() + serialize_cipher(msg.payload))
        written.append(path)
    manifest = out / "manifest.txt"
    lines = [f"# {h}" for h in cfg.header().splitlines()]
    lines += [
        f"config_hash = {cfg.hash()}",
        f"seed = {cfg.seed}",
        f"n = {code.N}",
        f"k = {code.K}",
        f"t = {code.T}",
        f"beta = {','.join(repr(b) for b in code.beta)}",
        f"alpha = {','.join(repr(a) for a in code.alpha)}",
        f"input_shape = {X.shape[0]},{X.shape[1]}",
        f"curve = {cluster.curve.name}",
        f"scale_bits = {cluster.scale_bits}",
    ]
    lines += [f"share.{p.name} = worker {i}" for i, p in enumerate(written)]
    manifest.write_text("\n".join(lines) + "\n")
    written.append(manifest)
    return written


def cmd_run(cfg: ExperimentConfig) -> list[Path]:
    X = input_matrix(cfg)
    code = codec_config(cfg)
    cluster = build_cluster(cfg)
    spec = TaskSpec(cfg.get("cluster.function"), X, code, wait_policy(cfg))
    decoded, report = cluster.run(spec, cfg.seed)
    out = out_dir(cfg)
    written = []
    for j, Y in enumerate(decoded):
        path = out / f"result_{j:02d}.txt"
        write_matrix(path, Y, header=f"{cfg.header()}\nblock {j}")
        written.append(path)
    path = out / "report.csv"
    _write_csv(path, cfg.header(), report.csv_rows())
    written.append(path)
    log.info("returned %d/%d workers, max rel error %.3g",
             len(report.returned_set), code.N, max(report.decode_targets_error))
    return written


@_config_stage
def train_config(cfg: ExperimentConfig, algo: str) -> TrainConfig:
    code = codec_config(cfg)
    return TrainConfig(
        lr=cfg.float("train.lr"),
        epochs=cfg.int("train.epochs"),
        batch=cfg.int("train.batch"),
        layers=tuple(cfg.list("train.layers", int)),
        algo=algo,
        N=code.N,
        K=code.K,
        T=code.T,
        stragglers=len(cfg.list("cluster.stragglers", int)),
        mask_scale=code.mask_scale,
        base_delay_ms=cfg.float("cluster.base_delay_ms"),
        straggler_delay_ms=cfg.float("cluster.straggler_delay_ms"),
        jitter_ms=cfg.float("cluster.jitter_ms"),
        encrypt=cfg.bool("cluster.encrypt"),
        scale_bits=cfg.int("cluster.scale_bits"),
        curve=curve(cfg),
        seed=cfg.seed,
        codec=code,
    )


def cmd_train(cfg: ExperimentConfig, algo: str | None = None) -> list[Path]:
    algo = algo or cfg.get("train.algo")
    algos = ["spacdc", "conv"] if algo == "both" else [algo]
    configs = [train_config(cfg, a) for a in algos]
    data = load_dataset(cfg.get("train.dataset"), rng_seed=cfg.seed)
    out = out_dir(cfg)
    written = []
    for tc in configs:
        # fresh cluster per algorithm so both start from identical keys and seeds
        _, trace = train(data, tc, cluster=build_cluster(cfg))
        path = out / f"trace_{tc.algo}.csv"
        trace.write_csv(path, header=f"{cfg.header()}\nalgo {tc.algo}")
        written.append(path)
        log.info("%s: loss %.4g -> %.4g, accuracy %.3f", tc.algo, trace.initial_loss,
                 trace.loss[-1], trace.accuracy[-1] if trace.accuracy else float("nan"))
    return written


AUDIT_COLUMNS = ["n_colluders", "colluders", "verdict", "ks_statistic", "p_value",
                 "residual_mask", "trials", "significance"]


def cmd_audit(cfg: ExperimentConfig) -> list[Path]:
    code = codec_config(cfg)
    if code.T < 1:
        raise InvalidConfig("audit needs codec.t >= 1")
    X = input_matrix(cfg)
    trials = cfg.int("audit.trials")
    significance = cfg.float("audit.significance")
    # configured colluders first, then seeded random picks up to T + 1
    pool = list(dict.fromkeys(cfg.list("cluster.colluders", int)))
    rng = np.random.default_rng([cfg.seed, 0xA0D])
    for i in rng.permutation(code.N):
        if len(pool) >= code.T + 1:
            break
        if int(i) not in pool:
            pool.append(int(i))
    if len(pool) < code.T + 1:
        raise InvalidConfig(f"need at least T + 1 = {code.T + 1} workers to audit")
    X_alt = rng.uniform(-1.0, 1.0, size=X.shape) * (np.max(np.abs(X)) or 1.0)
    rows = [AUDIT_COLUMNS]
    for c in range(1, code.T + 2):
        members = pool[:c]
        cluster = build_cluster(cfg, colluders=members)
        _, report = cluster.run(TaskSpec("identity", X, code, WaitPolicy("all")), cfg.seed)
        rec = collusion_audit(report, X, code, X_alt=X_alt, trials=trials,
                              significance=significance, rng_seed=[cfg.seed, c])
        rows.append([c, " ".join(map(str, members)), rec.verdict, repr(rec.ks_statistic),
                     repr(rec.p_value), repr(rec.residual_mask), trials, significance])
    path = out_dir(cfg) / "audit.csv"
    _write_csv(path, cfg.header(), rows)
    return [path]


def _median_ns(fn, repeats: int) -> float:
    fn()  # warmup
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.median(samples))


def bench_rows(sizes: Sequence[int], repeats: int, rows: int, cols: int, seed) -> list[list]:
    """Median timings of decode (one target) versus |F| and of encode versus N."""
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or sizes[0] < 1:
        raise InvalidConfig(f"bench.sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    K, T = 2, 1
    N_max = sizes[-1]
    big = default_anchors(N_max, K, T)
    payloads = rng.standard_normal((N_max, rows, cols))
    out = [["operation", "size", "median_ns", "ns_per_target"]]
    for F in sizes:
        idx = sorted(int(i) for i in rng.choice(N_max, size=F, replace=False))
        results = [codec.ReturnedResult(i, payloads[i]) for i in idx]
        ns = _median_ns(lambda: codec.decode(results, big, big.beta[:1]), repeats)
        out.append(["decode", F, f"{ns:.0f}", f"{ns:.0f}"])
    blocks = [rng.standard_normal((rows, cols)) for _ in range(K)]
    masks = [rng.standard_normal((rows, cols)) for _ in range(T)]
    for N in sizes:
        cfg = default_anchors(N, K, T)
        ns = _median_ns(lambda: codec.encode(blocks, masks, cfg), repeats)
        out.append(["encode", N, f"{ns:.0f}", ""])
    return out


def cmd_bench(cfg: ExperimentConfig) -> list[Path]:
    rows = bench_rows(cfg.list("bench.sizes", int), cfg.int("bench.repeats"),
                      cfg.int("bench.rows"), cfg.int("bench.cols"), cfg.seed)
    path = out_dir(cfg) / "bench.csv"
    _write_csv(path, cfg.header(), rows)
    return [path]


COMMANDS = {
    "encode": cmd_encode,
    "run": cmd_run,
    "train": cmd_train,
    "audit": cmd_audit,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spacdc", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--scenario", choices=["s1", "s2", "s3", "s4"],
                        help="N=30, T=3 preset with 0/3/5/7 stragglers")
    parser.add_argument("--algo", choices=["spacdc", "conv", "both"], help="train only")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict[str, str]:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.out:
        values["output.dir"] = args.out
    return values


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("error: --seed must be a u64", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed, scenario=args.scenario,
                                    overrides=_overrides(args))
    except (InvalidConfig, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO

    command = COMMANDS[args.command]
    try:
        written = command(cfg, args.algo) if args.command == "train" else command(cfg)
    except InvalidConfig as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (SpacdcError, ValueError, ArithmeticError) as e:
        print(f"job failed: {e}", file=sys.stderr)
        return EXIT_JOB
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
