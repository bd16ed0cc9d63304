"""Simulated master/worker cluster running the coded protocol end to end.

A job goes through three phases:

1. the master partitions and encodes ``X``, encrypts share ``i`` under
   worker ``i``'s public key and sends it;
2. each worker decrypts, computes ``f`` on its share, encrypts the result
   under the master's key and sends it back;
3. the master collects results under a wait policy, decrypts and decodes.

Time is virtual by default: every worker's completion time is sampled from
its profile and the master processes arrivals in that order, so a seed
fixes every output.  ``realtime=True`` sleeps for the sampled delays in a
thread pool instead and measures the wall clock.
"""

from __future__ import annotations

import random
import re
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from concurrent.futures import TimeoutError as FuturesTimeout
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import codec
from .codec import CodecConfig, ReturnedResult
from .ecc import (
    P256,
    CipherMatrix,
    CurveParams,
    KeyPair,
    derive_shared,
    keygen,
    mea_decrypt,
    mea_encrypt,
    precompute,
    random_ephemeral,
)
from .errors import JobFailed, ProtocolError
from .realmat import QuantizedMatrix, as_matrix, dequantize, partition_rows, quantize

__all__ = [
    "FUNCTIONS",
    "WaitPolicy",
    "WorkerProfile",
    "TaskSpec",
    "Message",
    "ClusterReport",
    "AuditRecord",
    "Cluster",
    "make_profiles",
    "simulate_delays",
    "run_job",
    "collusion_audit",
]

DEFAULT_SCALE_BITS = 24


def _identity(X, operand=None):
    return X


def _gram(X, operand=None):
    return X @ X.T


def _square(X, operand=None):
    return X * X


def _backprop_delta(B, operand):
    # linear part of the backprop delta: rows of W^T times the next-layer deltas
    if operand is None:
        raise ValueError("backprop_delta needs a broadcast operand")
    return B @ operand


FUNCTIONS: dict[str, Callable] = {
    "identity": _identity,
    "gram": _gram,
    "square": _square,
    "backprop_delta": _backprop_delta,
}


@dataclass(frozen=True)
class WaitPolicy:
    """When the master stops collecting: ``all``, ``first_r(r)`` or ``deadline(t)``."""

    kind: str = "all"
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("all", "first_r", "deadline"):
            raise ValueError(f"unknown wait policy {self.kind!r}")
        if self.kind == "first_r" and (self.value is None or int(self.value) < 1):
            raise ValueError("first_r needs r >= 1")
        if self.kind == "deadline" and (self.value is None or self.value < 0):
            raise ValueError("deadline needs t >= 0")

    @classmethod
    def parse(cls, text: str) -> "WaitPolicy":
        text = text.strip()
        if text == "all":
            return cls("all")
        m = re.fullmatch(r"(first_r|deadline)\(\s*([0-9.eE+-]+)\s*\)", text)
        if not m:
            raise ValueError(f"cannot parse wait policy {text!r}")
        kind, val = m.groups()
        return cls(kind, int(val) if kind == "first_r" else float(val))

    def __str__(self):
        if self.kind == "all":
            return "all"
        v = int(self.value) if self.kind == "first_r" else self.value
        return f"{self.kind}({v})"

    def select(self, order: Sequence[int], completion: np.ndarray) -> tuple[list[int], float]:
        """Accepted workers (in arrival order) and the time the master stops waiting."""
        if self.kind == "all":
            chosen = list(order)
        elif self.kind == "first_r":
            chosen = list(order[: int(self.value)])
        else:
            chosen = [i for i in order if completion[i] <= self.value]
        if not chosen:
            stop = float(self.value) if self.kind == "deadline" else 0.0
        elif self.kind == "deadline" and len(chosen) < len(order):
            stop = float(self.value)
        else:
            stop = float(max(completion[i] for i in chosen))
        return chosen, stop


@dataclass(frozen=True)
class WorkerProfile:
    index: int
    keypair: KeyPair
    base_compute_delay: float = 1.0
    straggler: bool = False
    straggler_extra_delay: float = 0.0
    colluder: bool = False


def make_profiles(N: int, curve: CurveParams = P256, *, stragglers=(), colluders=(),
                  base_delay: float = 1.0, straggler_delay: float = 10.0,
                  rng_seed=0) -> list[WorkerProfile]:
    """Profiles for ``N`` workers with seeded keypairs (trusted setup)."""
    rng = random.Random(rng_seed)
    stragglers, colluders = set(stragglers), set(colluders)
    bad = [i for i in stragglers | colluders if not 0 <= i < N]
    if bad:
        raise ValueError(f"worker indices out of range: {sorted(bad)}")
    return [
        WorkerProfile(
            index=i,
            keypair=keygen(curve, rng),
            base_compute_delay=base_delay,
            straggler=i in stragglers,
            straggler_extra_delay=straggler_delay if i in stragglers else 0.0,
            colluder=i in colluders,
        )
        for i in range(N)
    ]


def simulate_delays(profiles: Sequence[WorkerProfile], rng_seed=None,
                    jitter_max: float = 0.0) -> np.ndarray:
    """Completion time per worker: base delay, straggler surcharge, uniform jitter."""
    rng = np.random.default_rng(rng_seed)
    jitter = rng.uniform(0.0, jitter_max, size=len(profiles)) if jitter_max > 0 else np.zeros(len(profiles))
    base = np.array([
        p.base_compute_delay + (p.straggler_extra_delay if p.straggler else 0.0)
        for p in profiles
    ])
    return base + jitter


@dataclass(frozen=True)
class TaskSpec:
    function: str
    X: np.ndarray
    codec: CodecConfig
    wait_policy: WaitPolicy = field(default_factory=WaitPolicy)
    operand: np.ndarray | None = None

    def __post_init__(self):
        if self.function not in FUNCTIONS:
            raise ValueError(f"unknown function {self.function!r}; choose from {sorted(FUNCTIONS)}")
        object.__setattr__(self, "X", as_matrix(self.X, name="X"))
        if self.operand is not None:
            object.__setattr__(self, "operand", as_matrix(self.operand, name="operand"))


@dataclass(frozen=True)
class Message:
    direction: str  # "to_worker" or "to_master"
    worker: int
    kind: str  # "share", "operand" or "result"
    payload: CipherMatrix | QuantizedMatrix


@dataclass
class ClusterReport:
    returned_set: list[int]
    per_worker_elapsed: list[float]
    decode_targets_error: list[float]
    wall_clock: float
    colluder_views: dict[int, np.ndarray]
    stragglers: list[int]
    colluders: list[int]
    seed: int | None
    wait_policy: str
    encrypted: bool

    def csv_rows(self) -> list[list]:
        returned = set(self.returned_set)
        straggle, collude = set(self.stragglers), set(self.colluders)
        rows = [["index", "elapsed_ms", "returned", "straggler", "colluder"]]
        for i, t in enumerate(self.per_worker_elapsed):
            rows.append([i, f"{t:.6f}", int(i in returned), int(i in straggle), int(i in collude)])
        err = max(self.decode_targets_error) if self.decode_targets_error else float("nan")
        rows.append(["summary", f"{self.wall_clock:.6f}", len(self.returned_set),
                     len(self.stragglers), len(self.colluders)])
        rows.append(["max_rel_error", f"{err:.12g}", "", "", ""])
        return rows


class Cluster:
    """A master plus ``N`` worker profiles sharing one curve.

    Key exchange runs once at construction.  ``tap`` (if given) is called with
    every :class:`Message` crossing the master/worker boundary.
    """

    def __init__(self, profiles: Sequence[WorkerProfile], curve: CurveParams = P256, *,
                 master_seed=0, encrypt: bool = True, scale_bits: int = DEFAULT_SCALE_BITS,
                 jitter_max: float = 0.0, realtime: bool = False, time_unit: float = 1e-3,
                 tap: Callable[[Message], None] | None = None):
        idx = [p.index for p in profiles]
        if sorted(idx) != list(range(len(profiles))):
            raise ValueError(f"profile indices must be 0..N-1, got {idx}")
        self.profiles = sorted(profiles, key=lambda p: p.index)
        self.curve = curve
        self.master = keygen(curve, random.Random(master_seed))
        self.encrypt = encrypt
        self.scale_bits = scale_bits
        self.jitter_max = jitter_max
        self.realtime = realtime
        self.time_unit = time_unit
        self.tap = tap
        if encrypt:
            precompute(self.master.pk, curve)
            for p in self.profiles:
                precompute(p.keypair.pk, curve)
                a = derive_shared(self.master.sk, p.keypair.pk, curve)
                b = derive_shared(p.keypair.sk, self.master.pk, curve)
                if a != b:
                    raise ProtocolError(f"key exchange mismatch with worker {p.index}")

    @property
    def N(self) -> int:
        return len(self.profiles)

    def _send(self, M: np.ndarray, pk, rng: random.Random, direction: str, worker: int, kind: str):
        Q = quantize(M, self.scale_bits, self.curve.q if self.encrypt else None)
        if self.encrypt:
            payload = mea_encrypt(Q, pk, random_ephemeral(self.curve, rng), self.curve)
        else:
            payload = Q
        msg = Message(direction, worker, kind, payload)
        if self.tap is not None:
            self.tap(msg)
        return msg

    def _receive(self, msg: Message, sk: int, shape=None) -> np.ndarray:
        if self.encrypt:
            if not isinstance(msg.payload, CipherMatrix):
                raise ProtocolError(f"worker {msg.worker}: expected ciphertext, got {type(msg.payload).__name__}")
            Q = mea_decrypt(msg.payload, sk, self.curve)
        else:
            Q = msg.payload
        if shape is not None and Q.shape != shape:
            raise ProtocolError(f"worker {msg.worker}: payload shape {Q.shape}, expected {shape}")
        return dequantize(Q)

    def _streams(self, rng_seed):
        ss = np.random.SeedSequence(rng_seed)
        mask_seq, delay_seq, master_seq, *worker_seqs = ss.spawn(3 + self.N)
        master_rng = random.Random(int(master_seq.generate_state(1)[0]))
        worker_rngs = [random.Random(int(s.generate_state(1)[0])) for s in worker_seqs]
        return mask_seq, delay_seq, master_rng, worker_rngs

    def _distribute(self, spec: TaskSpec, mask_seq, master_rng):
        # phase I: encode, encrypt, one share (plus operand) per worker
        cfg = spec.codec
        blocks = partition_rows(spec.X, cfg.K)
        masks = codec.gen_masks(cfg.T, blocks[0].shape, cfg.mask_scale, mask_seq)
        shares = codec.encode(blocks, masks, cfg)
        outbox = []
        for p, share in zip(self.profiles, shares):
            share_msg = self._send(share.payload, p.keypair.pk, master_rng, "to_worker", p.index, "share")
            op_msg = None
            if spec.operand is not None:
                op_msg = self._send(spec.operand, p.keypair.pk, master_rng, "to_worker", p.index, "operand")
            outbox.append((share_msg, op_msg))
        return blocks, outbox

    def distribute(self, spec: TaskSpec, rng_seed=None) -> list[Message]:
        """Only the encode-and-send phase: the share message bound for each worker.

        Uses the same random streams as :meth:`run`, so the shares match the
        ones a full job with this seed would send.
        """
        if spec.codec.N != self.N:
            raise ValueError(f"codec expects N={spec.codec.N} workers, cluster has {self.N}")
        mask_seq, _, master_rng, _ = self._streams(rng_seed)
        return [share for share, _ in self._distribute(spec, mask_seq, master_rng)[1]]

    def run(self, spec: TaskSpec, rng_seed=None) -> tuple[list[np.ndarray], ClusterReport]:
        cfg = spec.codec
        if cfg.N != self.N:
            raise ValueError(f"codec expects N={cfg.N} workers, cluster has {self.N}")
        f = FUNCTIONS[spec.function]
        mask_seq, delay_seq, master_rng, worker_rngs = self._streams(rng_seed)
        blocks, outbox = self._distribute(spec, mask_seq, master_rng)

        completion = simulate_delays(self.profiles, delay_seq, self.jitter_max)

        # phase II: worker-side compute
        def work(i: int) -> Message:
            p = self.profiles[i]
            share_msg, op_msg = outbox[i]
            X_i = self._receive(share_msg, p.keypair.sk, blocks[0].shape)
            operand = None if op_msg is None else self._receive(op_msg, p.keypair.sk, spec.operand.shape)
            Y_i = as_matrix(f(X_i, operand), name=f"f(share {i})")
            return self._send(Y_i, self.master.pk, worker_rngs[i], "to_master", i, "result")

        colluder_views = {}
        for p in self.profiles:
            if p.colluder:
                colluder_views[p.index] = self._receive(outbox[p.index][0], p.keypair.sk)

        if self.realtime:
            accepted, replies, wall = self._collect_realtime(work, completion, spec.wait_policy)
        else:
            order = sorted(range(self.N), key=lambda i: (completion[i], i))
            accepted, wall = spec.wait_policy.select(order, completion)
            replies = {i: work(i) for i in accepted}
        if not accepted:
            raise JobFailed(f"no results arrived under wait policy {spec.wait_policy}")

        # phase III: decrypt and decode
        results = [ReturnedResult(i, self._receive(replies[i], self.master.sk)) for i in accepted]
        decoded = codec.recover(results, cfg)

        errors = []
        for blk, approx in zip(blocks, decoded):
            exact = f(blk, spec.operand)
            denom = np.linalg.norm(exact)
            diff = np.linalg.norm(approx - exact)
            errors.append(float(diff / denom) if denom > 0 else float(diff))

        report = ClusterReport(
            returned_set=sorted(accepted),
            per_worker_elapsed=[float(t) for t in completion],
            decode_targets_error=errors,
            wall_clock=float(wall),
            colluder_views=colluder_views,
            stragglers=[p.index for p in self.profiles if p.straggler],
            colluders=[p.index for p in self.profiles if p.colluder],
            seed=rng_seed if isinstance(rng_seed, int) else None,
            wait_policy=str(spec.wait_policy),
            encrypted=self.encrypt,
        )
        return decoded, report

    def _collect_realtime(self, work, completion, policy: WaitPolicy):
        def job(i):
            time.sleep(completion[i] * self.time_unit)
            return i, work(i)

        start = time.perf_counter()
        accepted, replies = [], {}
        limit = self.N if policy.kind == "all" else (int(policy.value) if policy.kind == "first_r" else self.N)
        pool = ThreadPoolExecutor(max_workers=self.N)
        try:
            futures = [pool.submit(job, i) for i in range(self.N)]
            timeout = policy.value * self.time_unit if policy.kind == "deadline" else None
            try:
                for fut in as_completed(futures, timeout=timeout):
                    i, msg = fut.result()
                    accepted.append(i)
                    replies[i] = msg
                    if len(accepted) >= limit:
                        break
            except FuturesTimeout:
                pass
        finally:
            pool.shutdown(wait=False, cancel_futures=True)
        wall = (time.perf_counter() - start) / self.time_unit
        return accepted, replies, wall

    def run_uncoded(self, function: str, X, operand=None, rng_seed=None) -> tuple[np.ndarray, ClusterReport]:
        """Uncoded baseline: ``N`` plain row blocks, one per worker, wait for all.

        Uses the same wire path (quantize, encrypt) as :meth:`run`.
        """
        if function == "gram":
            raise ValueError("the uncoded baseline only supports row-separable functions")
        f = FUNCTIONS[function]
        X = as_matrix(X, name="X")
        operand = None if operand is None else as_matrix(operand, name="operand")
        ss = np.random.SeedSequence(rng_seed)
        delay_seq, master_seq, *worker_seqs = ss.spawn(2 + self.N)
        master_rng = random.Random(int(master_seq.generate_state(1)[0]))
        worker_rngs = [random.Random(int(s.generate_state(1)[0])) for s in worker_seqs]
        blocks = partition_rows(X, self.N)
        completion = simulate_delays(self.profiles, delay_seq, self.jitter_max)
        outputs = []
        for p, blk in zip(self.profiles, blocks):
            share_msg = self._send(blk, p.keypair.pk, master_rng, "to_worker", p.index, "share")
            X_i = self._receive(share_msg, p.keypair.sk, blk.shape)
            op = None
            if operand is not None:
                op_msg = self._send(operand, p.keypair.pk, master_rng, "to_worker", p.index, "operand")
                op = self._receive(op_msg, p.keypair.sk, operand.shape)
            reply = self._send(as_matrix(f(X_i, op)), self.master.pk, worker_rngs[p.index],
                               "to_master", p.index, "result")
            outputs.append(self._receive(reply, self.master.sk))
        exact = f(X, operand)
        Y = np.vstack(outputs)[: exact.shape[0]]
        denom = np.linalg.norm(exact)
        err = float(np.linalg.norm(Y - exact) / denom) if denom > 0 else float(np.linalg.norm(Y - exact))
        report = ClusterReport(
            returned_set=list(range(self.N)),
            per_worker_elapsed=[float(t) for t in completion],
            decode_targets_error=[err],
            wall_clock=float(completion.max()),
            colluder_views={},
            stragglers=[p.index for p in self.profiles if p.straggler],
            colluders=[p.index for p in self.profiles if p.colluder],
            seed=rng_seed if isinstance(rng_seed, int) else None,
            wait_policy="all",
            encrypted=self.encrypt,
        )
        return Y, report


def run_job(spec: TaskSpec, profiles: Sequence[WorkerProfile], rng_seed=None, **cluster_kw):
    """Build a :class:`Cluster` from ``profiles`` and run one job on it."""
    return Cluster(profiles, **cluster_kw).run(spec, rng_seed)


@dataclass
class AuditRecord:
    colluders: list[int]
    bound_exceeded: bool
    ks_statistic: float
    p_value: float
    passed: bool
    residual_mask: float
    trials: int
    significance: float

    @property
    def verdict(self) -> str:
        if self.bound_exceeded:
            return "bound_exceeded"
        return "pass" if self.passed else "fail"


def _attack_direction(C_mask: np.ndarray) -> np.ndarray:
    # combination of colluder views that suppresses the masks as far as possible
    if C_mask.shape[1] == 0:
        v = np.zeros(C_mask.shape[0])
        v[0] = 1.0
        return v
    U, s, _ = np.linalg.svd(C_mask, full_matrices=True)
    return U[:, -1]


def collusion_audit(report: ClusterReport, X, cfg: CodecConfig, *, X_alt=None,
                    trials: int = 10_000, significance: float = 0.01,
                    rng_seed=0) -> AuditRecord:
    """Check whether the colluders' pooled views separate two inputs.

    The colluders' best linear combination of their shares (the one that
    cancels the masks as far as possible) is sampled over ``trials`` fresh
    mask draws for ``X`` and for ``X_alt``, at the entry where the two data
    contributions differ most.  A two-sample Kolmogorov-Smirnov test that does
    not reject at ``significance`` counts as a pass.  More colluders than
    ``T`` is reported as ``bound_exceeded`` rather than raised.
    """
    colluders = sorted(report.colluders)
    if not colluders:
        raise ValueError("report has no colluders to audit")
    X = as_matrix(X, name="X")
    rng = np.random.default_rng(rng_seed)
    if X_alt is None:
        bound = np.max(np.abs(X)) or 1.0
        X_alt = rng.uniform(-bound, bound, size=X.shape)
    X_alt = as_matrix(X_alt, name="X_alt")
    if X_alt.shape != X.shape:
        raise ValueError(f"X_alt shape {X_alt.shape} differs from X {X.shape}")

    C = np.stack([codec.encoder_weights(cfg.alpha[i], cfg) for i in colluders])
    lam = _attack_direction(C[:, cfg.K:])
    data_w = lam @ C[:, :cfg.K]
    mask_w = lam @ C[:, cfg.K:]
    scale = np.linalg.norm(data_w) or 1.0
    residual = float(np.linalg.norm(mask_w) / scale)

    def data_part(M):
        blocks = partition_rows(M, cfg.K)
        return np.tensordot(data_w, np.stack(blocks), axes=1)

    D, D_alt = data_part(X), data_part(X_alt)
    r, c = np.unravel_index(np.argmax(np.abs(D - D_alt)), D.shape)

    def samples(offset):
        # fresh masks per trial; only the audited entry is materialised
        Z = rng.uniform(-cfg.mask_scale, cfg.mask_scale, size=(trials, cfg.T))
        return offset + Z @ mask_w

    s1, s2 = samples(D[r, c]), samples(D_alt[r, c])
    res = stats.ks_2samp(s1, s2)
    bound_exceeded = len(colluders) > cfg.T
    return AuditRecord(
        colluders=colluders,
        bound_exceeded=bound_exceeded,
        ks_statistic=float(res.statistic),
        p_value=float(res.pvalue),
        passed=(not bound_exceeded) and res.pvalue >= significance,
        residual_mask=residual,
        trials=trials,
        significance=significance,
    )
