"""Flat ``key = value`` experiment configuration.

Files hold one ``section.key = value`` per line; ``#`` starts a comment.
Lists are comma separated (surrounding brackets optional).  Scenario
presets and command-line overrides are layered on top of the file, in that
order.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig

KNOWN_KEYS = {
    "codec.n", "codec.k", "codec.t", "codec.alpha", "codec.beta", "codec.mask_scale",
    "cluster.n", "cluster.stragglers", "cluster.colluders", "cluster.base_delay_ms",
    "cluster.straggler_delay_ms", "cluster.jitter_ms", "cluster.wait_policy",
    "cluster.function", "cluster.input", "cluster.encrypt", "cluster.scale_bits",
    "cluster.realtime",
    "train.lr", "train.epochs", "train.batch", "train.layers", "train.dataset", "train.algo",
    "curve.profile", "curve.q", "curve.a", "curve.b", "curve.gx", "curve.gy", "curve.n",
    "output.dir",
    "audit.trials", "audit.significance",
    "bench.sizes", "bench.repeats", "bench.rows", "bench.cols",
}

DEFAULT_N = "8"

DEFAULTS = {
    "codec.k": "2",
    "codec.t": "1",
    "codec.mask_scale": "1.0",
    "cluster.stragglers": "",
    "cluster.colluders": "",
    "cluster.base_delay_ms": "1.0",
    "cluster.straggler_delay_ms": "10.0",
    "cluster.jitter_ms": "0.0",
    "cluster.function": "gram",
    "cluster.encrypt": "true",
    "cluster.scale_bits": "24",
    "cluster.realtime": "false",
    "train.lr": "0.05",
    "train.epochs": "30",
    "train.batch": "64",
    "train.layers": "2,16,2",
    "train.dataset": "blobs",
    "train.algo": "spacdc",
    "curve.profile": "p256",
    "output.dir": "out",
    "audit.trials": "10000",
    "audit.significance": "0.01",
    "bench.sizes": "2,4,8,16,32,64,128,256",
    "bench.repeats": "25",
    "bench.rows": "64",
    "bench.cols": "64",
}

SCENARIOS = {
    # N = 30 workers, T = 3 colluders, S stragglers
    "s1": 0,
    "s2": 3,
    "s3": 5,
    "s4": 7,
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise InvalidConfig(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def scenario_values(name: str, seed: int) -> dict[str, str]:
    """Preset for one of the four experimental settings.

    Stragglers and colluders are drawn at random from the 30 workers using
    ``seed``, so a (scenario, seed) pair pins the exact sets.
    """
    if name not in SCENARIOS:
        raise InvalidConfig(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    S, N, T = SCENARIOS[name], 30, 3
    rng = np.random.default_rng([seed, 0x5CE])
    stragglers = sorted(int(i) for i in rng.choice(N, size=S, replace=False))
    colluders = sorted(int(i) for i in rng.choice(N, size=T, replace=False))
    return {
        "codec.n": str(N),
        "cluster.n": str(N),
        "codec.t": str(T),
        "codec.k": "4",
        "cluster.stragglers": ",".join(map(str, stragglers)),
        "cluster.colluders": ",".join(map(str, colluders)),
        "cluster.wait_policy": f"first_r({N - S})",
    }


@dataclass
class ExperimentConfig:
    values: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def load(cls, path=None, *, seed: int = 0, scenario: str | None = None,
             overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        explicit = {}
        if path is not None:
            explicit.update(parse_text(Path(path).read_text(), str(path)))
        if scenario:
            explicit.update(scenario_values(scenario, seed))
        for key, value in (overrides or {}).items():
            if key not in KNOWN_KEYS:
                raise InvalidConfig(f"unknown key {key!r}")
            explicit[key] = value
        n_codec, n_cluster = explicit.get("codec.n"), explicit.get("cluster.n")
        if n_codec is not None and n_cluster is not None and n_codec != n_cluster:
            raise InvalidConfig(f"codec.n = {n_codec} disagrees with cluster.n = {n_cluster}")
        n = n_codec or n_cluster or DEFAULT_N
        return cls({**DEFAULTS, **explicit, "codec.n": n, "cluster.n": n}, seed)

    def get(self, key: str, default=None) -> str | None:
        return self.values.get(key, default)

    def int(self, key: str) -> int:
        try:
            return int(self.values[key], 0)
        except (KeyError, ValueError):
            raise InvalidConfig(f"{key} must be an integer, got {self.values.get(key)!r}") from None

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except (KeyError, ValueError):
            raise InvalidConfig(f"{key} must be a number, got {self.values.get(key)!r}") from None

    def bool(self, key: str) -> bool:
        v = self.values.get(key, "").strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise InvalidConfig(f"{key} must be a boolean, got {v!r}")

    def list(self, key: str, kind=float) -> list:
        raw = self.values.get(key, "").strip().strip("[]")
        if not raw:
            return []
        try:
            return [kind(t) for t in raw.replace(" ", "").split(",") if t]
        except ValueError:
            raise InvalidConfig(f"{key}: cannot parse list {raw!r}") from None

    def section(self, name: str) -> dict[str, str]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def canonical(self) -> str:
        # output location does not affect results, so it stays out of the hash
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values) if k != "output.dir"]
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(f"{self.canonical()}\nseed = {self.seed}".encode()).hexdigest()[:16]

    def header(self) -> str:
        """Comment block embedded at the top of every emitted file."""
        return "\n".join(
            [f"spacdc config_hash={self.hash()} seed={self.seed}"]
            + [f"  {line}" for line in self.canonical().splitlines()]
        )
