"""Short-Weierstrass curve arithmetic and the additive matrix cipher.

Curves are ``y^2 = x^3 + a x + b (mod q)``.  Points are affine
:class:`CurvePoint` values; :data:`INFINITY` is the group identity.

The matrix cipher works on the fixed-point view of a matrix: for a fresh
ephemeral scalar ``k`` the ciphertext is ``(k*G, M + X(k*pk) mod q)`` where
``X(P)`` is the x-coordinate of ``P`` added to every entry.  The recipient
removes the same mask using ``sk * (k*G)``.  There is no authentication: a
wrong key silently yields garbage.
"""

from __future__ import annotations

import random
import secrets
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

try:
    from gmpy2 import mpz as _mpz
except ImportError:  # pure-int fallback, roughly 2x slower
    _mpz = int
from .realmat import QuantizedMatrix

__all__ = [
    "CurveParams",
    "CurvePoint",
    "INFINITY",
    "KeyPair",
    "CipherMatrix",
    "TOY_CURVE",
    "P256",
    "SECP256K1",
    "PROFILES",
    "curve_from_config",
    "is_on_curve",
    "point_neg",
    "point_add",
    "scalar_mul",
    "precompute",
    "keygen",
    "derive_shared",
    "mea_encrypt",
    "mea_decrypt",
    "random_ephemeral",
    "serialize_cipher",
    "deserialize_cipher",
]


@dataclass(frozen=True)
class CurvePoint:
    x: int | None
    y: int | None

    @property
    def is_infinity(self) -> bool:
        return self.x is None

    def __repr__(self):
        return "INFINITY" if self.is_infinity else f"CurvePoint({self.x}, {self.y})"


INFINITY = CurvePoint(None, None)


@dataclass(frozen=True)
class CurveParams:
    q: int
    a: int
    b: int
    G: CurvePoint
    n: int | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.q < 3:
            raise ValueError(f"modulus must be an odd prime, got {self.q}")
        if (4 * self.a ** 3 + 27 * self.b ** 2) % self.q == 0:
            raise ValueError("singular curve: 4a^3 + 27b^2 = 0 mod q")
        if self.G.is_infinity or not is_on_curve(self.G, self):
            raise ValueError(f"generator {self.G} is not on the curve")

    @property
    def key_bound(self) -> int:
        return self.n if self.n is not None else self.q


def curve_from_config(values: dict) -> CurveParams:
    """Build a curve from ``curve.*`` keys (``q a b gx gy`` and optional ``n``)."""
    if "profile" in values and not ({"q", "a", "b", "gx", "gy"} & values.keys()):
        try:
            return PROFILES[values["profile"]]
        except KeyError:
            raise ValueError(f"unknown curve profile {values['profile']!r}") from None
    missing = {"q", "a", "b", "gx", "gy"} - values.keys()
    if missing:
        raise ValueError(f"curve config missing {sorted(missing)}")
    n = values.get("n")
    return CurveParams(
        q=_as_int(values["q"]),
        a=_as_int(values["a"]),
        b=_as_int(values["b"]),
        G=CurvePoint(_as_int(values["gx"]), _as_int(values["gy"])),
        n=None if n is None else _as_int(n),
    )


def _as_int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def is_on_curve(P: CurvePoint, curve: CurveParams) -> bool:
    if P.is_infinity:
        return True
    q = curve.q
    if not (0 <= P.x < q and 0 <= P.y < q):
        return False
    return (P.y * P.y - (P.x ** 3 + curve.a * P.x + curve.b)) % q == 0


def _require_on_curve(P: CurvePoint, curve: CurveParams) -> None:
    if not is_on_curve(P, curve):
        raise ValueError(f"{P} is not on curve {curve.name}")


TOY_CURVE = CurveParams(q=17, a=2, b=2, G=CurvePoint(5, 1), n=19, name="toy")

P256 = CurveParams(
    q=0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF,
    a=0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFC,
    b=0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B,
    G=CurvePoint(
        0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296,
        0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5,
    ),
    n=0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
    name="p256",
)

SECP256K1 = CurveParams(
    q=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F,
    a=0,
    b=7,
    G=CurvePoint(
        0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
        0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
    ),
    n=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141,
    name="secp256k1",
)

PROFILES = {c.name: c for c in (TOY_CURVE, P256, SECP256K1)}


def point_neg(P: CurvePoint, curve: CurveParams) -> CurvePoint:
    if P.is_infinity:
        return P
    return CurvePoint(P.x, (-P.y) % curve.q)


def _affine_add(P: CurvePoint, Q: CurvePoint, curve: CurveParams) -> CurvePoint:
    if P.is_infinity:
        return Q
    if Q.is_infinity:
        return P
    q = curve.q
    if P.x == Q.x:
        if (P.y + Q.y) % q == 0:
            return INFINITY
        lam = (3 * P.x * P.x + curve.a) * pow(2 * P.y, -1, q) % q
    else:
        lam = (Q.y - P.y) * pow(Q.x - P.x, -1, q) % q
    x3 = (lam * lam - P.x - Q.x) % q
    y3 = (lam * (P.x - x3) - P.y) % q
    return CurvePoint(x3, y3)


def point_add(P: CurvePoint, Q: CurvePoint, curve: CurveParams) -> CurvePoint:
    """Group law, including the doubling and inverse cases."""
    _require_on_curve(P, curve)
    _require_on_curve(Q, curve)
    return _affine_add(P, Q, curve)


# Jacobian coordinates (X, Y, Z) <-> affine (X/Z^2, Y/Z^3); Z == 0 is infinity.
# Used only inside scalar_mul to avoid one field inversion per step.

def _jac_double(X, Y, Z, a, q):
    if Z == 0 or Y == 0:
        return 0, 1, 0
    YY = Y * Y % q
    S = 4 * X * YY % q
    ZZ = Z * Z % q
    M = (3 * X * X + a * ZZ * ZZ) % q
    X3 = (M * M - 2 * S) % q
    Y3 = (M * (S - X3) - 8 * YY * YY) % q
    Z3 = 2 * Y * Z % q
    return X3, Y3, Z3


def _jac_add_affine(X1, Y1, Z1, x2, y2, a, q):
    # mixed addition: second operand is affine (Z2 = 1)
    if Z1 == 0:
        return x2, y2, 1
    Z1Z1 = Z1 * Z1 % q
    U2 = x2 * Z1Z1 % q
    S2 = y2 * Z1 * Z1Z1 % q
    H = (U2 - X1) % q
    r = (S2 - Y1) % q
    if H == 0:
        if r == 0:
            return _jac_double(X1, Y1, Z1, a, q)
        return 0, 1, 0
    HH = H * H % q
    HHH = H * HH % q
    V = X1 * HH % q
    X3 = (r * r - HHH - 2 * V) % q
    Y3 = (r * (V - X3) - Y1 * HHH) % q
    Z3 = Z1 * H % q
    return X3, Y3, Z3


def _to_affine(X, Y, Z, q) -> CurvePoint:
    if Z == 0:
        return INFINITY
    zinv = pow(Z, -1, q)
    zinv2 = zinv * zinv % q
    return CurvePoint(int(X * zinv2 % q), int(Y * zinv2 * zinv % q))


# fixed-base tables of 2^j * P, keyed by (curve, point)
_TABLES: dict = {}
_MAX_TABLES = 1024


def _build_table(P: CurvePoint, curve: CurveParams) -> tuple:
    table = []
    for _ in range(max(curve.q, curve.key_bound).bit_length() + 1):
        table.append((_mpz(P.x), _mpz(P.y)) if not P.is_infinity else None)
        P = _affine_add(P, P, curve)
    return tuple(table)


def precompute(P: CurvePoint, curve: CurveParams) -> None:
    """Cache a doubling table for ``P`` so later ``i * P`` needs no doublings.

    Worth it for points multiplied many times (generator, long-lived public
    keys).  The generator is always precomputed on first use.
    """
    _require_on_curve(P, curve)
    if P.is_infinity or (curve, P) in _TABLES:
        return
    if len(_TABLES) >= _MAX_TABLES:
        _TABLES.clear()
    _TABLES[(curve, P)] = _build_table(P, curve)


def _fixed_base_mul(i: int, table: tuple, curve: CurveParams) -> CurvePoint | None:
    if i.bit_length() > len(table):
        return None
    q, a = _mpz(curve.q), _mpz(curve.a)
    X, Y, Z = _mpz(0), _mpz(1), _mpz(0)
    j = 0
    while i:
        if i & 1 and table[j] is not None:
            X, Y, Z = _jac_add_affine(X, Y, Z, table[j][0], table[j][1], a, q)
        i >>= 1
        j += 1
    return _to_affine(X, Y, Z, q)


_WINDOW = 4


def _window_mul(i: int, Q: CurvePoint, curve: CurveParams) -> CurvePoint:
    # fixed 4-bit windows: 1..15 * Q in affine, then 4 doublings + 1 add per window
    q, a = _mpz(curve.q), _mpz(curve.a)
    small = [INFINITY, Q]
    for _ in range(2, 1 << _WINDOW):
        small.append(_affine_add(small[-1], Q, curve))
    small = [None if P.is_infinity else (_mpz(P.x), _mpz(P.y)) for P in small]
    X, Y, Z = _mpz(0), _mpz(1), _mpz(0)
    nwin = (i.bit_length() + _WINDOW - 1) // _WINDOW
    for w in range(nwin - 1, -1, -1):
        for _ in range(_WINDOW):
            X, Y, Z = _jac_double(X, Y, Z, a, q)
        d = (i >> (w * _WINDOW)) & ((1 << _WINDOW) - 1)
        if d and small[d] is not None:
            X, Y, Z = _jac_add_affine(X, Y, Z, small[d][0], small[d][1], a, q)
    return _to_affine(X, Y, Z, q)


def scalar_mul(i: int, Q: CurvePoint, curve: CurveParams) -> CurvePoint:
    """``i * Q`` in O(log i) group operations.

    Uses a cached doubling table when ``Q`` was registered with
    :func:`precompute` (or is the generator), otherwise a 4-bit fixed-window
    double-and-add.
    """
    if i < 0:
        raise ValueError(f"scalar must be >= 0, got {i}")
    _require_on_curve(Q, curve)
    if i == 0 or Q.is_infinity:
        return INFINITY
    if Q == curve.G:
        precompute(Q, curve)
    table = _TABLES.get((curve, Q))
    if table is not None:
        P = _fixed_base_mul(i, table, curve)
        if P is not None:
            return P
    return _window_mul(i, Q, curve)


def _naive_mul(i: int, Q: CurvePoint, curve: CurveParams) -> CurvePoint:
    # reference: plain affine double-and-add, one inversion per step
    R, P = INFINITY, Q
    while i:
        if i & 1:
            R = _affine_add(R, P, curve)
        P = _affine_add(P, P, curve)
        i >>= 1
    return R


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: CurvePoint


def _rng(rng_seed) -> random.Random:
    if isinstance(rng_seed, random.Random):
        return rng_seed
    return random.Random(secrets.randbits(128) if rng_seed is None else rng_seed)


def keygen(curve: CurveParams, rng_seed=None) -> KeyPair:
    """Secret key uniform in ``[1, n)`` (``[1, q)`` when ``n`` is unknown).

    ``rng_seed`` may be an int, a :class:`random.Random`, or None for OS
    entropy.  Seeded generation is for reproducible simulation only.
    """
    rng = _rng(rng_seed)
    sk = rng.randrange(1, curve.key_bound)
    return KeyPair(sk, scalar_mul(sk, curve.G, curve))


def derive_shared(sk_own: int, pk_peer: CurvePoint, curve: CurveParams) -> CurvePoint:
    _require_on_curve(pk_peer, curve)
    shared = scalar_mul(sk_own, pk_peer, curve)
    if shared.is_infinity:
        raise ProtocolError("shared point is the point at infinity (degenerate peer key)")
    return shared


@dataclass(frozen=True, eq=False)
class CipherMatrix:
    ephemeral: CurvePoint
    masked: QuantizedMatrix

    @property
    def scale_bits(self) -> int:
        return self.masked.scale_bits

    @property
    def shape(self) -> tuple[int, int]:
        return self.masked.shape

    def __eq__(self, other):
        if not isinstance(other, CipherMatrix):
            return NotImplemented
        return self.ephemeral == other.ephemeral and self.masked == other.masked

    __hash__ = None


def random_ephemeral(curve: CurveParams, rng) -> int:
    """Ephemeral scalar ``k`` uniform in ``[2, q)``; never reuse across messages."""
    return _rng(rng).randrange(2, curve.q)


def mea_encrypt(M: QuantizedMatrix, pk_recipient: CurvePoint, k: int,
                curve: CurveParams) -> CipherMatrix:
    q = curve.q
    if not 1 < k < q:
        raise ValueError(f"ephemeral k must satisfy 1 < k < q, got {k}")
    shared = scalar_mul(k, pk_recipient, curve)
    if shared.is_infinity:
        raise ProtocolError("k * pk is the point at infinity")
    ephemeral = scalar_mul(k, curve.G, curve)
    if ephemeral.is_infinity:
        raise ProtocolError("k * G is the point at infinity")
    mask = shared.x
    masked = np.empty(M.entries.shape, dtype=object)
    masked.flat[:] = [(int(e) + mask) % q for e in M.entries.flat]
    return CipherMatrix(ephemeral, QuantizedMatrix(masked, M.scale_bits))


def mea_decrypt(C: CipherMatrix, sk_recipient: int, curve: CurveParams) -> QuantizedMatrix:
    """Remove the mask and re-centre entries into ``(-q/2, q/2]``."""
    if C.ephemeral.is_infinity:
        raise ProtocolError("ciphertext has an ephemeral point at infinity")
    q = curve.q
    mask = scalar_mul(sk_recipient, C.ephemeral, curve).x
    if mask is None:
        raise ProtocolError("sk * ephemeral is the point at infinity")
    half = q // 2
    out = []
    for e in C.masked.entries.flat:
        v = (int(e) - mask) % q
        out.append(v - q if v > half else v)
    entries = np.empty(C.masked.entries.shape, dtype=object)
    entries.flat[:] = out
    return QuantizedMatrix(entries, C.masked.scale_bits)


def _put(buf: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("wire fields are unsigned")
    raw = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    buf += struct.pack(">I", len(raw)) + raw


def serialize_cipher(C: CipherMatrix) -> bytes:
    """Length-prefixed big-endian fields.

    Layout: ``x, y, scale_bits, rows, cols, e_0 ... e_{rows*cols-1}`` with
    masked entries in row-major order.  Each field is a 4-byte big-endian
    length followed by the unsigned big-endian integer.
    """
    buf = bytearray()
    for v in (C.ephemeral.x, C.ephemeral.y, C.scale_bits, C.shape[0], C.shape[1]):
        _put(buf, int(v))
    for e in C.masked.entries.flat:
        _put(buf, int(e))
    return bytes(buf)


def deserialize_cipher(data: bytes) -> CipherMatrix:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ProtocolError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ProtocolError("truncated field")
        fields.append(int.from_bytes(data[pos:pos + n], "big"))
        pos += n
    if len(fields) < 5:
        raise ProtocolError("ciphertext header incomplete")
    x, y, s, rows, cols = fields[:5]
    body = fields[5:]
    if len(body) != rows * cols:
        raise ProtocolError(f"expected {rows * cols} entries, found {len(body)}")
    entries = np.empty(len(body), dtype=object)
    entries[:] = body
    return CipherMatrix(CurvePoint(x, y), QuantizedMatrix(entries.reshape(rows, cols), s))
