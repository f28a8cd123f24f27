"""
Robust orientation and insphere predicates.

Every predicate first evaluates a floating-point determinant together with a
forward error bound. Only when the bound cannot certify the sign does it fall
back to exact arithmetic (Python integers for indexed point sets, ``Fraction``
for free-standing coordinates). Cospherical ties are broken by a symbolic
perturbation keyed on point index (a higher index carries the dominant lift).
"""

import math
from collections.abc import Sequence
from enum import Enum
from fractions import Fraction

import numpy as np

from acmesh_architect.core.errors import ErrorCode, MeshError

Point = Sequence[float]


def _machine_epsilon() -> float:
    epsilon = 1.0
    check = 1.0
    last = 1.0
    every_other = True
    while True:
        last = check
        if every_other:
            epsilon *= 0.5
        every_other = not every_other
        check = 1.0 + epsilon
        if check == 1.0 or check == last:
            break
    return epsilon


EPSILON = _machine_epsilon()
O3D_ERRBOUND = (7.0 + 56.0 * EPSILON) * EPSILON
ISP_ERRBOUND = (16.0 + 224.0 * EPSILON) * EPSILON


class Side(str, Enum):
    INSIDE = "INSIDE"
    OUTSIDE = "OUTSIDE"
    ON = "ON"


def _sign(x: float | int | Fraction) -> int:
    return (x > 0) - (x < 0)


# ==============================================================================
# DETERMINANTS
# ==============================================================================


def _det3(u: Sequence, v: Sequence, w: Sequence):  # type: ignore[no-untyped-def]
    return (
        u[0] * (v[1] * w[2] - v[2] * w[1])
        - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0])
    )


def _perm3(u: Sequence[float], v: Sequence[float], w: Sequence[float]) -> float:
    return (
        abs(u[0]) * (abs(v[1] * w[2]) + abs(v[2] * w[1]))
        + abs(u[1]) * (abs(v[0] * w[2]) + abs(v[2] * w[0]))
        + abs(u[2]) * (abs(v[0] * w[1]) + abs(v[1] * w[0]))
    )


def _sub(p: Sequence, q: Sequence) -> tuple:
    return (p[0] - q[0], p[1] - q[1], p[2] - q[2])


def _orient_value(a: Sequence, b: Sequence, c: Sequence, d: Sequence):  # type: ignore[no-untyped-def]
    return _det3(_sub(b, a), _sub(c, a), _sub(d, a))


def _insphere_value(a: Sequence, b: Sequence, c: Sequence, d: Sequence, e: Sequence):  # type: ignore[no-untyped-def]
    """det4 of rows (x - e, |x - e|^2); negative means inside for positive orientation."""
    ra, rb, rc, rd = _sub(a, e), _sub(b, e), _sub(c, e), _sub(d, e)
    la = ra[0] * ra[0] + ra[1] * ra[1] + ra[2] * ra[2]
    lb = rb[0] * rb[0] + rb[1] * rb[1] + rb[2] * rb[2]
    lc = rc[0] * rc[0] + rc[1] * rc[1] + rc[2] * rc[2]
    ld = rd[0] * rd[0] + rd[1] * rd[1] + rd[2] * rd[2]
    return -la * _det3(rb, rc, rd) + lb * _det3(ra, rc, rd) - lc * _det3(ra, rb, rd) + ld * _det3(ra, rb, rc)


def _orient_filter(a: Point, b: Point, c: Point, d: Point) -> int | None:
    u, v, w = _sub(b, a), _sub(c, a), _sub(d, a)
    det = _det3(u, v, w)
    bound = O3D_ERRBOUND * _perm3(u, v, w)
    if det > bound or -det > bound:
        return _sign(det)
    return None


def _insphere_filter(a: Point, b: Point, c: Point, d: Point, e: Point) -> int | None:
    ra, rb, rc, rd = _sub(a, e), _sub(b, e), _sub(c, e), _sub(d, e)
    la = ra[0] * ra[0] + ra[1] * ra[1] + ra[2] * ra[2]
    lb = rb[0] * rb[0] + rb[1] * rb[1] + rb[2] * rb[2]
    lc = rc[0] * rc[0] + rc[1] * rc[1] + rc[2] * rc[2]
    ld = rd[0] * rd[0] + rd[1] * rd[1] + rd[2] * rd[2]
    det = -la * _det3(rb, rc, rd) + lb * _det3(ra, rc, rd) - lc * _det3(ra, rb, rd) + ld * _det3(ra, rb, rc)
    permanent = (
        la * _perm3(rb, rc, rd) + lb * _perm3(ra, rc, rd) + lc * _perm3(ra, rb, rd) + ld * _perm3(ra, rb, rc)
    )
    bound = ISP_ERRBOUND * permanent
    if det > bound or -det > bound:
        return -_sign(det)
    return None


def _as_fractions(p: Point) -> tuple[Fraction, Fraction, Fraction]:
    return (Fraction(float(p[0])), Fraction(float(p[1])), Fraction(float(p[2])))


# ==============================================================================
# FREE-STANDING PREDICATES
# ==============================================================================


def orient3d(a: Point, b: Point, c: Point, d: Point) -> int:
    """Sign of det[b-a, c-a, d-a]: +1 when (a,b,c,d) is positively oriented."""
    sign = _orient_filter(a, b, c, d)
    if sign is not None:
        return sign
    return _sign(_orient_value(*(_as_fractions(p) for p in (a, b, c, d))))


def insphere_sign(a: Point, b: Point, c: Point, d: Point, e: Point) -> int:
    """+1 if e is strictly inside the circumsphere of positively oriented (a,b,c,d), -1 outside, 0 on."""
    sign = _insphere_filter(a, b, c, d, e)
    if sign is not None:
        return sign
    return -_sign(_insphere_value(*(_as_fractions(p) for p in (a, b, c, d, e))))


def insphere(a: Point, b: Point, c: Point, d: Point, p: Point) -> Side:
    """Exact insphere classification of p against the circumsphere of tet (a,b,c,d)."""
    orientation = orient3d(a, b, c, d)
    if orientation == 0:
        raise MeshError(ErrorCode.DEGENERATE_TET, "insphere base tetrahedron is flat")
    sign = insphere_sign(a, b, c, d, p) * orientation
    if sign > 0:
        return Side.INSIDE
    if sign < 0:
        return Side.OUTSIDE
    return Side.ON


# ==============================================================================
# INDEXED KERNEL
# ==============================================================================


class PredicateKernel:
    """
    Predicates over an indexed, growable point set.

    Exact fallbacks convert every coordinate to an integer multiple of a
    common power of two, so the exact path is plain integer arithmetic.
    """

    def __init__(self, points: np.ndarray | Sequence[Point] = ()) -> None:
        self.coords: list[tuple[float, float, float]] = []
        self._exponent: int | None = None
        self._ints: dict[int, tuple[int, int, int]] = {}
        self.exact_calls = 0
        for p in points:
            self.add_point(p)

    def __len__(self) -> int:
        return len(self.coords)

    def add_point(self, p: Point) -> int:
        xyz = (float(p[0]), float(p[1]), float(p[2]))
        if not all(math.isfinite(x) for x in xyz):
            raise MeshError(ErrorCode.DEGENERATE_INPUT, f"non-finite coordinate {xyz}")
        self.coords.append(xyz)
        for x in xyz:
            if x != 0.0:
                exp = math.frexp(x)[1] - 53
                if self._exponent is None or exp < self._exponent:
                    self._exponent = exp
                    self._ints.clear()
        return len(self.coords) - 1

    def _exact(self, i: int) -> tuple[int, int, int]:
        cached = self._ints.get(i)
        if cached is None:
            cached = tuple(self._to_int(x) for x in self.coords[i])  # type: ignore[assignment]
            self._ints[i] = cached  # type: ignore[assignment]
        return cached  # type: ignore[return-value]

    def _to_int(self, x: float) -> int:
        if x == 0.0:
            return 0
        m, exp = math.frexp(x)
        mantissa = int(m * (1 << 53))
        return mantissa << (exp - 53 - (self._exponent or 0))

    def orient(self, i: int, j: int, k: int, m: int) -> int:
        c = self.coords
        sign = _orient_filter(c[i], c[j], c[k], c[m])
        if sign is not None:
            return sign
        self.exact_calls += 1
        return _sign(_orient_value(self._exact(i), self._exact(j), self._exact(k), self._exact(m)))

    def insphere(self, i: int, j: int, k: int, m: int, q: int) -> int:
        c = self.coords
        sign = _insphere_filter(c[i], c[j], c[k], c[m], c[q])
        if sign is not None:
            return sign
        self.exact_calls += 1
        ints = [self._exact(n) for n in (i, j, k, m, q)]
        return -_sign(_insphere_value(*ints))

    def insphere_perturbed(self, tet: Sequence[int], q: int) -> int:
        """
        Insphere decision for positively oriented ``tet`` that never returns 0.

        Ties are resolved by lifting each point by an infinitesimal that grows
        with its index; the highest-index point whose term does not vanish decides.
        """
        sign = self.insphere(tet[0], tet[1], tet[2], tet[3], q)
        if sign != 0:
            return sign
        for vertex in sorted((*tet, q), reverse=True):
            if vertex == q:
                return -1
            pos = list(tet).index(vertex)
            swapped = list(tet)
            swapped[pos] = q
            o = self.orient(*swapped)
            if o != 0:
                return o
        return -1

    def pop_point(self) -> None:
        """Forget the most recently added point."""
        self._ints.pop(len(self.coords) - 1, None)
        self.coords.pop()

    def same_point(self, i: int, j: int) -> bool:
        return self.coords[i] == self.coords[j]
