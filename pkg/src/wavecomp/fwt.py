"""Multilevel fast wavelet transform with learnable filter banks.

Boundary handling is circular at every level, so each scale step is an
exact length-m to length-m/2 linear map and the whole transform of a
length-n signal is a square matrix (exposed by ``build_analysis_matrix``
for oracle tests).

Conventions, fixed once and used everywhere:

* Analysis convolves (true convolution) the running low-pass signal with
  h0/h1 and keeps even samples.  The autodiff kernel is cross-correlation,
  so analysis feeds it flipped filters on a circularly rolled input.
* Synthesis upsamples by two, convolves with f0/f1, sums the branches and
  rolls the result left by L-1 samples.  That roll cancels the group delay
  of a valid product filter (center tap at index L-1), making
  synthesize(analyze(x)) == x whenever pr_loss + ac_loss vanishes.
* Pyramids store detail vectors finest-first; the flattened layout is
  [approx, coarsest detail, ..., finest detail].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    cast,
    conv1d_strided,
    conv1d_transposed_strided,
    mul,
    narrow,
    permute_rows,
    reduce_sum,
    sub,
)
from .errors import ShapeError, ValidationError

SQRT2 = float(np.sqrt(2.0))


@dataclass
class FilterBank:
    """Analysis filters h0/h1 and synthesis filters f0/f1, all length L."""

    h0: Tensor
    h1: Tensor
    f0: Tensor
    f1: Tensor

    def __post_init__(self):
        lengths = {t.data.shape for t in self.tensors()}
        if len(lengths) != 1:
            raise ValidationError(f"filters must share one length, got {lengths}")
        L = self.h0.data.shape[0]
        if self.h0.data.ndim != 1 or L < 2 or L % 2:
            raise ValidationError(f"filter length must be even and >= 2, got {L}")

    @property
    def length(self) -> int:
        return self.h0.data.shape[0]

    def tensors(self):
        return (self.h0, self.h1, self.f0, self.f1)

    def named_tensors(self):
        return (("h0", self.h0), ("h1", self.h1), ("f0", self.f0), ("f1", self.f1))


@dataclass
class CoeffPyramid:
    """Wavelet coefficients: ``details[0]`` is the finest scale."""

    details: list
    approx: Tensor
    levels: int

    def lengths(self):
        return [d.data.shape[-1] for d in self.details], self.approx.data.shape[-1]


def init_filterbank(mode: str, L: int = 6, seed=None, dtype=np.float64) -> FilterBank:
    """Create a trainable filter bank.

    ``random_uniform`` draws all 4L taps i.i.d. from U(-1, 1);
    ``haar_padded`` centers the length-2 Haar pair in zero-padded
    length-L vectors (a valid product filter for any even L).
    """
    if L < 2 or L % 2:
        raise ValidationError(f"filter length must be even and >= 2, got {L}")
    if mode == "random_uniform":
        rng = np.random.default_rng(seed)
        taps = rng.uniform(-1.0, 1.0, size=(4, L)).astype(dtype)
        h0, h1, f0, f1 = taps
    elif mode == "haar_padded":
        a = 1.0 / SQRT2
        mid = L // 2 - 1
        h0 = np.zeros(L, dtype=dtype)
        h1 = np.zeros(L, dtype=dtype)
        f0 = np.zeros(L, dtype=dtype)
        f1 = np.zeros(L, dtype=dtype)
        h0[mid:mid + 2] = [a, a]
        h1[mid:mid + 2] = [a, -a]
        f0[mid:mid + 2] = [a, a]
        f1[mid:mid + 2] = [-a, a]
        if mid % 2:
            # keep the ac sign pattern aligned with even tap positions
            h1 *= -1.0
            f1 *= -1.0
    else:
        raise ValidationError(f"unknown filter init mode {mode!r}")
    return FilterBank(*(Tensor(v, requires_grad=True) for v in (h0, h1, f0, f1)))


def max_levels(n: int, L: int) -> int:
    """Deepest decomposition the circular scheme supports for length n."""
    floor = max(2, L - 2)
    j = 0
    m = n
    while m >= floor and m % 2 == 0:
        j += 1
        m //= 2
    return j


def suggested_levels(n: int, L: int, cap: int = 6) -> int:
    """Default depth: halve until the coarsest band drops below L, cap at 6.

    Returns 0 when the signal is too short for even a single level.
    """
    ml = max_levels(n, L)
    j = 0
    m = n
    while m // 2 >= L and j < cap:
        j += 1
        m //= 2
    return min(max(j, 1), ml)


def _require_pow2(n: int):
    if n < 2 or n & (n - 1):
        raise ValidationError(f"signal length must be a power of two, got {n}")


def _roll(x: Tensor, shift: int) -> Tensor:
    n = x.data.shape[-1]
    s = shift % n
    if s == 0:
        return x
    return concat([narrow(x, n - s, n), narrow(x, 0, n - s)])


def _flip(t: Tensor) -> Tensor:
    L = t.data.shape[0]
    return permute_rows(t, np.arange(L - 1, -1, -1))


def _analysis_level(x: Tensor, h0_flipped: Tensor, h1_flipped: Tensor, L: int):
    m = x.data.shape[-1]
    xr = _roll(x, L - 1)
    if L > 2:
        xr = concat([xr, narrow(xr, 0, L - 2)])
    lo = conv1d_strided(xr, h0_flipped, 2)
    hi = conv1d_strided(xr, h1_flipped, 2)
    return lo, hi


def _synthesis_level(lo: Tensor, hi: Tensor, f0: Tensor, f1: Tensor, L: int) -> Tensor:
    m = 2 * lo.data.shape[-1]
    u = add(conv1d_transposed_strided(lo, f0, 2),
            conv1d_transposed_strided(hi, f1, 2))
    if L > 2:
        head = add(narrow(u, 0, L - 2), narrow(u, m, m + L - 2))
        u = concat([head, narrow(u, L - 2, m)])
    return _roll(u, -(L - 1))


def analyze(x: Tensor, fb: FilterBank, levels: int | None = None) -> CoeffPyramid:
    """Recursive strided filtering of x into a coefficient pyramid."""
    n = x.data.shape[-1]
    _require_pow2(n)
    L = fb.length
    if levels is None:
        levels = suggested_levels(n, L)
    if levels < 1:
        raise ValidationError(f"levels must be >= 1, got {levels}")
    if levels > max_levels(n, L):
        raise ValidationError(
            f"{levels} levels unsupported for n={n}, L={L} "
            f"(max {max_levels(n, L)})"
        )
    h0f = _flip(fb.h0)
    h1f = _flip(fb.h1)
    details = []
    lo = x
    for _ in range(levels):
        lo, hi = _analysis_level(lo, h0f, h1f, L)
        details.append(hi)
    return CoeffPyramid(details=details, approx=lo, levels=levels)


def synthesize(p: CoeffPyramid, fb: FilterBank) -> Tensor:
    """Invert ``analyze``; exact whenever the bank is a valid product filter."""
    if len(p.details) != p.levels:
        raise ShapeError(f"pyramid lists {len(p.details)} details for {p.levels} levels")
    L = fb.length
    x = p.approx
    for hi in reversed(p.details):
        if hi.data.shape[-1] != x.data.shape[-1]:
            raise ShapeError(
                f"detail length {hi.data.shape[-1]} does not match "
                f"running approx length {x.data.shape[-1]}"
            )
        x = _synthesis_level(x, hi, fb.f0, fb.f1, L)
    return x


def flatten_pyramid(p: CoeffPyramid) -> Tensor:
    """[approx, coarsest detail, ..., finest detail] along the last axis."""
    return concat([p.approx] + list(reversed(p.details)))


def unflatten_pyramid(flat: Tensor, n: int, levels: int) -> CoeffPyramid:
    if flat.data.shape[-1] != n:
        raise ShapeError(f"flat length {flat.data.shape[-1]} != n {n}")
    coarsest = n >> levels
    approx = narrow(flat, 0, coarsest)
    details = []
    offset = coarsest
    length = coarsest
    for _ in range(levels):
        details.append(narrow(flat, offset, offset + length))
        offset += length
        length *= 2
    return CoeffPyramid(details=list(reversed(details)), approx=approx, levels=levels)


# -- wavelet loss --------------------------------------------------------------


def _full_conv(a: Tensor, b: Tensor) -> Tensor:
    # polynomial product of the tap sequences
    return conv1d_transposed_strided(a, b, 1)


def _to64(t: Tensor) -> Tensor:
    return t if t.data.dtype == np.float64 else cast(t, np.float64)


def pr_loss(fb: FilterBank) -> Tensor:
    """Squared deviation of h0*f0 + h1*f1 from the ideal impulse 2·δ[L-1]."""
    L = fb.length
    target = np.zeros(2 * L - 1)
    target[L - 1] = 2.0
    prod = add(_full_conv(_to64(fb.h0), _to64(fb.f0)),
               _full_conv(_to64(fb.h1), _to64(fb.f1)))
    d = sub(prod, Tensor(target))
    return reduce_sum(mul(d, d))


def ac_loss(fb: FilterBank) -> Tensor:
    """Squared deviation from the alternating-sign alias cancellation pattern."""
    L = fb.length
    alt = Tensor(np.where(np.arange(L) % 2 == 0, 1.0, -1.0))
    a0 = sub(_to64(fb.f0), mul(_to64(fb.h1), alt))
    a1 = add(_to64(fb.f1), mul(_to64(fb.h0), alt))
    return add(reduce_sum(mul(a0, a0)), reduce_sum(mul(a1, a1)))


def wavelet_loss(fbs) -> Tensor:
    """Sum of pr_loss + ac_loss over the given banks (unit weights)."""
    total = Tensor(np.asarray(0.0))
    for fb in fbs:
        total = add(total, add(pr_loss(fb), ac_loss(fb)))
    return total


# -- dense-matrix oracles ------------------------------------------------------


def build_analysis_matrix(fb: FilterBank, n: int, levels: int | None = None) -> np.ndarray:
    """Explicit matrix A with A @ x == flatten(analyze(x)); test oracle."""
    _require_pow2(n)
    basis = Tensor(np.eye(n))
    flat = flatten_pyramid(analyze(basis, fb, levels))
    return flat.data.T.copy()


def build_synthesis_matrix(fb: FilterBank, n: int, levels: int | None = None) -> np.ndarray:
    """Explicit matrix S with S @ b == synthesize(unflatten(b)); test oracle."""
    _require_pow2(n)
    if levels is None:
        levels = suggested_levels(n, fb.length)
    basis = unflatten_pyramid(Tensor(np.eye(n)), n, levels)
    return synthesize(basis, fb).data.T.copy()


# -- plain-text serialization ---------------------------------------------------


def filterbank_to_text(fb: FilterBank) -> str:
    lines = [" ".join(format(v, ".17g") for v in t.data) for t in fb.tensors()]
    return "\n".join(lines) + "\n"


def filterbank_from_text(text: str, trainable: bool = True) -> FilterBank:
    rows = [line.split() for line in text.strip().splitlines()]
    if len(rows) != 4 or len({len(r) for r in rows}) != 1:
        raise ValidationError("filter bank text needs 4 equal-length lines (h0 h1 f0 f1)")
    arrays = [np.array([float(v) for v in row]) for row in rows]
    return FilterBank(*(Tensor(a, requires_grad=trainable) for a in arrays))
