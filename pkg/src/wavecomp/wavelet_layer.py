"""Structured linear layer: W = D · FWT⁻¹ · G · Π · FWT · B.

Replaces a dense n×n matrix (n a power of two) with three trainable
diagonals, a fixed random permutation of the flattened coefficient
vector, and one trainable filter bank: 3n + 4L parameters in total.
Rectangular maps are built from square tiles that share a single
(tied) filter bank.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, diag_scale, mul, narrow, permute_rows, validate_permutation
from .errors import ShapeError, ValidationError
from . import fwt


def _next_pow2(m: int) -> int:
    n = 1
    while n < m:
        n *= 2
    return n


class WaveletLayer:
    """Square wavelet-reparameterized linear map on width-n inputs."""

    def __init__(self, n: int, fb: fwt.FilterBank, perm, levels: int,
                 dropout_p: float = 0.0, dtype=np.float64):
        if n < 2 or n & (n - 1):
            raise ValidationError(f"layer size must be a power of two, got {n}")
        if not 0.0 <= dropout_p < 1.0:
            raise ValidationError(f"dropout_p must be in [0, 1), got {dropout_p}")
        if not 1 <= levels <= fwt.max_levels(n, fb.length):
            raise ValidationError(
                f"levels={levels} invalid for n={n}, L={fb.length}"
            )
        self.n = n
        self.fb = fb
        self.perm = validate_permutation(perm, n)
        self.levels = levels
        self.dropout_p = float(dropout_p)
        ones = np.ones(n, dtype=dtype)
        self.d = Tensor(ones.copy(), requires_grad=True)
        self.g = Tensor(ones.copy(), requires_grad=True)
        self.b = Tensor(ones.copy(), requires_grad=True)

    @classmethod
    def identity(cls, n: int) -> "WaveletLayer":
        """Test mode: unit diagonals, identity permutation, Haar filters."""
        fb = fwt.init_filterbank("haar_padded", L=2)
        return cls(n, fb, np.arange(n), levels=fwt.suggested_levels(n, 2))

    def named_parameters(self, prefix: str = ""):
        params = [("d", self.d), ("g", self.g), ("b", self.b)]
        params += list(self.fb.named_tensors())
        return [(prefix + name, t) for name, t in params]

    def param_count(self) -> int:
        return 3 * self.n + 4 * self.fb.length

    def forward(self, x: Tensor, training: bool = False, dropout_rng=None) -> Tensor:
        if x.data.shape[-1] != self.n:
            raise ShapeError(f"input width {x.data.shape[-1]} != layer size {self.n}")
        d, g, b = self.d, self.g, self.b
        if training and self.dropout_p > 0.0:
            if dropout_rng is None:
                raise ValidationError("training with dropout requires a dropout_rng")
            keep = 1.0 - self.dropout_p
            d = mul(d, Tensor((dropout_rng.random(self.n) < keep) / keep))
            g = mul(g, Tensor((dropout_rng.random(self.n) < keep) / keep))
            b = mul(b, Tensor((dropout_rng.random(self.n) < keep) / keep))
        y = diag_scale(x, b)
        flat = fwt.flatten_pyramid(fwt.analyze(y, self.fb, self.levels))
        mixed = diag_scale(permute_rows(flat, self.perm), g)
        pyr = fwt.unflatten_pyramid(mixed, self.n, self.levels)
        return diag_scale(fwt.synthesize(pyr, self.fb), d)

    __call__ = forward

    def dense_equivalent(self) -> np.ndarray:
        """Explicit n×n matrix D·S·G·Π·A·B acting on column vectors; oracle."""
        A = fwt.build_analysis_matrix(self.fb, self.n, self.levels)
        S = fwt.build_synthesis_matrix(self.fb, self.n, self.levels)
        P = np.eye(self.n)[self.perm]
        return (np.diag(self.d.data) @ S @ np.diag(self.g.data)
                @ P @ A @ np.diag(self.b.data))


def init_layer(n: int, filter_init: str = "random_uniform", L: int = 6,
               seed=None, dropout_p: float = 0.0, levels: int | None = None,
               dtype=np.float64) -> WaveletLayer:
    """Fresh layer: unit diagonals, seeded random permutation, seeded filters."""
    if n < 2 or n & (n - 1):
        raise ValidationError(f"layer size must be a power of two, got {n}")
    rng = np.random.default_rng(seed)
    fb = fwt.init_filterbank(filter_init, L=L, seed=rng.integers(2**63), dtype=dtype)
    perm = rng.permutation(n)
    if levels is None:
        levels = fwt.suggested_levels(n, L)
    return WaveletLayer(n, fb, perm, levels, dropout_p=dropout_p, dtype=dtype)


def forward_rect(x: Tensor, tiles, out_dim: int, training: bool = False,
                 dropout_rng=None) -> Tensor:
    """Non-square map: zero-pad input, apply tied square tiles, concat, truncate."""
    if not tiles:
        raise ValidationError("forward_rect needs at least one tile")
    n = tiles[0].n
    if any(t.n != n for t in tiles):
        raise ValidationError("all tiles must share the same size")
    if any(t.fb is not tiles[0].fb for t in tiles):
        raise ValidationError("tiles must share one tied filter bank")
    if out_dim > len(tiles) * n:
        raise ValidationError(f"out_dim {out_dim} exceeds tiles*n = {len(tiles) * n}")
    m = x.data.shape[-1]
    if m > n:
        raise ShapeError(f"input width {m} exceeds tile size {n}")
    if m < n:
        pad_shape = x.data.shape[:-1] + (n - m,)
        x = concat([x, Tensor(np.zeros(pad_shape, dtype=x.data.dtype))])
    outs = [t.forward(x, training=training, dropout_rng=dropout_rng) for t in tiles]
    y = outs[0] if len(outs) == 1 else concat(outs)
    if out_dim < y.data.shape[-1]:
        y = narrow(y, 0, out_dim)
    return y


def init_rect_tiles(in_dim: int, out_dim: int, filter_init: str = "random_uniform",
                    L: int = 6, seed=None, dropout_p: float = 0.0,
                    dtype=np.float64) -> list:
    """Tiles covering an in_dim → out_dim map with one shared filter bank."""
    n = _next_pow2(max(in_dim, 2))
    count = -(-out_dim // n)
    rng = np.random.default_rng(seed)
    fb = fwt.init_filterbank(filter_init, L=L, seed=rng.integers(2**63), dtype=dtype)
    levels = fwt.suggested_levels(n, L)
    return [WaveletLayer(n, fb, rng.permutation(n), levels,
                         dropout_p=dropout_p, dtype=dtype)
            for _ in range(count)]


# -- checkpoint text format ------------------------------------------------------


def layer_to_text(layer: WaveletLayer) -> str:
    """Header, permutation, filter bank, then the three diagonals."""
    lines = [f"{layer.n} {layer.fb.length} {layer.levels} {layer.dropout_p:.17g}"]
    lines.append(" ".join(str(i) for i in layer.perm))
    lines.append(fwt.filterbank_to_text(layer.fb).rstrip("\n"))
    for t in (layer.d, layer.g, layer.b):
        lines.append(" ".join(format(v, ".17g") for v in t.data))
    return "\n".join(lines) + "\n"


def layer_from_text(text: str) -> WaveletLayer:
    lines = text.strip().splitlines()
    if len(lines) != 9:
        raise ValidationError(f"layer checkpoint needs 9 lines, got {len(lines)}")
    n_s, L_s, levels_s, dropout_s = lines[0].split()
    n, levels = int(n_s), int(levels_s)
    perm = np.array([int(v) for v in lines[1].split()])
    fb = fwt.filterbank_from_text("\n".join(lines[2:6]))
    if fb.length != int(L_s):
        raise ValidationError("filter length disagrees with checkpoint header")
    layer = WaveletLayer(n, fb, perm, levels, dropout_p=float(dropout_s))
    for t, line in zip((layer.d, layer.g, layer.b), lines[6:9]):
        vals = np.array([float(v) for v in line.split()])
        if vals.shape != (n,):
            raise ValidationError("diagonal length disagrees with checkpoint header")
        t.data = vals
    return layer
