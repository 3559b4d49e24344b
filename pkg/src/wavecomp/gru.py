"""GRU cell whose recurrent state/reset/update maps can each be a dense
matrix or a wavelet-reparameterized layer (Wave-GRU).

Batch rows are row vectors, so a dense recurrent map stores the transpose
of the textbook column-vector matrix and applies it as ``h @ W``.  Input
projections are never compressed; only the three n_h×n_h recurrent maps
are eligible.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    narrow,
    sigmoid,
    sub,
    tanh,
)
from .errors import ShapeError, ValidationError
from .wavelet_layer import WaveletLayer, init_layer

GATES = ("state", "reset", "update")


class GRU:
    """Gated recurrent unit with an optional dense readout head."""

    def __init__(self, n_h: int, n_in: int, n_out: int, compressed=(),
                 filter_init: str = "random_uniform", L: int = 6, seed=None,
                 dtype=np.float64):
        compressed = tuple(compressed)
        unknown = set(compressed) - set(GATES)
        if unknown:
            raise ValidationError(f"unknown recurrent maps {sorted(unknown)}; "
                                  f"choose from {GATES}")
        if compressed and (n_h < 2 or n_h & (n_h - 1)):
            raise ValidationError(
                f"hidden size must be a power of two to compress, got {n_h}")
        self.n_h, self.n_in, self.n_out = n_h, n_in, n_out
        self.compressed = compressed
        self.filter_init = filter_init
        self.L = L
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(n_h)

        def dense(rows, cols):
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype),
                          requires_grad=True)

        self.maps = {}
        for gate in GATES:
            if gate in compressed:
                self.maps[gate] = init_layer(n_h, filter_init, L=L,
                                             seed=rng.integers(2**63), dtype=dtype)
            else:
                self.maps[gate] = dense(n_h, n_h)
        self.V = dense(n_in, n_h)
        self.V_r = dense(n_in, n_h)
        self.V_z = dense(n_in, n_h)
        zeros = np.zeros(n_h, dtype=dtype)
        self.b = Tensor(zeros.copy(), requires_grad=True)
        self.b_r = Tensor(zeros.copy(), requires_grad=True)
        self.b_z = Tensor(zeros.copy(), requires_grad=True)
        self.W_out = dense(n_h, n_out)
        self.b_out = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        params = []
        for gate in GATES:
            m = self.maps[gate]
            if isinstance(m, WaveletLayer):
                params += m.named_parameters(prefix=f"{gate}.")
            else:
                params.append((f"W_{gate}", m))
        params += [("V", self.V), ("V_r", self.V_r), ("V_z", self.V_z),
                   ("b", self.b), ("b_r", self.b_r), ("b_z", self.b_z),
                   ("W_out", self.W_out), ("b_out", self.b_out)]
        return params

    def filter_banks(self):
        banks = []
        for gate in GATES:
            m = self.maps[gate]
            if isinstance(m, WaveletLayer) and all(b is not m.fb for b in banks):
                banks.append(m.fb)
        return banks

    def count_params(self) -> int:
        total = 0
        for gate in GATES:
            m = self.maps[gate]
            total += m.param_count() if isinstance(m, WaveletLayer) else self.n_h ** 2
        total += 3 * self.n_h * self.n_in
        total += 3 * self.n_h
        total += self.n_h * self.n_out + self.n_out
        return total

    # -- forward ------------------------------------------------------------

    def _apply_map(self, gate: str, h: Tensor) -> Tensor:
        m = self.maps[gate]
        return m.forward(h) if isinstance(m, WaveletLayer) else matmul(h, m)

    def step(self, h: Tensor, x_t: Tensor, xproj=None) -> Tensor:
        """One update h_{t-1} -> h_t; xproj carries precomputed input terms."""
        if h.data.shape[-1] != self.n_h:
            raise ShapeError(f"hidden width {h.data.shape[-1]} != n_h {self.n_h}")
        if xproj is None:
            if x_t.data.shape[-1] != self.n_in:
                raise ShapeError(f"input width {x_t.data.shape[-1]} != n_in {self.n_in}")
            xproj = (add(matmul(x_t, self.V), self.b),
                     add(matmul(x_t, self.V_r), self.b_r),
                     add(matmul(x_t, self.V_z), self.b_z))
        px, pr, pz = xproj
        g_r = sigmoid(add(self._apply_map("reset", h), pr))
        g_z = sigmoid(add(self._apply_map("update", h), pz))
        z_t = add(self._apply_map("state", mul(g_r, h)), px)
        return add(h, mul(g_z, sub(tanh(z_t), h)))

    def readout(self, h: Tensor) -> Tensor:
        return add(matmul(h, self.W_out), self.b_out)

    def unroll(self, x_seq: np.ndarray, per_step: bool, h0: Tensor | None = None):
        """Run the cell over [batch, T, n_in] inputs.

        Returns readout logits: per_step stacks every step's readout
        step-major into a [(T*batch), n_out] tensor, otherwise only the
        final step is read out as [batch, n_out].
        """
        x_seq = np.asarray(x_seq, dtype=self.dtype)
        if x_seq.ndim != 3 or x_seq.shape[2] != self.n_in:
            raise ShapeError(f"expected [batch, T, {self.n_in}] inputs, "
                             f"got {x_seq.shape}")
        batch, T, _ = x_seq.shape
        # one matmul per input weight for the entire sequence
        flat = Tensor(np.ascontiguousarray(x_seq.transpose(1, 0, 2))
                      .reshape(T * batch, self.n_in))
        px_all = add(matmul(flat, self.V), self.b)
        pr_all = add(matmul(flat, self.V_r), self.b_r)
        pz_all = add(matmul(flat, self.V_z), self.b_z)
        h = h0 if h0 is not None else Tensor(np.zeros((batch, self.n_h), dtype=self.dtype))
        outs = []
        for t in range(T):
            lo, hi = t * batch, (t + 1) * batch
            xproj = (narrow(px_all, lo, hi, axis=0),
                     narrow(pr_all, lo, hi, axis=0),
                     narrow(pz_all, lo, hi, axis=0))
            h = self.step(h, None, xproj=xproj)
            if per_step:
                outs.append(h)
        if per_step:
            stacked = concat(outs, axis=0) if len(outs) > 1 else outs[0]
            return self.readout(stacked)
        return self.readout(h)


def gru_step(model: GRU, h_prev: Tensor, x_t: Tensor) -> Tensor:
    """Functional alias for a single cell update."""
    return model.step(h_prev, x_t)


def count_params(model: GRU) -> int:
    return model.count_params()


# -- checkpoint text format ----------------------------------------------------


def gru_to_text(model: GRU) -> str:
    from . import fwt
    from .wavelet_layer import layer_to_text

    lines = ["[gru]"]
    lines.append(f"n_h {model.n_h}")
    lines.append(f"n_in {model.n_in}")
    lines.append(f"n_out {model.n_out}")
    lines.append(f"compressed {','.join(model.compressed) or '-'}")
    lines.append(f"L {model.L}")
    lines.append(f"filter_init {model.filter_init}")
    for gate in GATES:
        m = model.maps[gate]
        if isinstance(m, WaveletLayer):
            lines.append(f"[wavelet {gate}]")
            lines.append(layer_to_text(m).rstrip("\n"))
        else:
            lines.append(f"[dense W_{gate} {m.data.shape[0]} {m.data.shape[1]}]")
            lines += [" ".join(format(v, ".17g") for v in row) for row in m.data]
    for name in ("V", "V_r", "V_z", "W_out"):
        m = getattr(model, name)
        lines.append(f"[dense {name} {m.data.shape[0]} {m.data.shape[1]}]")
        lines += [" ".join(format(v, ".17g") for v in row) for row in m.data]
    for name in ("b", "b_r", "b_z", "b_out"):
        v = getattr(model, name)
        lines.append(f"[vector {name} {v.data.shape[0]}]")
        lines.append(" ".join(format(x, ".17g") for x in v.data))
    return "\n".join(lines) + "\n"


def gru_from_text(text: str) -> GRU:
    from .wavelet_layer import layer_from_text

    lines = text.strip().splitlines()
    if not lines or lines[0] != "[gru]":
        raise ValidationError("model checkpoint must start with a [gru] manifest")
    header = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        key, value = lines[i].split(maxsplit=1)
        header[key] = value
        i += 1
    compressed = () if header["compressed"] == "-" else tuple(header["compressed"].split(","))
    model = GRU(int(header["n_h"]), int(header["n_in"]), int(header["n_out"]),
                compressed=compressed, filter_init=header["filter_init"],
                L=int(header["L"]), seed=0)
    while i < len(lines):
        tag = lines[i].strip("[]").split()
        i += 1
        if tag[0] == "dense":
            name, rows, cols = tag[1], int(tag[2]), int(tag[3])
            data = np.array([[float(v) for v in lines[i + r].split()]
                             for r in range(rows)])
            if data.shape != (rows, cols):
                raise ValidationError(f"bad dense block {name}")
            i += rows
            if name.startswith("W_") and name[2:] in GATES:
                model.maps[name[2:]] = Tensor(data, requires_grad=True)
            else:
                getattr(model, name).data = data
        elif tag[0] == "wavelet":
            gate = tag[1]
            model.maps[gate] = layer_from_text("\n".join(lines[i:i + 9]))
            i += 9
        elif tag[0] == "vector":
            name = tag[1]
            getattr(model, name).data = np.array([float(v) for v in lines[i].split()])
            i += 1
        else:
            raise ValidationError(f"unknown checkpoint block {tag}")
    return model
