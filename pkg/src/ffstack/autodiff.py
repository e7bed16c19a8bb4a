"""Reverse-mode automatic differentiation on a replayable tape.

Every node value is a flat 1-D float64 array (scalars have length one).
Structure (matrices, per-atom blocks, broadcasts) is encoded in integer
index arrays fixed at build time, which keeps the differentiation rules
free of broadcasting corner cases.

A model builds its computation once into a `Tape`, compiles it to a
`Program`, and then replays that program with fresh leaf values as often
as it likes (training steps, MD steps). Three sweeps are available:

* ``forward``          -- primal values.
* ``backward``         -- exact reverse-mode adjoints for every leaf.
* ``forward_tangent`` + ``backward`` over dual numbers -- Hessian-vector
  products by forwarding a tangent through the reverse sweep, so second
  derivatives cost O(tape) and no dense Hessian is ever formed.

Elementwise binary ops accept equal-length operands or a length-1 operand
(scalar broadcast); anything richer must be spelled with gather/scatter.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import EvaluationError, ValidationError

__all__ = [
    "Tape", "Var", "Program", "Dual",
    "exp", "log", "sqrt", "tanh", "silu", "sin", "cos", "acos",
    "leaky_relu", "clamp_max", "clamp_min", "gather", "scatter_add",
    "matmul", "bias_add", "concat", "segment_max_detached",
    "gauss_rbf", "cos_cutoff", "affine",
    "grad", "hvp", "check_grad", "value_of",
]


# ---------------------------------------------------------------------------
# Dual numbers (primal, tangent) for forward-over-reverse second derivatives
# ---------------------------------------------------------------------------

class Dual:
    """Pair (primal, tangent) obeying (a+eb)(c+ed) = ac + e(ad+bc)."""

    __slots__ = ("p", "t")
    __array_ufunc__ = None  # force numpy to defer to our operators

    def __init__(self, p, t):
        self.p = p
        self.t = t

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p + o.p, self.t + o.t)
        return Dual(self.p + o, self.t)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p - o.p, self.t - o.t)
        return Dual(self.p - o, self.t)

    def __rsub__(self, o):
        return Dual(o - self.p, -self.t)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p * o.p, self.t * o.p + self.p * o.t)
        return Dual(self.p * o, self.t * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            q = self.p / o.p
            return Dual(q, (self.t - q * o.t) / o.p)
        return Dual(self.p / o, self.t / o)

    def __rtruediv__(self, o):
        q = o / self.p
        return Dual(q, -q * self.t / self.p)

    def __neg__(self):
        return Dual(-self.p, -self.t)


def _p(x):
    return x.p if isinstance(x, Dual) else x


def d_exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.p)
        return Dual(e, e * x.t)
    return np.exp(x)


def d_sqrt(x):
    if isinstance(x, Dual):
        s = np.sqrt(x.p)
        return Dual(s, 0.5 * x.t / s)
    return np.sqrt(x)


def d_sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.p), np.cos(x.p) * x.t)
    return np.sin(x)


def d_cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.p), -np.sin(x.p) * x.t)
    return np.cos(x)


def d_sigmoid(x):
    if isinstance(x, Dual):
        s = 1.0 / (1.0 + np.exp(-x.p))
        return Dual(s, s * (1.0 - s) * x.t)
    return 1.0 / (1.0 + np.exp(-x))


def d_powc(x, c):
    if isinstance(x, Dual):
        return Dual(x.p**c, c * x.p ** (c - 1.0) * x.t)
    return x**c


def d_mask(x, mask):
    """x * mask where mask is a plain 0/1 array."""
    if isinstance(x, Dual):
        return Dual(x.p * mask, x.t * mask)
    return x * mask


def d_gather(x, idx):
    if isinstance(x, Dual):
        return Dual(x.p[idx], x.t[idx])
    return x[idx]


def d_scatter(x, idx, size):
    if isinstance(x, Dual):
        return Dual(
            np.bincount(idx, weights=x.p, minlength=size),
            np.bincount(idx, weights=x.t, minlength=size),
        )
    return np.bincount(idx, weights=x, minlength=size)


def d_sum1(x):
    """Sum to a length-1 array."""
    if isinstance(x, Dual):
        return Dual(x.p.sum(keepdims=True), x.t.sum(keepdims=True))
    return x.sum(keepdims=True)


def d_bcast(x, n):
    if isinstance(x, Dual):
        return Dual(np.broadcast_to(x.p, n), np.broadcast_to(x.t, n))
    return np.broadcast_to(x, n)


def d_sum_to(x, n):
    """Reduce x to length n where n is len(x) (no-op) or 1 (full sum)."""
    if n == (x.p.size if isinstance(x, Dual) else x.size):
        return x
    return d_sum1(x)


def d_mm(a, b, m, k, n):
    """Flat matmul: a is (m,k) row-major, b is (k,n) row-major."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        ap, at = (a.p, a.t) if isinstance(a, Dual) else (a, None)
        bp, bt = (b.p, b.t) if isinstance(b, Dual) else (b, None)
        A, B = ap.reshape(m, k), bp.reshape(k, n)
        pv = A @ B
        tv = np.zeros_like(pv)
        if at is not None:
            tv += at.reshape(m, k) @ B
        if bt is not None:
            tv += A @ bt.reshape(k, n)
        return Dual(pv.ravel(), tv.ravel())
    return (a.reshape(m, k) @ b.reshape(k, n)).ravel()


def d_rowsum(x, rows, cols):
    if isinstance(x, Dual):
        return Dual(
            x.p.reshape(rows, cols).sum(axis=1), x.t.reshape(rows, cols).sum(axis=1)
        )
    return x.reshape(rows, cols).sum(axis=1)


def d_colsum(x, rows, cols):
    if isinstance(x, Dual):
        return Dual(
            x.p.reshape(rows, cols).sum(axis=0), x.t.reshape(rows, cols).sum(axis=0)
        )
    return x.reshape(rows, cols).sum(axis=0)


def d_repeat(x, k):
    if isinstance(x, Dual):
        return Dual(np.repeat(x.p, k), np.repeat(x.t, k))
    return np.repeat(x, k)


def d_tile(x, k):
    if isinstance(x, Dual):
        return Dual(np.tile(x.p, k), np.tile(x.t, k))
    return np.tile(x, k)


def d_tilecols(x, rows, cols):
    """Repeat a length-`rows` vector across `cols` columns, flattened."""
    if isinstance(x, Dual):
        return Dual(
            np.repeat(x.p, cols) if cols > 1 else x.p,
            np.repeat(x.t, cols) if cols > 1 else x.t,
        )
    return np.repeat(x, cols) if cols > 1 else x


def d_concat(parts):
    if any(isinstance(q, Dual) for q in parts):
        ps = [_p(q) for q in parts]
        ts = [q.t if isinstance(q, Dual) else np.zeros_like(q) for q in parts]
        return Dual(np.concatenate(ps), np.concatenate(ts))
    return np.concatenate(parts)


def d_slice(x, lo, hi):
    if isinstance(x, Dual):
        return Dual(x.p[lo:hi], x.t[lo:hi])
    return x[lo:hi]


# ---------------------------------------------------------------------------
# Op table
# ---------------------------------------------------------------------------
# forward: f(values, parents, aux) -> ndarray            (hot path, plain numpy)
# vjp:     f(adj, pv, val, aux) -> tuple of parent contributions (dual-safe)
# jvp:     f(pt, pv, val, aux) -> tangent                (plain numpy)
#   pv / pt are tuples of parent values / tangents.

def _fw_add(v, p, aux):
    return v[p[0]] + v[p[1]]


def _fw_sub(v, p, aux):
    return v[p[0]] - v[p[1]]


def _fw_mul(v, p, aux):
    return v[p[0]] * v[p[1]]


def _fw_div(v, p, aux):
    return v[p[0]] / v[p[1]]


_FWD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "neg": lambda v, p, aux: -v[p[0]],
    "powc": lambda v, p, aux: v[p[0]] ** aux,
    "exp": lambda v, p, aux: np.exp(v[p[0]]),
    "log": lambda v, p, aux: np.log(v[p[0]]),
    "sqrt": lambda v, p, aux: np.sqrt(v[p[0]]),
    "tanh": lambda v, p, aux: np.tanh(v[p[0]]),
    "silu": lambda v, p, aux: v[p[0]] / (1.0 + np.exp(-v[p[0]])),
    "sin": lambda v, p, aux: np.sin(v[p[0]]),
    "cos": lambda v, p, aux: np.cos(v[p[0]]),
    "acos": lambda v, p, aux: np.arccos(v[p[0]]),
    "lrelu": lambda v, p, aux: np.where(v[p[0]] > 0.0, v[p[0]], aux * v[p[0]]),
    "minc": lambda v, p, aux: np.minimum(v[p[0]], aux),
    "maxc": lambda v, p, aux: np.maximum(v[p[0]], aux),
    "sum": lambda v, p, aux: v[p[0]].sum(keepdims=True),
    "dot": lambda v, p, aux: np.atleast_1d(v[p[0]] @ v[p[1]]),
    "gather": lambda v, p, aux: v[p[0]][aux],
    "scatter": lambda v, p, aux: np.bincount(aux[0], weights=v[p[0]], minlength=aux[1]),
    "matmul": lambda v, p, aux: (
        v[p[0]].reshape(aux[0], aux[1]) @ v[p[1]].reshape(aux[1], aux[2])
    ).ravel(),
    "bias_add": lambda v, p, aux: (
        v[p[0]] + np.repeat(v[p[1]], aux[1])
    ),
    "concat": lambda v, p, aux: np.concatenate([v[i] for i in p]),
}


def _fw_segmax(v, p, aux):
    seg, nseg = aux
    m = np.full(nseg, -np.inf)
    np.maximum.at(m, seg, v[p[0]])
    return m[seg]


_FWD["segmax"] = _fw_segmax

# fused primitives (hot paths): gaussian RBF, cosine cutoff, affine map


def _fw_gauss(v, p, aux):
    mu, eta = aux
    d = v[p[0]] - mu
    return np.exp(-eta * d * d)


def _fw_coscut(v, p, aux):
    rc = aux
    return 0.5 * (np.cos(np.pi * np.minimum(v[p[0]] / rc, 1.0)) + 1.0)


def _fw_affine(v, p, aux):
    m, k, n = aux
    return (
        v[p[0]].reshape(m, k) @ v[p[1]].reshape(k, n) + v[p[2]][:, None]
    ).ravel()


_FWD["gauss"] = _fw_gauss
_FWD["coscut"] = _fw_coscut
_FWD["affine"] = _fw_affine

# structured index ops, specialized from gather/scatter patterns at build time
_FWD["perm"] = lambda v, p, aux: v[p[0]][aux[0]]
_FWD["rep"] = lambda v, p, aux: np.repeat(v[p[0]], aux[1])
_FWD["tilek"] = lambda v, p, aux: np.tile(v[p[0]], aux[1])
_FWD["rowsum"] = lambda v, p, aux: v[p[0]].reshape(aux[0], aux[1]).sum(axis=1)
_FWD["colsum"] = lambda v, p, aux: v[p[0]].reshape(aux[0], aux[1]).sum(axis=0)
_FWD["slicec"] = lambda v, p, aux: v[p[0]][aux[0] : aux[1]]


def _vjp_add(adj, pv, val, aux):
    if aux is None:
        return adj, adj
    return d_sum_to(adj, aux[0]), d_sum_to(adj, aux[1])


def _vjp_sub(adj, pv, val, aux):
    if aux is None:
        return adj, -adj
    return d_sum_to(adj, aux[0]), d_sum_to(-adj, aux[1])


def _vjp_mul(adj, pv, val, aux):
    if aux is None:
        return adj * pv[1], adj * pv[0]
    return d_sum_to(adj * pv[1], aux[0]), d_sum_to(adj * pv[0], aux[1])


def _vjp_div(adj, pv, val, aux):
    ga = adj / pv[1]
    if aux is None:
        return ga, -ga * val
    return d_sum_to(ga, aux[0]), d_sum_to(-ga * val, aux[1])


def _vjp_silu(adj, pv, val, aux):
    s = d_sigmoid(pv[0])
    return (adj * (s + val * (1.0 - s)),)


def _vjp_matmul(adj, pv, val, aux):
    m, k, n = aux
    # dA = adj @ B^T ; dB = A^T @ adj, done on flats via transposed index maps
    if isinstance(adj, Dual) or isinstance(pv[0], Dual) or isinstance(pv[1], Dual):
        adj_m = adj if isinstance(adj, Dual) else Dual(adj, np.zeros_like(adj))
        a = pv[0] if isinstance(pv[0], Dual) else Dual(pv[0], None)
        b = pv[1] if isinstance(pv[1], Dual) else Dual(pv[1], None)
        A, B = a.p.reshape(m, k), b.p.reshape(k, n)
        G, Gt = adj_m.p.reshape(m, n), adj_m.t.reshape(m, n)
        dA = G @ B.T
        dAt = Gt @ B.T
        if b.t is not None:
            dAt = dAt + G @ b.t.reshape(k, n).T
        dB = A.T @ G
        dBt = A.T @ Gt
        if a.t is not None:
            dBt = dBt + a.t.reshape(m, k).T @ G
        return Dual(dA.ravel(), dAt.ravel()), Dual(dB.ravel(), dBt.ravel())
    G = adj.reshape(m, n)
    dA = G @ pv[1].reshape(k, n).T
    dB = pv[0].reshape(m, k).T @ G
    return dA.ravel(), dB.ravel()


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda adj, pv, val, aux: (-adj,),
    "powc": lambda adj, pv, val, aux: (adj * (aux * d_powc(pv[0], aux - 1.0)),),
    "exp": lambda adj, pv, val, aux: (adj * val,),
    "log": lambda adj, pv, val, aux: (adj / pv[0],),
    "sqrt": lambda adj, pv, val, aux: (adj * (0.5 / val),),
    "tanh": lambda adj, pv, val, aux: (adj * (1.0 - val * val),),
    "silu": _vjp_silu,
    "sin": lambda adj, pv, val, aux: (adj * d_cos(pv[0]),),
    "cos": lambda adj, pv, val, aux: (-adj * d_sin(pv[0]),),
    "acos": lambda adj, pv, val, aux: (
        -adj / d_sqrt(1.0 - pv[0] * pv[0]),
    ),
    "lrelu": lambda adj, pv, val, aux: (
        d_mask(adj, np.where(_p(pv[0]) > 0.0, 1.0, aux)),
    ),
    "minc": lambda adj, pv, val, aux: (d_mask(adj, (_p(pv[0]) < aux).astype(float)),),
    "maxc": lambda adj, pv, val, aux: (d_mask(adj, (_p(pv[0]) > aux).astype(float)),),
    "sum": lambda adj, pv, val, aux: (d_bcast(adj, np.size(_p(pv[0]))),),
    "dot": lambda adj, pv, val, aux: (adj * pv[1], adj * pv[0]),
    "gather": lambda adj, pv, val, aux: (d_scatter(adj, aux, np.size(_p(pv[0]))),),
    "scatter": lambda adj, pv, val, aux: (d_gather(adj, aux[0]),),
    "matmul": _vjp_matmul,
    "bias_add": lambda adj, pv, val, aux: (adj, d_rowsum(adj, aux[0], aux[1])),
    "segmax": lambda adj, pv, val, aux: (None,),  # detached on purpose
}


def _vjp_concat(adj, pv, val, aux):
    out = []
    lo = 0
    for size in aux:
        out.append(d_slice(adj, lo, lo + size))
        lo += size
    return tuple(out)


_VJP["concat"] = _vjp_concat


def _mm_dA(adj, b, m, k, n):
    if isinstance(adj, Dual) or isinstance(b, Dual):
        gp, gt = (adj.p, adj.t) if isinstance(adj, Dual) else (adj, None)
        bp, bt = (b.p, b.t) if isinstance(b, Dual) else (b, None)
        G, B = gp.reshape(m, n), bp.reshape(k, n)
        da = G @ B.T
        dat = np.zeros_like(da)
        if gt is not None:
            dat += gt.reshape(m, n) @ B.T
        if bt is not None:
            dat += G @ bt.reshape(k, n).T
        return Dual(da.ravel(), dat.ravel())
    return (adj.reshape(m, n) @ b.reshape(k, n).T).ravel()


def _mm_dB(adj, a, m, k, n):
    if isinstance(adj, Dual) or isinstance(a, Dual):
        gp, gt = (adj.p, adj.t) if isinstance(adj, Dual) else (adj, None)
        ap, at = (a.p, a.t) if isinstance(a, Dual) else (a, None)
        G, A = gp.reshape(m, n), ap.reshape(m, k)
        db = A.T @ G
        dbt = np.zeros_like(db)
        if gt is not None:
            dbt += A.T @ gt.reshape(m, n)
        if at is not None:
            dbt += at.reshape(m, k).T @ G
        return Dual(db.ravel(), dbt.ravel())
    return (a.reshape(m, k).T @ adj.reshape(m, n)).ravel()


def _specialize_vjp(op, fn, need):
    """Backward rule computing only the parent contributions in `need`."""
    if op in ("matmul", "affine"):
        na, nb = need[0], need[1]
        nbias = need[2] if op == "affine" else False

        def f(adj, pv, val, aux):
            m, k, n = aux
            da = _mm_dA(adj, pv[1], m, k, n) if na else None
            db = _mm_dB(adj, pv[0], m, k, n) if nb else None
            if op == "matmul":
                return da, db
            return da, db, (d_rowsum(adj, m, n) if nbias else None)

        return f

    def g(adj, pv, val, aux):
        out = fn(adj, pv, val, aux)
        return tuple(c if nd else None for c, nd in zip(out, need))

    return g


def _vjp_gauss(adj, pv, val, aux):
    mu, eta = aux
    return (adj * val * ((pv[0] - mu) * (-2.0 * eta)),)


def _vjp_coscut(adj, pv, val, aux):
    rc = aux
    mask = (_p(pv[0]) < rc).astype(float) * (-0.5 * np.pi / rc)
    return (adj * d_sin(pv[0] * (np.pi / rc)) * mask,)


def _vjp_affine(adj, pv, val, aux):
    m, k, n = aux
    da, db = _vjp_matmul(adj, pv[:2], val, aux)
    return da, db, d_rowsum(adj, m, n)


_VJP["gauss"] = _vjp_gauss
_VJP["coscut"] = _vjp_coscut
_VJP["affine"] = _vjp_affine

_VJP["perm"] = lambda adj, pv, val, aux: (d_gather(adj, aux[1]),)
_VJP["rep"] = lambda adj, pv, val, aux: (d_rowsum(adj, aux[0], aux[1]),)
_VJP["tilek"] = lambda adj, pv, val, aux: (d_colsum(adj, aux[1], aux[0]),)
_VJP["rowsum"] = lambda adj, pv, val, aux: (d_repeat(adj, aux[1]),)
_VJP["colsum"] = lambda adj, pv, val, aux: (d_tile(adj, aux[0]),)


def _vjp_slicec(adj, pv, val, aux):
    lo, hi, n = aux
    if isinstance(adj, Dual):
        zp = np.zeros(n)
        zt = np.zeros(n)
        zp[lo:hi] = adj.p
        zt[lo:hi] = adj.t
        return (Dual(zp, zt),)
    z = np.zeros(n)
    z[lo:hi] = adj
    return (z,)


_VJP["slicec"] = _vjp_slicec


def _jvp_bin(op):
    def f(pt, pv, val, aux):
        a, b = pv
        ta, tb = pt
        if op == "add":
            parts = [ta, tb]
        elif op == "sub":
            parts = [ta, None if tb is None else -tb]
        elif op == "mul":
            parts = [None if ta is None else ta * b, None if tb is None else a * tb]
        else:  # div
            parts = [
                None if ta is None else ta / b,
                None if tb is None else -tb * val / b,
            ]
        parts = [q for q in parts if q is not None]
        if not parts:
            return None
        if len(parts) == 1:
            q = parts[0]
            return np.broadcast_to(q, val.shape) if q.size != val.size else q
        return parts[0] + parts[1]

    return f


def _jvp_matmul(pt, pv, val, aux):
    m, k, n = aux
    ta, tb = pt
    out = None
    if ta is not None:
        out = ta.reshape(m, k) @ pv[1].reshape(k, n)
    if tb is not None:
        q = pv[0].reshape(m, k) @ tb.reshape(k, n)
        out = q if out is None else out + q
    return None if out is None else out.ravel()


def _jvp_concat(pt, pv, val, aux):
    if all(t is None for t in pt):
        return None
    return np.concatenate(
        [t if t is not None else np.zeros(s) for t, s in zip(pt, aux)]
    )


_JVP = {
    "add": _jvp_bin("add"),
    "sub": _jvp_bin("sub"),
    "mul": _jvp_bin("mul"),
    "div": _jvp_bin("div"),
    "neg": lambda pt, pv, val, aux: None if pt[0] is None else -pt[0],
    "powc": lambda pt, pv, val, aux: (
        None if pt[0] is None else aux * pv[0] ** (aux - 1.0) * pt[0]
    ),
    "exp": lambda pt, pv, val, aux: None if pt[0] is None else val * pt[0],
    "log": lambda pt, pv, val, aux: None if pt[0] is None else pt[0] / pv[0],
    "sqrt": lambda pt, pv, val, aux: None if pt[0] is None else 0.5 * pt[0] / val,
    "tanh": lambda pt, pv, val, aux: (
        None if pt[0] is None else (1.0 - val * val) * pt[0]
    ),
    "silu": lambda pt, pv, val, aux: (
        None
        if pt[0] is None
        else (lambda s: (s + val * (1.0 - s)) * pt[0])(d_sigmoid(pv[0]))
    ),
    "sin": lambda pt, pv, val, aux: None if pt[0] is None else np.cos(pv[0]) * pt[0],
    "cos": lambda pt, pv, val, aux: None if pt[0] is None else -np.sin(pv[0]) * pt[0],
    "acos": lambda pt, pv, val, aux: (
        None if pt[0] is None else -pt[0] / np.sqrt(1.0 - pv[0] * pv[0])
    ),
    "lrelu": lambda pt, pv, val, aux: (
        None if pt[0] is None else np.where(pv[0] > 0.0, 1.0, aux) * pt[0]
    ),
    "minc": lambda pt, pv, val, aux: (
        None if pt[0] is None else (pv[0] < aux) * pt[0]
    ),
    "maxc": lambda pt, pv, val, aux: (
        None if pt[0] is None else (pv[0] > aux) * pt[0]
    ),
    "sum": lambda pt, pv, val, aux: (
        None if pt[0] is None else pt[0].sum(keepdims=True)
    ),
    "dot": lambda pt, pv, val, aux: (
        None
        if pt[0] is None and pt[1] is None
        else np.atleast_1d(
            (0.0 if pt[0] is None else pt[0] @ pv[1])
            + (0.0 if pt[1] is None else pv[0] @ pt[1])
        )
    ),
    "gather": lambda pt, pv, val, aux: None if pt[0] is None else pt[0][aux],
    "scatter": lambda pt, pv, val, aux: (
        None
        if pt[0] is None
        else np.bincount(aux[0], weights=pt[0], minlength=aux[1])
    ),
    "matmul": _jvp_matmul,
    "bias_add": lambda pt, pv, val, aux: _jvp_bias(pt, aux),
    "concat": _jvp_concat,
    "segmax": lambda pt, pv, val, aux: None,  # detached
}


def _jvp_bias(pt, aux):
    ty, tb = pt
    out = None
    if ty is not None:
        out = ty
    if tb is not None:
        q = np.repeat(tb, aux[1])
        out = q if out is None else out + q
    return out


def _jvp_gauss(pt, pv, val, aux):
    if pt[0] is None:
        return None
    mu, eta = aux
    return val * (-2.0 * eta) * (pv[0] - mu) * pt[0]


def _jvp_coscut(pt, pv, val, aux):
    if pt[0] is None:
        return None
    rc = aux
    mask = (pv[0] < rc) * (-0.5 * np.pi / rc)
    return np.sin(pv[0] * (np.pi / rc)) * mask * pt[0]


def _jvp_affine(pt, pv, val, aux):
    m, k, n = aux
    out = _jvp_matmul(pt[:2], pv[:2], val, aux)
    if pt[2] is not None:
        q = np.repeat(pt[2], n)
        out = q if out is None else out + q
    return out


_JVP["gauss"] = _jvp_gauss
_JVP["coscut"] = _jvp_coscut
_JVP["affine"] = _jvp_affine

_JVP["perm"] = lambda pt, pv, val, aux: None if pt[0] is None else pt[0][aux[0]]
_JVP["rep"] = lambda pt, pv, val, aux: (
    None if pt[0] is None else np.repeat(pt[0], aux[1])
)
_JVP["tilek"] = lambda pt, pv, val, aux: (
    None if pt[0] is None else np.tile(pt[0], aux[1])
)
_JVP["rowsum"] = lambda pt, pv, val, aux: (
    None if pt[0] is None else pt[0].reshape(aux[0], aux[1]).sum(axis=1)
)
_JVP["colsum"] = lambda pt, pv, val, aux: (
    None if pt[0] is None else pt[0].reshape(aux[0], aux[1]).sum(axis=0)
)
_JVP["slicec"] = lambda pt, pv, val, aux: (
    None if pt[0] is None else pt[0][aux[0] : aux[1]]
)


# ---------------------------------------------------------------------------
# Tape / Var / Program
# ---------------------------------------------------------------------------

class Var:
    """Handle to a tape node; supports arithmetic for program building."""

    __slots__ = ("tape", "i", "n")

    def __init__(self, tape: "Tape", i: int, n: int):
        self.tape = tape
        self.i = i
        self.n = n

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(np.atleast_1d(np.asarray(other, dtype=np.float64)))

    def __add__(self, o):
        return self.tape._emit("add", (self, self._coerce(o)))

    __radd__ = __add__

    def __sub__(self, o):
        return self.tape._emit("sub", (self, self._coerce(o)))

    def __rsub__(self, o):
        return self.tape._emit("sub", (self._coerce(o), self))

    def __mul__(self, o):
        return self.tape._emit("mul", (self, self._coerce(o)))

    __rmul__ = __mul__

    def __truediv__(self, o):
        return self.tape._emit("div", (self, self._coerce(o)))

    def __rtruediv__(self, o):
        return self.tape._emit("div", (self._coerce(o), self))

    def __neg__(self):
        return self.tape._emit("neg", (self,))

    def __pow__(self, c):
        return self.tape._emit("powc", (self,), aux=float(c))

    def sum(self) -> "Var":
        return self.tape._emit("sum", (self,), n=1)

    def dot(self, o: "Var") -> "Var":
        return self.tape._emit("dot", (self, o), n=1)


class Tape:
    """Append-only list of primitive ops; topological order by construction."""

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.aux: list = []
        self.sizes: list[int] = []
        self.leaves: list[int] = []
        self._const_vals: dict[int, np.ndarray] = {}

    def _push(self, op, parents, aux, n) -> Var:
        i = len(self.ops)
        self.ops.append(op)
        self.parents.append(parents)
        self.aux.append(aux)
        self.sizes.append(n)
        return Var(self, i, n)

    def leaf(self, n: int) -> Var:
        v = self._push("leaf", (), None, n)
        self.leaves.append(v.i)
        return v

    def const(self, value: np.ndarray) -> Var:
        value = np.atleast_1d(np.asarray(value, dtype=np.float64)).ravel()
        v = self._push("const", (), None, value.size)
        self._const_vals[v.i] = value
        return v

    def _emit(self, op, pvars: tuple, aux=None, n: int | None = None) -> Var:
        sizes = [p.n for p in pvars]
        if n is None:
            if op in ("add", "sub", "mul", "div"):
                n = max(sizes)
                if sizes[0] != sizes[1]:
                    if 1 not in sizes:
                        raise ValidationError(
                            f"{op}: incompatible lengths {sizes[0]} vs {sizes[1]}"
                        )
                    aux = (sizes[0], sizes[1])  # scalar broadcast; vjp reduces
            else:
                n = sizes[0]
        return self._push(op, tuple(p.i for p in pvars), aux, n)

    def compile(self, outputs: Sequence[Var]) -> "Program":
        return Program(self, [o.i for o in outputs])


def exp(v: Var) -> Var:
    return v.tape._emit("exp", (v,))


def log(v: Var) -> Var:
    return v.tape._emit("log", (v,))


def sqrt(v: Var) -> Var:
    return v.tape._emit("sqrt", (v,))


def tanh(v: Var) -> Var:
    return v.tape._emit("tanh", (v,))


def silu(v: Var) -> Var:
    return v.tape._emit("silu", (v,))


def sin(v: Var) -> Var:
    return v.tape._emit("sin", (v,))


def cos(v: Var) -> Var:
    return v.tape._emit("cos", (v,))


def acos(v: Var) -> Var:
    return v.tape._emit("acos", (v,))


def leaky_relu(v: Var, alpha: float = 0.2) -> Var:
    return v.tape._emit("lrelu", (v,), aux=float(alpha))


def clamp_max(v: Var, c: float) -> Var:
    return v.tape._emit("minc", (v,), aux=float(c))


def clamp_min(v: Var, c: float) -> Var:
    return v.tape._emit("maxc", (v,), aux=float(c))


def gather(v: Var, idx: np.ndarray) -> Var:
    """Index selection; structured patterns (permutation, repeat, tile) are
    specialized at build time to avoid bincount in the reverse sweep."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= v.n):
        raise ValidationError("gather: index out of range")
    n = v.n
    if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
        lo = int(idx[0])
        return v.tape._emit("slicec", (v,), aux=(lo, lo + idx.size, n), n=idx.size)
    if idx.size == n and np.array_equal(np.bincount(idx, minlength=n), np.ones(n)):
        inv = np.empty(n, dtype=np.intp)
        inv[idx] = np.arange(n)
        return v.tape._emit("perm", (v,), aux=(idx, inv), n=n)
    if n and idx.size % n == 0:
        k = idx.size // n
        if k > 1 and np.array_equal(idx, np.repeat(np.arange(n), k)):
            return v.tape._emit("rep", (v,), aux=(n, k), n=idx.size)
        if k > 1 and np.array_equal(idx, np.tile(np.arange(n), k)):
            return v.tape._emit("tilek", (v,), aux=(n, k), n=idx.size)
    return v.tape._emit("gather", (v,), aux=idx, n=idx.size)


def scatter_add(v: Var, idx: np.ndarray, size: int) -> Var:
    """Indexed accumulation; fixed-width contiguous segments and whole-vector
    tiles are specialized to reshape-sums at build time."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size != v.n:
        raise ValidationError("scatter_add: index length must match operand")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValidationError("scatter_add: index out of range")
    size = int(size)
    if size and v.n % size == 0:
        k = v.n // size
        if k >= 1 and np.array_equal(idx, np.repeat(np.arange(size), k)):
            if k == 1:
                return v.tape._emit("perm", (v,), aux=(idx, idx.copy()), n=size)
            return v.tape._emit("rowsum", (v,), aux=(size, k), n=size)
        if k > 1 and np.array_equal(idx, np.tile(np.arange(size), k)):
            return v.tape._emit("colsum", (v,), aux=(k, size), n=size)
    return v.tape._emit("scatter", (v,), aux=(idx, size), n=size)


def matmul(a: Var, b: Var, m: int, k: int, n: int) -> Var:
    if a.n != m * k or b.n != k * n:
        raise ValidationError("matmul: operand sizes disagree with (m, k, n)")
    return a.tape._emit("matmul", (a, b), aux=(m, k, n), n=m * n)


def bias_add(y: Var, b: Var, rows: int, cols: int) -> Var:
    if y.n != rows * cols or b.n != rows:
        raise ValidationError("bias_add: shape mismatch")
    return y.tape._emit("bias_add", (y, b), aux=(rows, cols), n=y.n)


def concat(parts: Sequence[Var]) -> Var:
    tape = parts[0].tape
    sizes = tuple(p.n for p in parts)
    return tape._push(
        "concat", tuple(p.i for p in parts), sizes, int(sum(sizes))
    )


def segment_max_detached(v: Var, seg: np.ndarray, nseg: int) -> Var:
    """Per-element max of the segment it belongs to, treated as a constant
    shift (zero derivative): softmax(x - c) is exactly softmax(x) for any
    per-segment constant c, so detaching keeps gradients exact."""
    seg = np.asarray(seg, dtype=np.intp)
    return v.tape._emit("segmax", (v,), aux=(seg, int(nseg)), n=v.n)


def gauss_rbf(v: Var, mu, eta) -> Var:
    """Fused exp(-eta * (v - mu)^2); mu and eta are fixed scalars or arrays."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim and mu.size != v.n:
        raise ValidationError("gauss_rbf: mu length must match operand")
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim and eta.size != v.n:
        raise ValidationError("gauss_rbf: eta length must match operand")
    return v.tape._emit("gauss", (v,), aux=(mu, eta))


def cos_cutoff(v: Var, rc) -> Var:
    """Fused 0.5*(cos(pi*min(v/rc, 1)) + 1); exactly zero beyond rc.
    rc is a fixed scalar or per-element array."""
    rc = np.asarray(rc, dtype=np.float64)
    if rc.ndim and rc.size != v.n:
        raise ValidationError("cos_cutoff: rc length must match operand")
    return v.tape._emit("coscut", (v,), aux=rc)


def affine(a: Var, b: Var, bias: Var, m: int, k: int, n: int) -> Var:
    """Fused (m,k) @ (k,n) plus a per-row bias."""
    if a.n != m * k or b.n != k * n or bias.n != m:
        raise ValidationError("affine: operand sizes disagree with (m, k, n)")
    return a.tape._emit("affine", (a, b, bias), aux=(m, k, n), n=m * n)


class Program:
    """A frozen tape with designated outputs, replayable with new leaf values."""

    def __init__(self, tape: Tape, output_ids: list[int]):
        self.ops = tape.ops
        self.parents = tape.parents
        self.aux = tape.aux
        self.sizes = tape.sizes
        self.leaves = list(tape.leaves)
        self.outputs = output_ids
        self.n_nodes = len(tape.ops)
        self._template: list = [None] * self.n_nodes
        for i, val in tape._const_vals.items():
            self._template[i] = val
        # precomputed dispatch for the hot interpreter loops
        self._fwd_steps = [
            (i, _FWD[op], self.parents[i], self.aux[i])
            for i, op in enumerate(self.ops)
            if op not in ("leaf", "const")
        ]
        self._jvp_steps = [
            (i, _JVP[op], self.parents[i], self.aux[i])
            for i, op in enumerate(self.ops)
            if op not in ("leaf", "const")
        ]
        self._bwd_cache: dict = {}
        self._bwd_steps = self._grad_steps(None)

    def _grad_steps(self, targets):
        """Backward step list restricted to nodes that can reach a target
        leaf (all leaves when targets is None); contributions into constants
        or untargeted leaves are never computed."""
        key = None if targets is None else tuple(sorted(targets))
        cached = self._bwd_cache.get(key)
        if cached is not None:
            return cached
        if targets is None:
            reach = [op == "leaf" for op in self.ops]
        else:
            tset = set(targets)
            reach = [i in tset for i in range(self.n_nodes)]
        for i in range(self.n_nodes):
            if self.ops[i] in ("leaf", "const") or reach[i]:
                continue
            reach[i] = any(reach[j] for j in self.parents[i])
        steps = []
        for i in range(self.n_nodes - 1, -1, -1):
            op = self.ops[i]
            if op in ("leaf", "const") or not reach[i]:
                continue
            par = self.parents[i]
            need = tuple(reach[j] for j in par)
            fn = _VJP[op]
            if not all(need):
                fn = _specialize_vjp(op, fn, need)
            steps.append((i, fn, par, self.aux[i]))
        self._bwd_cache[key] = steps
        return steps

    def forward(self, leaf_values: dict[int, np.ndarray], check: bool = False) -> list:
        v = self._template.copy()
        for i, x in leaf_values.items():
            x = np.asarray(x, dtype=np.float64).ravel()
            if x.size != self.sizes[i]:
                raise ValidationError(
                    f"leaf {i} expects length {self.sizes[i]}, got {x.size}"
                )
            v[i] = x
        for i in self.leaves:
            if v[i] is None:
                raise ValidationError(f"missing value for leaf {i}")
        if check:
            for i, fn, par, aux in self._fwd_steps:
                v[i] = fn(v, par, aux)
                if not np.all(np.isfinite(v[i])):
                    raise EvaluationError(
                        f"non-finite value at op index {i} ({self.ops[i]})"
                    )
        else:
            for i, fn, par, aux in self._fwd_steps:
                v[i] = fn(v, par, aux)
        return v

    def backward(
        self, values: list, seeds: dict[int, np.ndarray], targets=None
    ) -> list:
        """Reverse sweep; returns adjoints (None where zero). With `targets`
        (leaf ids) only work feeding those leaves is performed."""
        adj: list = [None] * self.n_nodes
        for i, s in seeds.items():
            adj[i] = s
        steps = self._bwd_steps if targets is None else self._grad_steps(targets)
        for i, fn, par, aux in steps:
            a = adj[i]
            if a is None:
                continue
            pv = tuple(values[j] for j in par)
            contribs = fn(a, pv, values[i], aux)
            for j, c in zip(par, contribs):
                if c is None:
                    continue
                adj[j] = c if adj[j] is None else adj[j] + c
        return adj

    def forward_tangent(self, values: list, leaf_tangents: dict[int, np.ndarray]) -> list:
        """JVP sweep reusing stored primal values; None marks zero tangent."""
        t: list = [None] * self.n_nodes
        for i, x in leaf_tangents.items():
            t[i] = np.asarray(x, dtype=np.float64).ravel()
        for i, fn, par, aux in self._jvp_steps:
            pt = tuple(t[j] for j in par)
            if all(q is None for q in pt):
                continue
            t[i] = fn(pt, tuple(values[j] for j in par), values[i], aux)
        return t

    def backward_dual(
        self,
        values: list,
        tangents: list,
        seeds: dict[int, np.ndarray],
        seed_tangents: dict[int, np.ndarray] | None = None,
        targets=None,
    ) -> list:
        """Reverse sweep over dual numbers: adjoint tangents carry the
        directional derivative of each adjoint along the forward tangent."""
        adj: list = [None] * self.n_nodes
        for i, s in seeds.items():
            st = None if seed_tangents is None else seed_tangents.get(i)
            adj[i] = Dual(s, np.zeros_like(s) if st is None else st)

        def lift(j):
            tj = tangents[j]
            if tj is None:
                return values[j]
            return Dual(values[j], tj)

        steps = self._bwd_steps if targets is None else self._grad_steps(targets)
        for i, fn, par, aux in steps:
            a = adj[i]
            if a is None:
                continue
            pv = tuple(lift(j) for j in par)
            contribs = fn(a, pv, lift(i), aux)
            for j, c in zip(par, contribs):
                if c is None:
                    continue
                if not isinstance(c, Dual):
                    c = Dual(_p(c), np.zeros_like(_p(c)))
                adj[j] = c if adj[j] is None else adj[j] + c
        return adj


# ---------------------------------------------------------------------------
# Functional API over scalar functions of n reals
# ---------------------------------------------------------------------------

def _trace(f: Callable[[Var], Var], n: int):
    tape = Tape()
    x = tape.leaf(n)
    y = f(x)
    if not isinstance(y, Var) or y.n != 1:
        got = getattr(y, "n", None)
        raise ValidationError(f"function must return a scalar Var, got size {got}")
    return tape.compile([y]), x, y


def value_of(f: Callable[[Var], Var], x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    prog, xv, yv = _trace(f, x.size)
    vals = prog.forward({xv.i: x}, check=True)
    return float(vals[yv.i][0])


def grad(f: Callable[[Var], Var], x: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of a scalar function built from tape ops."""
    x = np.asarray(x, dtype=np.float64).ravel()
    prog, xv, yv = _trace(f, x.size)
    vals = prog.forward({xv.i: x}, check=True)
    adj = prog.backward(vals, {yv.i: np.ones(1)})
    g = adj[xv.i]
    return np.zeros_like(x) if g is None else np.asarray(g, dtype=np.float64)


def hvp(f: Callable[[Var], Var], x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product (grad^2 f)(x) @ v by forward-over-reverse."""
    x = np.asarray(x, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != x.size:
        raise ValidationError("hvp: direction must match input size")
    prog, xv, yv = _trace(f, x.size)
    vals = prog.forward({xv.i: x}, check=True)
    tans = prog.forward_tangent(vals, {xv.i: v})
    adj = prog.backward_dual(vals, tans, {yv.i: np.ones(1)})
    a = adj[xv.i]
    if a is None:
        return np.zeros_like(x)
    return np.asarray(a.t if isinstance(a, Dual) else np.zeros_like(x))


def check_grad(f: Callable[[Var], Var], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative deviation between reverse-mode and central differences."""
    if not 1e-7 <= h <= 1e-2:
        raise ValidationError(f"check_grad: h must lie in [1e-7, 1e-2], got {h}")
    x = np.asarray(x, dtype=np.float64).ravel()
    prog, xv, yv = _trace(f, x.size)
    vals = prog.forward({xv.i: x}, check=True)
    adj = prog.backward(vals, {yv.i: np.ones(1)})
    g = adj[xv.i]
    g = np.zeros_like(x) if g is None else np.asarray(g)

    def feval(xq):
        return float(prog.forward({xv.i: xq})[yv.i][0])

    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fd = (feval(xp) - feval(xm)) / (2.0 * h)
        err = abs(g[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
