"""One projected LSTM tower: parameters, one-step forward, exact one-step backward.

The tower follows the classic projected layout: gated cell of size `cell_dim`
with diagonal peephole weights, a recurrent projection r_t = W_rm m_t that is
fed back to the next step, a non-recurrent projection p_t = W_pm m_t used only
for the output, and logits y_t = W_yr r_t + W_yp p_t + b_y.

Each of the four pre-activation sites (input gate i, forget gate f, output
gate o, cell candidate g) accepts an optional additive injection vector, which
is how the joint network routes the partner tower's previous-step projections
into this tower.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import matvec, sigmoid

SINKS = ("i", "f", "o", "g")

# row blocks of the fused pre-activation vector z (same order as the
# stacked weight layout below)
_SLOT = {"i": 0, "f": 1, "g": 2, "o": 3}


@dataclass(frozen=True)
class CellDims:
    """Sizes of one tower."""

    in_dim: int
    cell_dim: int
    rproj_dim: int
    pproj_dim: int
    out_dim: int

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if int(value) <= 0:
                raise ValueError(f"CellDims.{name} must be positive, got {value}")

    def param_count(self):
        n, c, r, p, o = (
            self.in_dim,
            self.cell_dim,
            self.rproj_dim,
            self.pproj_dim,
            self.out_dim,
        )
        return 4 * c * n + 4 * c * r + 3 * c + 4 * c + r * c + p * c + o * r + o * p + o


class CellParams:
    """All weights of one tower in a single flat float64 buffer.

    Flat layout, row-major within each block:

        W_ix W_fx W_cx W_ox | W_ir W_fr W_cr W_or | w_ic w_fc w_oc |
        b_i b_f b_c b_o | W_rm W_pm | W_yr W_yp | b_y

    Because the four input blocks (and the four recurrent blocks, and the four
    biases) are adjacent, the fused views W_zx (4c x n), W_zr (4c x r) and b_z
    (4c) alias the same memory as the per-gate fields; sequence kernels use
    the fused views, per-step code uses the per-gate ones.
    """

    def __init__(self, dims, flat=None):
        if flat is None:
            flat = np.zeros(dims.param_count(), dtype=np.float64)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (dims.param_count(),):
            raise ValueError(
                f"flat buffer has {flat.shape}, dims need ({dims.param_count()},)"
            )
        self.dims = dims
        self.flat = flat
        n, c, r, p, o = dims.in_dim, dims.cell_dim, dims.rproj_dim, dims.pproj_dim, dims.out_dim

        def take(count, shape):
            nonlocal pos
            view = flat[pos : pos + count].reshape(shape)
            pos += count
            return view

        pos = 0
        self.W_zx = flat[0 : 4 * c * n].reshape(4 * c, n)
        self.W_ix = take(c * n, (c, n))
        self.W_fx = take(c * n, (c, n))
        self.W_cx = take(c * n, (c, n))
        self.W_ox = take(c * n, (c, n))
        self.W_zr = flat[pos : pos + 4 * c * r].reshape(4 * c, r)
        self.W_ir = take(c * r, (c, r))
        self.W_fr = take(c * r, (c, r))
        self.W_cr = take(c * r, (c, r))
        self.W_or = take(c * r, (c, r))
        self.w_ic = take(c, (c,))
        self.w_fc = take(c, (c,))
        self.w_oc = take(c, (c,))
        self.b_z = flat[pos : pos + 4 * c]
        self.b_i = take(c, (c,))
        self.b_f = take(c, (c,))
        self.b_c = take(c, (c,))
        self.b_o = take(c, (c,))
        self.W_rm = take(r * c, (r, c))
        self.W_pm = take(p * c, (p, c))
        self.W_yr = take(o * r, (o, r))
        self.W_yp = take(o * p, (o, p))
        self.b_y = take(o, (o,))
        assert pos == flat.shape[0]

    @classmethod
    def zeros(cls, dims):
        return cls(dims)

    def copy(self):
        return CellParams(self.dims, self.flat.copy())


def init_cell_params(dims, rng):
    """Fresh tower weights: uniform in [-s, s] with s = 1/sqrt(fan-in), zero biases.

    Fan-in is the number of summed inputs of each block: columns for full
    matrices, 1 for the diagonal peephole vectors. Entries are drawn in the
    canonical flat order, row-major, so the same seed always yields the same
    parameters.
    """
    params = CellParams.zeros(dims)
    blocks = [
        (params.W_ix, dims.in_dim),
        (params.W_fx, dims.in_dim),
        (params.W_cx, dims.in_dim),
        (params.W_ox, dims.in_dim),
        (params.W_ir, dims.rproj_dim),
        (params.W_fr, dims.rproj_dim),
        (params.W_cr, dims.rproj_dim),
        (params.W_or, dims.rproj_dim),
        (params.w_ic, 1),
        (params.w_fc, 1),
        (params.w_oc, 1),
        (params.W_rm, dims.cell_dim),
        (params.W_pm, dims.cell_dim),
        (params.W_yr, dims.rproj_dim),
        (params.W_yp, dims.pproj_dim),
    ]
    for view, fan_in in blocks:
        s = 1.0 / np.sqrt(fan_in)
        view.reshape(-1)[:] = rng.uniform_array(view.size, -s, s)
    return params


@dataclass
class CellState:
    """Carried state between steps: cell contents and recurrent projection."""

    c: np.ndarray
    r: np.ndarray


def zero_state(dims):
    return CellState(
        c=np.zeros(dims.cell_dim, dtype=np.float64),
        r=np.zeros(dims.rproj_dim, dtype=np.float64),
    )


@dataclass
class StepCache:
    """Everything cell_backward needs to differentiate one forward step."""

    x: np.ndarray
    c_prev: np.ndarray
    r_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    m: np.ndarray
    r: np.ndarray
    p: np.ndarray
    inj: dict


def _check_injections(inj, cell_dim):
    if inj is None:
        return {}
    clean = {}
    for sink, vec in inj.items():
        if sink not in SINKS:
            raise ValueError(f"unknown injection sink {sink!r}; expected one of {SINKS}")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (cell_dim,):
            raise ValueError(
                f"injection at sink {sink!r} has shape {vec.shape}, cell wants ({cell_dim},)"
            )
        clean[sink] = vec
    return clean


def cell_forward(params, x, state, inj=None):
    """One tower step.

    Gate equations (peepholes are diagonal; o looks at the current cell):

        i = sigmoid(W_ix x + W_ir r_prev + w_ic * c_prev + b_i [+ inj_i])
        f = sigmoid(W_fx x + W_fr r_prev + w_fc * c_prev + b_f [+ inj_f])
        g = tanh   (W_cx x + W_cr r_prev + b_c              [+ inj_g])
        c = f * c_prev + i * g
        o = sigmoid(W_ox x + W_or r_prev + w_oc * c + b_o   [+ inj_o])
        m = o * tanh(c);  r = W_rm m;  p = W_pm m
        pre_y = W_yr r + W_yp p + b_y

    Returns (new_state, m, r, p, pre_y, cache).
    """
    dims = params.dims
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dims.in_dim,):
        raise ValueError(f"input has shape {x.shape}, tower wants ({dims.in_dim},)")
    if state.c.shape != (dims.cell_dim,) or state.r.shape != (dims.rproj_dim,):
        raise ValueError(
            f"state shapes {state.c.shape}/{state.r.shape} do not match dims {dims}"
        )
    inj = _check_injections(inj, dims.cell_dim)
    c_prev, r_prev = state.c, state.r

    zi = matvec(params.W_ix, x) + matvec(params.W_ir, r_prev) + params.w_ic * c_prev + params.b_i
    zf = matvec(params.W_fx, x) + matvec(params.W_fr, r_prev) + params.w_fc * c_prev + params.b_f
    zg = matvec(params.W_cx, x) + matvec(params.W_cr, r_prev) + params.b_c
    if "i" in inj:
        zi = zi + inj["i"]
    if "f" in inj:
        zf = zf + inj["f"]
    if "g" in inj:
        zg = zg + inj["g"]
    i = sigmoid(zi)
    f = sigmoid(zf)
    g = np.tanh(zg)
    c = f * c_prev + i * g
    zo = matvec(params.W_ox, x) + matvec(params.W_or, r_prev) + params.w_oc * c + params.b_o
    if "o" in inj:
        zo = zo + inj["o"]
    o = sigmoid(zo)
    tanh_c = np.tanh(c)
    m = o * tanh_c
    r = matvec(params.W_rm, m)
    p = matvec(params.W_pm, m)
    pre_y = matvec(params.W_yr, r) + matvec(params.W_yp, p) + params.b_y

    cache = StepCache(
        x=x, c_prev=c_prev, r_prev=r_prev,
        i=i, f=f, g=g, o=o, c=c, tanh_c=tanh_c, m=m, r=r, p=p, inj=inj,
    )
    return CellState(c=c, r=r), m, r, p, pre_y, cache


def cell_backward(params, cache, d_state_next=None, d_m=None, d_r=None, d_p=None, d_pre_y=None):
    """Exact gradients of one forward step.

    `d_state_next` carries (dc, dr) flowing back from step t+1; d_m / d_r /
    d_p / d_pre_y are the gradients of the loss w.r.t. this step's own
    outputs (any may be None for zero).

    Returns (grads, d_x, d_state_prev, d_inj) where grads is a CellParams
    holding the per-parameter gradients and d_inj maps each sink to the
    gradient at that sink's pre-activation.
    """
    dims = params.dims
    if cache.x.shape != (dims.in_dim,) or cache.c.shape != (dims.cell_dim,):
        raise ValueError("cache does not match the parameter dimensions")

    c = dims.cell_dim
    zero_c = np.zeros(c, dtype=np.float64)
    dc_next = zero_c if d_state_next is None else np.asarray(d_state_next.c, dtype=np.float64)
    dr_next = (
        np.zeros(dims.rproj_dim, dtype=np.float64)
        if d_state_next is None
        else np.asarray(d_state_next.r, dtype=np.float64)
    )
    dm = np.zeros(c, dtype=np.float64) if d_m is None else np.asarray(d_m, dtype=np.float64)
    dr = np.zeros(dims.rproj_dim, dtype=np.float64) if d_r is None else np.asarray(d_r, dtype=np.float64)
    dp = np.zeros(dims.pproj_dim, dtype=np.float64) if d_p is None else np.asarray(d_p, dtype=np.float64)
    dy = np.zeros(dims.out_dim, dtype=np.float64) if d_pre_y is None else np.asarray(d_pre_y, dtype=np.float64)

    grads = CellParams.zeros(dims)

    # output layer and projections
    grads.W_yr += np.outer(dy, cache.r)
    grads.W_yp += np.outer(dy, cache.p)
    grads.b_y += dy
    dr_total = dr + dr_next + params.W_yr.T @ dy
    dp_total = dp + params.W_yp.T @ dy
    grads.W_rm += np.outer(dr_total, cache.m)
    grads.W_pm += np.outer(dp_total, cache.m)
    dm_total = dm + params.W_rm.T @ dr_total + params.W_pm.T @ dp_total

    # gates; note o peeps at the current cell, so its pre-activation gradient
    # feeds back into dc
    do = dm_total * cache.tanh_c
    dzo = do * cache.o * (1.0 - cache.o)
    dc = dc_next + dm_total * cache.o * (1.0 - cache.tanh_c**2) + dzo * params.w_oc
    di = dc * cache.g
    df = dc * cache.c_prev
    dg = dc * cache.i
    dzi = di * cache.i * (1.0 - cache.i)
    dzf = df * cache.f * (1.0 - cache.f)
    dzg = dg * (1.0 - cache.g**2)

    dc_prev = dc * cache.f + dzi * params.w_ic + dzf * params.w_fc

    grads.w_ic += dzi * cache.c_prev
    grads.w_fc += dzf * cache.c_prev
    grads.w_oc += dzo * cache.c
    grads.b_i += dzi
    grads.b_f += dzf
    grads.b_c += dzg
    grads.b_o += dzo
    grads.W_ix += np.outer(dzi, cache.x)
    grads.W_fx += np.outer(dzf, cache.x)
    grads.W_cx += np.outer(dzg, cache.x)
    grads.W_ox += np.outer(dzo, cache.x)
    grads.W_ir += np.outer(dzi, cache.r_prev)
    grads.W_fr += np.outer(dzf, cache.r_prev)
    grads.W_cr += np.outer(dzg, cache.r_prev)
    grads.W_or += np.outer(dzo, cache.r_prev)

    d_x = (
        params.W_ix.T @ dzi
        + params.W_fx.T @ dzf
        + params.W_cx.T @ dzg
        + params.W_ox.T @ dzo
    )
    dr_prev = (
        params.W_ir.T @ dzi
        + params.W_fr.T @ dzf
        + params.W_cr.T @ dzg
        + params.W_or.T @ dzo
    )
    d_inj = {"i": dzi, "f": dzf, "o": dzo, "g": dzg}
    return grads, d_x, CellState(c=dc_prev, r=dr_prev), d_inj


def run_tower_sequence(params, frames):
    """Reference single-tower pass over a whole sequence via cell_forward.

    Returns (logits, r_seq, p_seq) stacked over time. Slow but obviously
    correct; the joint network's fused kernels are tested against it.
    """
    frames = np.asarray(frames, dtype=np.float64)
    dims = params.dims
    state = zero_state(dims)
    logits = np.empty((frames.shape[0], dims.out_dim), dtype=np.float64)
    r_seq = np.empty((frames.shape[0], dims.rproj_dim), dtype=np.float64)
    p_seq = np.empty((frames.shape[0], dims.pproj_dim), dtype=np.float64)
    for t in range(frames.shape[0]):
        state, _, r, p, pre_y, _ = cell_forward(params, frames[t], state)
        logits[t] = pre_y
        r_seq[t] = r
        p_seq[t] = p
    return logits, r_seq, p_seq
