"""Two towers over one input stream, coupled by cross-task recurrent feedback.

The content tower (asr) predicts a phone class per frame; the speaker tower
(sre) predicts the utterance's speaker per frame. Both towers read the same
spliced feature frames. When feedback is configured, each tower's previous
step projections (r and/or p) are multiplied by a dedicated weight matrix and
added into chosen pre-activation sites (i, f, o, g) of the other tower at the
current step. With no feedback configured, or with all cross matrices zero,
the towers are exactly independent.

Sequence kernels here are fused for speed (stacked gate weights, whole
sequence matrix products); they are tested against the per-step reference in
`cell` and against central finite differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .cell import CellDims, CellParams, init_cell_params
from .numerics import sigmoid, softmax_xent_rows

SOURCES_ORDER = ("r", "p")
SINKS_ORDER = ("i", "f", "o", "g")
DIRECTIONS = ("sre_to_asr", "asr_to_sre")

# row-block index of each sink inside the fused pre-activation vector
_SLOT = {"i": 0, "f": 1, "g": 2, "o": 3}


@dataclass(frozen=True)
class FeedbackConfig:
    """Which projections feed which pre-activation sites of the partner tower.

    `sources` is a subset of ("r", "p"), `sinks` a subset of ("i", "f", "o",
    "g"); both empty means no coupling at all (the baseline). The structure is
    symmetric: the same sources and sinks apply in both directions.
    """

    sources: tuple = ()
    sinks: tuple = ()

    def __post_init__(self):
        sources = tuple(s for s in SOURCES_ORDER if s in self.sources)
        sinks = tuple(s for s in SINKS_ORDER if s in self.sinks)
        if set(self.sources) - set(SOURCES_ORDER):
            raise ValueError(f"unknown feedback sources in {self.sources!r}")
        if set(self.sinks) - set(SINKS_ORDER):
            raise ValueError(f"unknown feedback sinks in {self.sinks!r}")
        if bool(sources) != bool(sinks):
            raise ValueError("sources and sinks must be both empty or both non-empty")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "sinks", sinks)

    @classmethod
    def parse(cls, sources, sinks):
        """Build from compact strings like "rp" / "r,p" and "ifog" / "i,f"."""

        def split(text):
            text = (text or "").strip()
            if "," in text or "+" in text:
                parts = [p.strip() for p in text.replace("+", ",").split(",")]
                return tuple(p for p in parts if p)
            return tuple(text)

        return cls(sources=split(sources), sinks=split(sinks))

    @property
    def is_baseline(self):
        return not self.sources

    @property
    def sources_label(self):
        return "".join(self.sources)

    @property
    def sinks_label(self):
        return "".join(self.sinks)

    def label(self):
        if self.is_baseline:
            return "baseline"
        return f"{{{self.sources_label}}}->{{{self.sinks_label}}}"


def cross_keys(config):
    """Canonical order of all cross-weight matrices for a config."""
    return [
        (direction, sink, source)
        for direction in DIRECTIONS
        for sink in config.sinks
        for source in config.sources
    ]


def _cross_shape(key, dims_asr, dims_sre):
    direction, _, source = key
    recv = dims_asr if direction == "sre_to_asr" else dims_sre
    send = dims_sre if direction == "sre_to_asr" else dims_asr
    src_dim = send.rproj_dim if source == "r" else send.pproj_dim
    return (recv.cell_dim, src_dim)


class JointModel:
    """Both towers plus the cross-feedback matrices and the content delay."""

    def __init__(self, asr, sre, config, cross, delay):
        if asr.dims.in_dim != sre.dims.in_dim:
            raise ValueError(
                f"towers disagree on input dim: {asr.dims.in_dim} vs {sre.dims.in_dim}"
            )
        if delay < 0:
            raise ValueError(f"delay must be >= 0, got {delay}")
        expected = cross_keys(config)
        if sorted(cross.keys()) != sorted(expected):
            raise ValueError(
                f"cross matrices {sorted(cross.keys())} do not match config {expected}"
            )
        for key in expected:
            shape = _cross_shape(key, asr.dims, sre.dims)
            if cross[key].shape != shape:
                raise ValueError(f"cross matrix {key} has {cross[key].shape}, wants {shape}")
        self.asr = asr
        self.sre = sre
        self.config = config
        self.cross = cross
        self.delay = int(delay)

    def iter_arrays(self):
        """Fixed traversal order of every parameter array (towers, then cross)."""
        yield "asr", self.asr.flat
        yield "sre", self.sre.flat
        for key in cross_keys(self.config):
            yield "cross:" + "/".join(key), self.cross[key]

    def param_count(self):
        return sum(arr.size for _, arr in self.iter_arrays())

    def copy(self):
        return JointModel(
            asr=self.asr.copy(),
            sre=self.sre.copy(),
            config=self.config,
            cross={k: v.copy() for k, v in self.cross.items()},
            delay=self.delay,
        )


def init_joint_model(dims_asr, dims_sre, config, delay, rng):
    """Initialize both towers from `rng`; all cross matrices start at zero.

    Zero cross weights make a fresh joint model function-identical to its two
    towers run independently, so every feedback variant starts training from
    exactly the baseline behaviour, and the tower draws do not depend on the
    feedback config.
    """
    asr = init_cell_params(dims_asr, rng)
    sre = init_cell_params(dims_sre, rng)
    cross = {
        key: np.zeros(_cross_shape(key, dims_asr, dims_sre), dtype=np.float64)
        for key in cross_keys(config)
    }
    return JointModel(asr=asr, sre=sre, config=config, cross=cross, delay=delay)


@dataclass
class JointGrads:
    """Gradient (or velocity) arrays mirroring a JointModel's parameters."""

    asr: CellParams
    sre: CellParams
    cross: dict
    config: FeedbackConfig

    @classmethod
    def zeros_like(cls, model):
        return cls(
            asr=CellParams.zeros(model.asr.dims),
            sre=CellParams.zeros(model.sre.dims),
            cross={k: np.zeros_like(v) for k, v in model.cross.items()},
            config=model.config,
        )

    def iter_arrays(self):
        yield "asr", self.asr.flat
        yield "sre", self.sre.flat
        for key in cross_keys(self.config):
            yield "cross:" + "/".join(key), self.cross[key]

    def add_(self, other):
        for (_, mine), (_, theirs) in zip(self.iter_arrays(), other.iter_arrays()):
            mine += theirs
        return self

    def scale_(self, factor):
        for _, arr in self.iter_arrays():
            arr *= factor
        return self


@dataclass
class TowerTrace:
    """Per-frame forward quantities of one tower, stacked over time."""

    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    m: np.ndarray
    r: np.ndarray
    p: np.ndarray


@dataclass
class SequenceCache:
    """Everything backward_sequence needs for one utterance."""

    frames: np.ndarray
    asr: TowerTrace
    sre: TowerTrace
    config: FeedbackConfig = field(default_factory=FeedbackConfig)


def _alloc_trace(T, dims):
    c, r, p = dims.cell_dim, dims.rproj_dim, dims.pproj_dim
    return TowerTrace(
        i=np.empty((T, c)), f=np.empty((T, c)), g=np.empty((T, c)), o=np.empty((T, c)),
        c=np.empty((T, c)), tanh_c=np.empty((T, c)), m=np.empty((T, c)),
        r=np.empty((T, r)), p=np.empty((T, p)),
    )


def forward_sequence(model, frames):
    """Run both coupled towers over a whole utterance.

    Frames perturbed at time t can only influence outputs at times >= t, and
    cross information used at time t is strictly the partner's step t-1
    projections (zero at t=0).

    Returns (asr_logits, sre_logits, cache) with logits shaped (T, out_dim).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"frames must be a non-empty (T, in_dim) array, got {frames.shape}")
    if frames.shape[1] != model.asr.dims.in_dim:
        raise ValueError(
            f"frames have dim {frames.shape[1]}, towers want {model.asr.dims.in_dim}"
        )
    T = frames.shape[0]
    towers = (model.asr, model.sre)
    traces = tuple(_alloc_trace(T, tw.dims) for tw in towers)

    # input contributions for the whole sequence at once
    zx_all = tuple(frames @ tw.W_zx.T + tw.b_z for tw in towers)

    # feedback plan per receiving tower: (sink slot, weight, sender idx, source)
    plans = ([], [])
    for direction, sink, source in cross_keys(model.config):
        recv = 0 if direction == "sre_to_asr" else 1
        plans[recv].append((_SLOT[sink], model.cross[(direction, sink, source)], 1 - recv, source))

    c_prev = [np.zeros(tw.dims.cell_dim) for tw in towers]
    r_prev = [np.zeros(tw.dims.rproj_dim) for tw in towers]
    for t in range(T):
        for k, tw in enumerate(towers):
            tr = traces[k]
            cdim = tw.dims.cell_dim
            if t == 0:
                z = zx_all[k][0].copy()
            else:
                z = zx_all[k][t] + tw.W_zr @ r_prev[k]
                for slot, weight, sender, source in plans[k]:
                    src = traces[sender].r[t - 1] if source == "r" else traces[sender].p[t - 1]
                    z[slot * cdim : (slot + 1) * cdim] += weight @ src
            cp = c_prev[k]
            i = sigmoid(z[0:cdim] + tw.w_ic * cp)
            f = sigmoid(z[cdim : 2 * cdim] + tw.w_fc * cp)
            g = np.tanh(z[2 * cdim : 3 * cdim])
            c = f * cp + i * g
            o = sigmoid(z[3 * cdim : 4 * cdim] + tw.w_oc * c)
            tanh_c = np.tanh(c)
            m = o * tanh_c
            tr.i[t] = i
            tr.f[t] = f
            tr.g[t] = g
            tr.o[t] = o
            tr.c[t] = c
            tr.tanh_c[t] = tanh_c
            tr.m[t] = m
            tr.r[t] = tw.W_rm @ m
            tr.p[t] = tw.W_pm @ m
            c_prev[k] = c
        # projections only become visible to the partner at t+1
        r_prev = [traces[0].r[t], traces[1].r[t]]

    asr_logits = traces[0].r @ model.asr.W_yr.T + traces[0].p @ model.asr.W_yp.T + model.asr.b_y
    sre_logits = traces[1].r @ model.sre.W_yr.T + traces[1].p @ model.sre.W_yp.T + model.sre.b_y
    cache = SequenceCache(frames=frames, asr=traces[0], sre=traces[1], config=model.config)
    return asr_logits, sre_logits, cache


def joint_loss(asr_logits, sre_logits, phone_labels, speaker_label, delay):
    """Summed per-frame cross-entropy of both tasks, equally weighted.

    The content loss scores frame t >= delay against phone label t - delay
    (the first `delay` frames are masked out); the speaker loss scores every
    frame against the single utterance speaker. Both are means over their
    scored frames.

    Returns (loss, d_asr_logits, d_sre_logits).
    """
    asr_logits = np.asarray(asr_logits, dtype=np.float64)
    sre_logits = np.asarray(sre_logits, dtype=np.float64)
    phone_labels = np.asarray(phone_labels, dtype=np.int64)
    T = asr_logits.shape[0]
    if sre_logits.shape[0] != T or phone_labels.shape != (T,):
        raise ValueError("logit and label streams must share the frame count")
    if delay < 0 or delay >= T:
        raise ValueError(f"delay {delay} leaves no scorable content frame in {T}")
    scored = T - delay

    asr_losses, asr_grads = softmax_xent_rows(asr_logits[delay:], phone_labels[:scored])
    d_asr = np.zeros_like(asr_logits)
    d_asr[delay:] = asr_grads / scored

    spk = np.full(T, int(speaker_label), dtype=np.int64)
    sre_losses, sre_grads = softmax_xent_rows(sre_logits, spk)
    d_sre = sre_grads / T

    loss = asr_losses.mean() + sre_losses.mean()
    return loss, d_asr, d_sre


def backward_sequence(model, cache, d_asr_logits, d_sre_logits):
    """Exact reverse sweep through both coupled towers.

    At each step the gradient at a receiving sink's pre-activation both
    accumulates into that cross matrix (outer product with the sender's t-1
    projection) and flows into the sender tower's own backward pass at t-1.

    Returns a JointGrads with gradients for every parameter of the model.
    """
    frames = cache.frames
    T = frames.shape[0]
    towers = (model.asr, model.sre)
    traces = (cache.asr, cache.sre)
    if cache.config != model.config:
        raise ValueError("cache was produced under a different feedback config")
    for tw, tr in zip(towers, traces):
        if tr.c.shape != (T, tw.dims.cell_dim):
            raise ValueError("cache does not match the model dimensions")
    d_logits = (
        np.asarray(d_asr_logits, dtype=np.float64),
        np.asarray(d_sre_logits, dtype=np.float64),
    )
    for k, tw in enumerate(towers):
        if d_logits[k].shape != (T, tw.dims.out_dim):
            raise ValueError(f"output gradients for tower {k} have {d_logits[k].shape}")

    grads = JointGrads.zeros_like(model)
    gparams = (grads.asr, grads.sre)

    # output layer is not recurrent: handle it for the whole sequence up front
    d_r_from_y = []
    d_p_from_y = []
    for k, tw in enumerate(towers):
        dy = d_logits[k]
        tr = traces[k]
        gparams[k].W_yr[:] = dy.T @ tr.r
        gparams[k].W_yp[:] = dy.T @ tr.p
        gparams[k].b_y[:] = dy.sum(axis=0)
        d_r_from_y.append(dy @ tw.W_yr)
        d_p_from_y.append(dy @ tw.W_yp)

    plans = ([], [])
    for direction, sink, source in cross_keys(model.config):
        recv = 0 if direction == "sre_to_asr" else 1
        key = (direction, sink, source)
        plans[recv].append((_SLOT[sink], model.cross[key], 1 - recv, source, key))

    dz_all = tuple(np.empty((T, 4 * tw.dims.cell_dim)) for tw in towers)
    dr_all = tuple(np.empty((T, tw.dims.rproj_dim)) for tw in towers)
    dp_all = tuple(np.empty((T, tw.dims.pproj_dim)) for tw in towers)

    carry_c = [np.zeros(tw.dims.cell_dim) for tw in towers]
    carry_r = [np.zeros(tw.dims.rproj_dim) for tw in towers]
    carry_p = [np.zeros(tw.dims.pproj_dim) for tw in towers]
    for t in range(T - 1, -1, -1):
        next_c = [None, None]
        next_r = [np.zeros(tw.dims.rproj_dim) for tw in towers]
        next_p = [np.zeros(tw.dims.pproj_dim) for tw in towers]
        for k, tw in enumerate(towers):
            tr = traces[k]
            cdim = tw.dims.cell_dim
            dr_tot = d_r_from_y[k][t] + carry_r[k]
            dp_tot = d_p_from_y[k][t] + carry_p[k]
            dr_all[k][t] = dr_tot
            dp_all[k][t] = dp_tot
            dm = tw.W_rm.T @ dr_tot + tw.W_pm.T @ dp_tot
            i, f, g, o = tr.i[t], tr.f[t], tr.g[t], tr.o[t]
            tc = tr.tanh_c[t]
            do = dm * tc
            dzo = do * o * (1.0 - o)
            dc = carry_c[k] + dm * o * (1.0 - tc**2) + dzo * tw.w_oc
            c_prev = tr.c[t - 1] if t > 0 else 0.0
            dzi = (dc * g) * i * (1.0 - i)
            dzf = (dc * c_prev) * f * (1.0 - f)
            dzg = (dc * i) * (1.0 - g**2)
            dz = dz_all[k][t]
            dz[0:cdim] = dzi
            dz[cdim : 2 * cdim] = dzf
            dz[2 * cdim : 3 * cdim] = dzg
            dz[3 * cdim : 4 * cdim] = dzo
            next_c[k] = dc * f + dzi * tw.w_ic + dzf * tw.w_fc
            if t > 0:
                next_r[k] += tw.W_zr.T @ dz
                for slot, weight, sender, source, _ in plans[k]:
                    d_src = weight.T @ dz[slot * cdim : (slot + 1) * cdim]
                    if source == "r":
                        next_r[sender] += d_src
                    else:
                        next_p[sender] += d_src
        carry_c, carry_r, carry_p = next_c, next_r, next_p

    for k, tw in enumerate(towers):
        tr = traces[k]
        cdim = tw.dims.cell_dim
        dz = dz_all[k]
        gp = gparams[k]
        gp.W_zx[:] = dz.T @ frames
        gp.b_z[:] = dz.sum(axis=0)
        gp.w_oc[:] = (dz[:, 3 * cdim :] * tr.c).sum(axis=0)
        if T > 1:
            gp.W_zr[:] = dz[1:].T @ tr.r[:-1]
            gp.w_ic[:] = (dz[1:, 0:cdim] * tr.c[:-1]).sum(axis=0)
            gp.w_fc[:] = (dz[1:, cdim : 2 * cdim] * tr.c[:-1]).sum(axis=0)
        gp.W_rm[:] = dr_all[k].T @ tr.m
        gp.W_pm[:] = dp_all[k].T @ tr.m
        if T > 1:
            for slot, _, sender, source, key in plans[k]:
                src = traces[sender].r if source == "r" else traces[sender].p
                grads.cross[key][:] = dz[1:, slot * cdim : (slot + 1) * cdim].T @ src[:-1]
    return grads
