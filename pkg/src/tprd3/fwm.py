"""Fast Weight Memory host model.

An LSTM controller reads the episode stream; each step a component
generator produces two roles, a filler, two unbinding operators (all of
width D_FWM) and a write strength beta = sigmoid(beta_head(h)). The write
is perceptron-style into an order-3 fast-weight tensor F:

    F <- F + beta * outer3(filler - contract3(F, role1, role2), role1, role2)

and the read contracts F with the unbinding operators, normalizes, and
feeds the output head together with h: logits = W_out . concat(h, r).

fwm_step() is the single-example reference path and carries F densely in
an FwmState. run_episodes() is the batched trainer path; it never builds
F, exploiting that F after t writes is a sum of t rank-1 bindings, so any
contraction is a score-weighted sum over stored factors (O(t * D_FWM) per
step instead of O(D_FWM^3)). Both paths compute the same values and a test
pins them together.

Parameters serialize as fwm.lstm.*, fwm.out.*, fwm.beta.*, gen.baseline.*,
d3.*, embed.{x,y}. The read layer-norm is parameter-free (gain 1, bias 0).
"""

from dataclasses import dataclass

import numpy as np

from . import d3 as d3mod
from . import sar
from . import tensor as T
from .errors import ConfigError, DivergenceError
from .rng import STREAM_INIT, make_rng

VARIANTS = ("fwm-baseline", "fwm-d3-woF", "fwm-d3-wF")
COMPONENT_NAMES = ("role1", "role2", "filler", "unbind1", "unbind2")


@dataclass
class FwmConfig:
    d_input: int = sar.INPUT_DIM
    d_lstm: int = 256
    d_fwm: int = 32
    n_reads: int = 1
    n_component_enc: int = 3
    n_component_dec: int = 2
    c: int = 40

    def __post_init__(self):
        if self.n_reads != 1:
            raise ConfigError("only n_reads=1 (single-hop read) is supported")
        if self.n_component_enc != 3 or self.n_component_dec != 2:
            raise ConfigError("component layout is fixed at 3 enc + 2 dec")
        for name in ("d_input", "d_lstm", "d_fwm", "c"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class FwmState:
    h: object  # Tensor (d_lstm,)
    c: object  # Tensor (d_lstm,)
    F: object  # Tensor (d_fwm, d_fwm, d_fwm)


class BaselineGenerator:
    """All five components from one tanh affine of h."""

    variant = "baseline-linear"

    def __init__(self, rng, d_lstm, d_fwm):
        self.d_fwm = d_fwm
        self.w, self.b = T.init_affine(rng, d_lstm, 5 * d_fwm)
        self.d3_layer = None

    def params(self):
        return {"gen.baseline.w": self.w, "gen.baseline.b": self.b}

    def begin_episode(self, mode, rng=None, usage=None):
        pass

    def step(self, h, record=None):
        out = T.tanh(T.affine(h, self.w, self.b))
        comps = {}
        for i, name in enumerate(COMPONENT_NAMES):
            comps[name] = T.slice_cols(out, i * self.d_fwm, (i + 1) * self.d_fwm)
        if record is not None:
            record["component"] = {k: v.array.copy() for k, v in comps.items()}
        return comps

    def step_single(self, h, mode, rng=None, record=None):
        return self.step(h, record)


class D3Generator:
    """Roles and unbinding operators through the D3 layer; the filler either
    through D3 too (w/ F: five components, three groups) or through a
    baseline tanh affine (w/o F: four components, two groups)."""

    def __init__(self, rng, d_lstm, d_fwm, d3_config):
        if d3_config.d_component != d_fwm:
            raise ConfigError(
                f"d3 d_component={d3_config.d_component} must equal d_fwm={d_fwm}")
        self.with_filler = d3_config.apply_to_filler
        self.variant = "d3-w/F" if self.with_filler else "d3-w/oF"
        if self.with_filler:
            comps = [("role1", 0), ("role2", 1), ("filler", 2), ("unbind1", 0), ("unbind2", 1)]
        else:
            comps = [("role1", 0), ("role2", 1), ("unbind1", 0), ("unbind2", 1)]
        self.d3_layer = d3mod.D3Layer(rng, d_lstm, d3_config, comps)
        if not self.with_filler:
            self.fw, self.fb = T.init_affine(rng, d_lstm, d_fwm)
        self._session = None

    def params(self):
        out = dict(self.d3_layer.params())
        if not self.with_filler:
            out["gen.baseline.w"] = self.fw
            out["gen.baseline.b"] = self.fb
        return out

    def begin_episode(self, mode, rng=None, usage=None):
        self._session = d3mod.D3Session(self.d3_layer, mode, rng, usage)

    def step(self, h, record=None):
        if self._session is None:
            raise ConfigError("generator step before begin_episode")
        outs = self._session.components(h, record)
        return self._finish(h, outs, record)

    def step_single(self, h, mode, rng=None, record=None):
        outs = d3mod.decompose(self.d3_layer, h, mode, rng, record)
        return self._finish(h, outs, record)

    def _finish(self, h, outs, record):
        names = [name for name, _ in self.d3_layer.components]
        comps = dict(zip(names, outs))
        if not self.with_filler:
            comps["filler"] = T.tanh(T.affine(h, self.fw, self.fb))
            if record is not None:
                record.setdefault("component", {})["filler"] = comps["filler"].array.copy()
        return comps


class FactorMemory:
    """Batched fast-weight memory as a growing list of rank-1 bindings.

    Buffers are preallocated for the episode; row s of each buffer is
    immutable once appended, so backward closures may hold views into them.

    Factor gradients are staged in shared pending buffers rather than
    accumulated tensor-by-tensor in every read's backward. Each recorded
    read claims the factors it is the earliest-created reader of; since the
    tape runs newest-first, by the time that read's backward fires every
    other reader of those factors has already contributed, so it can flush
    their pending rows into the factor tensors in one place. Reads are
    recorded in creation order and later reads always cover earlier
    factors, which is what makes the claim ranges well-defined.
    """

    def __init__(self, t_max, batch, d):
        self.c_buf = np.empty((t_max, batch, d))
        self.r1_buf = np.empty((t_max, batch, d))
        self.r2_buf = np.empty((t_max, batch, d))
        self.tensors = []
        self.batch = batch
        self.d = d
        self._claimed = 0  # factors [0, _claimed) already owned by a read node
        self._pend = None  # (pC, pR1, pR2) staged factor grads, lazily allocated

    def append(self, c_t, r1_t, r2_t):
        s = len(self.tensors)
        self.c_buf[s] = c_t.array
        self.r1_buf[s] = r1_t.array
        self.r2_buf[s] = r2_t.array
        self.tensors.append((c_t, r1_t, r2_t))

    def read(self, u1, u2):
        """contract3(F, u1, u2) without F: sum_s c_s (r1_s.u1)(r2_s.u2)."""
        s = len(self.tensors)
        if s == 0:
            return T.constant(np.zeros((self.batch, self.d)))
        C = self.c_buf[:s]
        R1 = self.r1_buf[:s]
        R2 = self.r2_buf[:s]
        # overflow here surfaces as non-finite reads; the step loop checks
        with np.errstate(over="ignore", invalid="ignore"):
            a = np.einsum("sbd,bd->sb", R1, u1.array)
            g2 = np.einsum("sbd,bd->sb", R2, u2.array)
            w = a * g2
        rg = u1.requires_grad or u2.requires_grad or any(
            ct.requires_grad or r1t.requires_grad or r2t.requires_grad
            for ct, r1t, r2t in self.tensors)
        out = T.Tensor(np.einsum("sbd,sb->bd", C, w), requires_grad=rg)
        factors = list(self.tensors)
        flush_lo, flush_hi = self._claimed, s
        if rg and T.tape_active():
            self._claimed = max(self._claimed, s)

        def bwd(g):
            dw = np.einsum("bd,sbd->sb", g, C)
            da = dw * g2
            dg2 = dw * a
            if u1.requires_grad:
                u1.accum_grad(np.einsum("sb,sbd->bd", da, R1), own=True)
            if u2.requires_grad:
                u2.accum_grad(np.einsum("sb,sbd->bd", dg2, R2), own=True)
            if self._pend is None:
                self._pend = (np.zeros_like(self.c_buf),
                              np.zeros_like(self.r1_buf),
                              np.zeros_like(self.r2_buf))
            pC, pR1, pR2 = self._pend
            pC[:s] += np.einsum("bd,sb->sbd", g, w)
            pR1[:s] += np.einsum("sb,bd->sbd", da, u1.array)
            pR2[:s] += np.einsum("sb,bd->sbd", dg2, u2.array)
            for j in range(flush_lo, flush_hi):
                ct, r1t, r2t = factors[j]
                if ct.requires_grad:
                    ct.accum_grad(pC[j], own=False)
                if r1t.requires_grad:
                    r1t.accum_grad(pR1[j], own=False)
                if r2t.requires_grad:
                    r2t.accum_grad(pR2[j], own=False)

        return T.record(out, bwd)

    def dense(self):
        """Materialize F (batch, d, d, d); for inspection and tests only."""
        s = len(self.tensors)
        F = np.zeros((self.batch, self.d, self.d, self.d))
        if s:
            F += np.einsum("sbi,sbj,sbk->bijk", self.c_buf[:s], self.r1_buf[:s], self.r2_buf[:s])
        return F


def _lstm_cell(gates, c_prev, dl):
    """Fused LSTM cell: pre-activation gates (B, 4*dl) in [i|f|o|g] order and
    previous cell state (B, dl) -> one (B, 2*dl) tensor laid out [h|c].

    One tape node per step instead of a dozen; the composed-op cell in
    FwmModel._lstm is the reference this is tested against.
    """
    ga = gates.array
    sg = T.sigmoid_arr(ga[:, :3 * dl])
    i = sg[:, :dl]
    f = sg[:, dl:2 * dl]
    o = sg[:, 2 * dl:]
    g = T.tanh_arr(ga[:, 3 * dl:])
    c_new = f * c_prev.array + i * g
    tc = T.tanh_arr(c_new)
    hc = np.empty((ga.shape[0], 2 * dl))
    hc[:, :dl] = o * tc
    hc[:, dl:] = c_new
    out = T.Tensor(hc, requires_grad=gates.requires_grad or c_prev.requires_grad)

    def bwd(gr):
        dh = gr[:, :dl]
        dc = dh * (o * (1.0 - tc * tc))
        dc += gr[:, dl:]
        dgates = np.empty_like(ga)
        dgates[:, :dl] = dc * g * (i * (1.0 - i))
        dgates[:, dl:2 * dl] = dc * c_prev.array * (f * (1.0 - f))
        dgates[:, 2 * dl:3 * dl] = dh * tc * (o * (1.0 - o))
        dgates[:, 3 * dl:] = dc * i * (1.0 - g * g)
        if gates.requires_grad:
            gates.accum_grad(dgates, own=True)
        if c_prev.requires_grad:
            c_prev.accum_grad(dc * f, own=True)

    return T.record(out, bwd)


class FwmModel:
    def __init__(self, config, vocab, gen, rng, flag_mode="constant"):
        self.config = config
        self.vocab = vocab
        self.gen = gen
        self.flag_mode = flag_mode
        d = config.d_fwm
        self.lstm_wx, self.lstm_b = T.init_affine(rng, config.d_input, 4 * config.d_lstm)
        self.lstm_wh, _ = T.init_affine(rng, config.d_lstm, 4 * config.d_lstm)
        self.lstm_b.array[config.d_lstm:2 * config.d_lstm] = 1.0  # forget-gate bias
        self.out_w, self.out_b = T.init_affine(rng, config.d_lstm + d, config.c)
        self.beta_w, self.beta_b = T.init_affine(rng, config.d_lstm, 1)
        # start with gentle writes: an untrained beta of 0.5 lets every
        # zero-information inference step half-erase the binding it queries
        self.beta_b.array[:] = -1.0
        self._ln_g = T.constant(np.ones(d))
        self._ln_b = T.constant(np.zeros(d))

    def params(self):
        out = {
            "fwm.lstm.w_x": self.lstm_wx,
            "fwm.lstm.w_h": self.lstm_wh,
            "fwm.lstm.b": self.lstm_b,
            "fwm.out.w": self.out_w,
            "fwm.out.b": self.out_b,
            "fwm.beta.w": self.beta_w,
            "fwm.beta.b": self.beta_b,
            "embed.x": self.vocab.x_embed,
            "embed.y": self.vocab.y_embed,
        }
        out.update(self.gen.params())
        return out

    def load_arrays(self, arrays):
        params = self.params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            if arrays[name].shape != p.array.shape:
                raise ConfigError(
                    f"checkpoint shape for {name}: {arrays[name].shape} != {p.array.shape}")
            p.array[:] = arrays[name]

    def init_state(self):
        d, dl = self.config.d_fwm, self.config.d_lstm
        return FwmState(
            h=T.constant(np.zeros(dl)),
            c=T.constant(np.zeros(dl)),
            F=T.constant(np.zeros((d, d, d))),
        )

    def _lstm(self, x_row, h_row, c_row):
        """Reference cell from composed primitive ops (single-example path).
        Gate blocks are laid out [i|f|o|g] so the batched cell can run one
        sigmoid over the first three."""
        dl = self.config.d_lstm
        gates = T.add_bias(T.add(T.matmul(x_row, self.lstm_wx),
                                 T.matmul(h_row, self.lstm_wh)), self.lstm_b)
        i = T.sigmoid(T.slice_cols(gates, 0, dl))
        f = T.sigmoid(T.slice_cols(gates, dl, 2 * dl))
        o = T.sigmoid(T.slice_cols(gates, 2 * dl, 3 * dl))
        g = T.tanh(T.slice_cols(gates, 3 * dl, 4 * dl))
        c2 = T.add(T.mul(f, c_row), T.mul(i, g))
        h2 = T.mul(o, T.tanh(c2))
        return h2, c2


def fwm_step(model, state, input_t, mode, rng=None, timestep=-1, record=None):
    """Single-example reference step on a dense FwmState. Returns
    (new_state, logits). See run_episodes for the batched trainer path."""
    cfg = model.config
    if input_t.shape != (cfg.d_input,):
        raise ConfigError(f"input shape {input_t.shape} != ({cfg.d_input},)")
    x_row = T.reshape(input_t, (1, cfg.d_input))
    h_row = T.reshape(state.h, (1, cfg.d_lstm))
    c_row = T.reshape(state.c, (1, cfg.d_lstm))
    h2, c2 = model._lstm(x_row, h_row, c_row)
    comps = model.gen.step_single(h2, mode, rng, record)
    beta = T.sigmoid(T.affine(h2, model.beta_w, model.beta_b))  # (1,1)
    d = cfg.d_fwm
    role1 = T.reshape(comps["role1"], (d,))
    role2 = T.reshape(comps["role2"], (d,))
    v_old = T.contract3(state.F, role1, role2)
    delta = T.sub(T.reshape(comps["filler"], (d,)), v_old)
    scaled = T.reshape(T.rowscale(T.reshape(delta, (1, d)), beta), (d,))
    f2 = T.add_outer3(state.F, scaled, role1, role2)
    if not np.isfinite(f2.array).all():
        raise DivergenceError(timestep, "non-finite fast-weight entries")
    r_pre = T.contract3(f2, T.reshape(comps["unbind1"], (d,)), T.reshape(comps["unbind2"], (d,)))
    r_row = T.layer_norm(T.reshape(r_pre, (1, d)), model._ln_g, model._ln_b)
    logits = T.affine(T.concat([h2, r_row], axis=1), model.out_w, model.out_b)
    state2 = FwmState(h=T.reshape(h2, (cfg.d_lstm,)), c=T.reshape(c2, (cfg.d_lstm,)), F=f2)
    return state2, T.reshape(logits, (cfg.c,))


def _episode_inputs(model, episodes):
    """Stacked step-major input matrix (2*L*B, d_input) for equal-length
    episodes; step t occupies rows [t*B, (t+1)*B)."""
    vocab = model.vocab
    B = len(episodes)
    L = len(episodes[0].discovery)
    for ep in episodes:
        if len(ep.discovery) != L or len(ep.inference) != L:
            raise ConfigError("batched episodes must have equal length")
    disc_x = np.array([[ep.discovery[t][0] for ep in episodes] for t in range(L)])
    disc_y = np.array([[ep.discovery[t][1] for ep in episodes] for t in range(L)])
    inf_x = np.array([[ep.inference[t] for ep in episodes] for t in range(L)])
    targets = np.array([[ep.targets[t] for ep in episodes] for t in range(L)])

    all_x = np.concatenate([disc_x.ravel(), inf_x.ravel()])
    xemb = T.take_rows(vocab.x_embed, all_x)
    yemb_disc = T.take_rows(vocab.y_embed, disc_y.ravel())
    yemb = T.concat([yemb_disc, T.constant(np.zeros((L * B, sar.EMBED_DIM)))], axis=0)
    flags = np.zeros((2 * L * B, sar.N_FLAGS))
    for t in range(2 * L):
        phase = "discovery" if t < L else "inference"
        fd, fi = sar.flag_array(phase, t % L, model.flag_mode)
        flags[t * B:(t + 1) * B, 0] = fd
        flags[t * B:(t + 1) * B, 1] = fi
    x_all = T.concat([xemb, yemb, T.constant(flags)], axis=1)
    return x_all, targets, L, B


def run_episodes(model, episodes, mode, rng=None, record=None, usage=None):
    """Batched episode pass. Returns (loss Tensor, predictions (B, L) ints).

    record, when a list, receives one dict per timestep with the generator's
    captured per-component arrays. usage, when a dict of group -> int64
    histogram, accumulates codebook selection counts.
    """
    cfg = model.config
    dl = cfg.d_lstm
    x_all, targets, L, B = _episode_inputs(model, episodes)
    xproj = T.add_bias(T.matmul(x_all, model.lstm_wx), model.lstm_b)
    seq_wh = T.SeqAffine(model.lstm_wh)
    seq_beta = T.SeqAffine(model.beta_w, model.beta_b)
    h = T.constant(np.zeros((B, dl)))
    c = T.constant(np.zeros((B, dl)))
    mem = FactorMemory(2 * L, B, cfg.d_fwm)
    model.gen.begin_episode(mode, rng, usage)
    h_inf, r_inf = [], []
    for t in range(2 * L):
        xp = T.slice_rows(xproj, t * B, (t + 1) * B)
        hc = _lstm_cell(seq_wh.apply(h, add=xp), c, dl)
        h = T.slice_cols(hc, 0, dl)
        c = T.slice_cols(hc, dl, 2 * dl)
        if not np.isfinite(h.array).all():
            raise DivergenceError(t, "non-finite controller state")
        step_record = {} if record is not None else None
        comps = model.gen.step(h, step_record)
        if record is not None:
            record.append(step_record)
        beta = T.sigmoid(seq_beta.apply(h))
        v_old = mem.read(comps["role1"], comps["role2"])
        delta = T.sub(comps["filler"], v_old)
        c_t = T.rowscale(delta, beta)
        if not np.isfinite(c_t.array).all():
            raise DivergenceError(t, "non-finite fast-weight entries")
        mem.append(c_t, comps["role1"], comps["role2"])
        if t >= L:  # the head only sees inference steps; skip unused reads
            r_pre = mem.read(comps["unbind1"], comps["unbind2"])
            if not np.isfinite(r_pre.array).all():
                raise DivergenceError(t, "non-finite fast-weight read")
            h_inf.append(h)
            r_inf.append(T.layer_norm(r_pre, model._ln_g, model._ln_b))
    hr = T.concat([T.concat(h_inf, axis=0), T.concat(r_inf, axis=0)], axis=1)
    logits = T.affine(hr, model.out_w, model.out_b)  # (L*B, c)
    losses = T.cross_entropy_rows(logits, targets.ravel())
    loss = T.tmean(losses)
    preds = np.argmax(logits.array, axis=1).reshape(L, B).T
    return loss, preds


def run_episode(model, episode, mode, rng=None, record=None, usage=None):
    """Single-episode convenience wrapper: (scalar loss, list of predictions)."""
    loss, preds = run_episodes(model, [episode], mode, rng, record, usage)
    return loss, preds[0].tolist()


def make_model(vocab, variant, rng=None, seed=0, d3_config=None, d_lstm=256,
               d_fwm=32, flag_mode="constant"):
    """Build a model for one of the three variants with fresh parameters."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if rng is None:
        rng = make_rng(seed, STREAM_INIT)
    cfg = FwmConfig(d_lstm=d_lstm, d_fwm=d_fwm, c=vocab.n_classes)
    if variant == "fwm-baseline":
        gen = BaselineGenerator(rng, d_lstm, d_fwm)
    else:
        if d3_config is None:
            d3_config = d3mod.D3Config(d_component=d_fwm,
                                       apply_to_filler=(variant == "fwm-d3-wF"))
        if d3_config.apply_to_filler != (variant == "fwm-d3-wF"):
            raise ConfigError("d3 apply_to_filler flag contradicts model variant")
        gen = D3Generator(rng, d_lstm, d_fwm, d3_config)
    return FwmModel(cfg, vocab, gen, rng, flag_mode)
