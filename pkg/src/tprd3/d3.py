"""Discrete dictionary-based decomposition (D3) layer.

Each component j owns a query network (affine + layer norm + dropout) that
maps the host state to a query. The query scores an L2-normalized codebook
of keys, the top-k keys are kept, their scores softmax to weights, and the
weighted sum of the paired values is the code. A shared residual projection
of the query is added, and a shared final projection emits the component.

Components that must stay exchangeable at read time (a role and its paired
unbinding operator) point at the same dictionary group; distinct groups are
fully disjoint parameter sets. The residual and final projections are single
instances shared by every component (a per-group variant is available via
ffn_sharing="per_group").

Selection is hard: unselected keys and values receive exactly zero gradient,
and the only gradient path through the scores is the softmax over the k
selected entries.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


@dataclass
class D3Config:
    d_code: int = 32
    n_code: int = 64
    top_k: int = 8
    d_query: int = 0  # 0 means derive d_code // 2
    p_dropout: float = 0.1
    d_component: int = 32
    use_codebook: bool = True
    use_residual: bool = True
    apply_to_filler: bool = False
    ffn_sharing: str = "global"

    def __post_init__(self):
        if self.d_query == 0:
            if self.d_code % 2:
                raise ConfigError(f"d_query defaults to d_code/2 but d_code={self.d_code} is odd")
            self.d_query = self.d_code // 2
        for name in ("d_code", "n_code", "top_k", "d_query", "d_component"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.top_k > self.n_code:
            raise ConfigError(f"top_k={self.top_k} exceeds n_code={self.n_code}")
        if not (0.0 <= self.p_dropout < 1.0):
            raise ConfigError(f"p_dropout must be in [0, 1), got {self.p_dropout}")
        if not (self.use_codebook or self.use_residual):
            raise ConfigError("use_codebook and use_residual cannot both be false")
        if self.ffn_sharing not in ("global", "per_group"):
            raise ConfigError(f"ffn_sharing must be 'global' or 'per_group', got {self.ffn_sharing!r}")


class CodebookDictionary:
    def __init__(self, rng, n_code, d_query, d_code):
        self.keys = T.init_normal(rng, (n_code, d_query), 1.0 / np.sqrt(d_query))
        self.values = T.init_normal(rng, (n_code, d_code), 1.0 / np.sqrt(d_code))
        self.collapse_events = 0

    @property
    def n_code(self):
        return self.keys.array.shape[0]

    def normalized_keys(self):
        """Unit-norm key rows; counts near-zero rows as collapse events."""
        norms = np.linalg.norm(self.keys.array, axis=1)
        bad = int((norms < 1e-12).sum())
        if bad:
            self.collapse_events += bad
        return T.row_l2_normalize(self.keys)


class D3Layer:
    """Weights for a fixed list of (component_name, group) slots."""

    def __init__(self, rng, d_input, config, components):
        groups = sorted({g for _, g in components})
        if groups != list(range(len(groups))):
            raise ConfigError(f"dictionary groups must be 0..G-1, got {groups}")
        self.config = config
        self.d_input = d_input
        self.components = list(components)
        self.component_to_group = [g for _, g in components]
        # ablated paths own no parameters, so every parameter the layer
        # exposes receives gradient on every step
        self.dicts = [CodebookDictionary(rng, config.n_code, config.d_query, config.d_code)
                      for _ in groups] if config.use_codebook else []
        self.n_groups = len(groups)
        self.query_w, self.query_b = [], []
        self.ln_g, self.ln_b = [], []
        for _ in components:
            w, b = T.init_affine(rng, d_input, config.d_query)
            self.query_w.append(w)
            self.query_b.append(b)
            self.ln_g.append(T.parameter(np.ones(config.d_query)))
            self.ln_b.append(T.parameter(np.zeros(config.d_query)))
        # components sharing a dictionary start from the same query weights:
        # a role/unbind pair then selects identical codes at step zero, so
        # retrieval begins sign-consistent for every input instead of each
        # input half settling on its own retrieval sign (which fits training
        # yet fails on held-out recombinations). Training diverges them.
        first_in_group = {}
        for j, (_, g) in enumerate(self.components):
            i = first_in_group.setdefault(g, j)
            if i != j:
                self.query_w[j].array[:] = self.query_w[i].array
                self.query_b[j].array[:] = self.query_b[i].array
        n_ffn = len(groups) if config.ffn_sharing == "per_group" else 1
        self.residual_w, self.residual_b = [], []
        self.final_w, self.final_b = [], []
        for _ in range(n_ffn):
            if config.use_residual:
                rw, rb = T.init_affine(rng, config.d_query, config.d_code)
                self.residual_w.append(rw)
                self.residual_b.append(rb)
            fw, fb = T.init_affine(rng, config.d_code, config.d_component)
            self.final_w.append(fw)
            self.final_b.append(fb)

    @property
    def n_components(self):
        return len(self.components)

    def _ffn_index(self, j):
        if self.config.ffn_sharing == "per_group":
            return self.component_to_group[j]
        return 0

    @property
    def collapse_events(self):
        return sum(d.collapse_events for d in self.dicts)

    def params(self):
        out = {}
        for g, d in enumerate(self.dicts):
            out[f"d3.group{g}.keys"] = d.keys
            out[f"d3.group{g}.values"] = d.values
        for j in range(self.n_components):
            out[f"d3.comp{j}.query.w"] = self.query_w[j]
            out[f"d3.comp{j}.query.b"] = self.query_b[j]
            out[f"d3.comp{j}.query.ln_g"] = self.ln_g[j]
            out[f"d3.comp{j}.query.ln_b"] = self.ln_b[j]
        if self.config.ffn_sharing == "per_group":
            for g in range(self.n_groups):
                if self.config.use_residual:
                    out[f"d3.group{g}.residual.w"] = self.residual_w[g]
                    out[f"d3.group{g}.residual.b"] = self.residual_b[g]
                out[f"d3.group{g}.final.w"] = self.final_w[g]
                out[f"d3.group{g}.final.b"] = self.final_b[g]
        else:
            if self.config.use_residual:
                out["d3.residual.w"] = self.residual_w[0]
                out["d3.residual.b"] = self.residual_b[0]
            out["d3.final.w"] = self.final_w[0]
            out["d3.final.b"] = self.final_b[0]
        return out


def _as_row(t):
    if t.ndim == 1:
        return T.reshape(t, (1, t.shape[0])), True
    if t.ndim == 2:
        return t, False
    raise DimensionError(f"expected 1-D or 2-D input, got shape {t.shape}")


def make_query(layer, j, input_t, mode, rng=None):
    """query = dropout(layer_norm(affine_j(input)), p, mode)."""
    if not (0 <= j < layer.n_components):
        raise ConfigError(f"component index {j} out of range")
    x, single = _as_row(input_t)
    q = T.affine(x, layer.query_w[j], layer.query_b[j])
    q = T.layer_norm(q, layer.ln_g[j], layer.ln_b[j])
    q = T.dropout(q, layer.config.p_dropout, mode, rng)
    return T.reshape(q, (layer.config.d_query,)) if single else q


def sparse_key_access(query, dictionary, k):
    """Scores against unit-norm keys; keep the k best.

    Returns (indices, scores). For a single query the indices are a plain
    list; batched queries return an (B, k) index array. Scores stay on the
    tape, and gradient flows to the selected keys only (through both the
    inner product and the key normalization).
    """
    if k > dictionary.n_code:
        raise ConfigError(f"k={k} exceeds codebook size {dictionary.n_code}")
    q, single = _as_row(query)
    khat = dictionary.normalized_keys()
    full = T.matmul_t(q, khat)
    idx = T.top_k_indices(full.array, k)
    sel = T.take_along(full, idx, unique=True)
    if single:
        return idx[0].tolist(), T.reshape(sel, (k,))
    return idx, sel


def aggregate_code(scores, indices, dictionary):
    """Softmax the selected scores and mix the matching values.

    The weights are scattered into a dense row over the whole codebook
    (zeros at unselected slots) and applied with one matmul, so unselected
    value rows receive an exactly-zero gradient.
    """
    s, single = _as_row(scores)
    idx = np.asarray(indices)
    if single:
        idx = idx[None, :]
    w = T.softmax(s)
    spread = T.scatter_cols(w, idx, dictionary.n_code)
    code = T.matmul(spread, dictionary.values)
    return T.reshape(code, (code.shape[1],)) if single else code


def make_component(layer, j, input_t, mode, rng=None, record=None):
    """Full per-component path: query, optional code, optional residual, final."""
    cfg = layer.config
    query = make_query(layer, j, input_t, mode, rng)
    code = None
    if cfg.use_codebook:
        g = layer.component_to_group[j]
        idx, scores = sparse_key_access(query, layer.dicts[g], cfg.top_k)
        code = aggregate_code(scores, idx, layer.dicts[g])
    f = layer._ffn_index(j)
    if cfg.use_residual:
        q2, single = _as_row(query)
        res = T.affine(q2, layer.residual_w[f], layer.residual_b[f])
        res = T.reshape(res, (cfg.d_code,)) if single else res
        body = T.add(code, res) if code is not None else res
    else:
        body = code
    b2, single = _as_row(body)
    out = T.affine(b2, layer.final_w[f], layer.final_b[f])
    out = T.reshape(out, (cfg.d_component,)) if single else out
    if record is not None:
        name = layer.components[j][0]
        record.setdefault("query", {})[name] = np.array(query.array, copy=True)
        record.setdefault("code", {})[name] = None if code is None else np.array(code.array, copy=True)
        record.setdefault("component", {})[name] = np.array(out.array, copy=True)
    return out


def decompose(layer, input_t, mode, rng=None, record=None):
    """All components in declaration order (enc components then dec)."""
    return [make_component(layer, j, input_t, mode, rng, record)
            for j in range(layer.n_components)]


class D3Session:
    """Per-episode forward state: weight concatenations, key normalization and
    the deferred-gradient affines are hoisted out of the step loop, and
    components sharing a dictionary group run the selection pipeline stacked.
    Produces the same values as decompose() (batched), just with fewer,
    larger kernels.
    """

    def __init__(self, layer, mode, rng=None, usage=None):
        self.layer = layer
        self.mode = mode
        self.rng = rng
        self.usage = usage  # {group: int64 array of length n_code}
        cfg = layer.config
        n, dq = layer.n_components, cfg.d_query
        if mode == "train" and cfg.p_dropout > 0.0 and rng is None:
            raise ConfigError("train-mode D3 session needs an rng for dropout")
        wq = T.concat(layer.query_w, axis=1)        # (d_input, n*d_query)
        bq = T.concat(layer.query_b, axis=0)        # (n*d_query,)
        self.seq_query = T.SeqAffine(wq, bq)
        self.ln_g = T.reshape(T.concat(layer.ln_g, axis=0), (n, dq))
        self.ln_b = T.reshape(T.concat(layer.ln_b, axis=0), (n, dq))
        self.group_comps = [[j for j, g in enumerate(layer.component_to_group) if g == gi]
                            for gi in range(layer.n_groups)]
        if cfg.use_codebook:
            self.seq_score = [T.SeqAffine(T.transpose(d.normalized_keys()))
                              for d in layer.dicts]
            self.seq_value = [T.SeqAffine(d.values) for d in layer.dicts]
        if cfg.ffn_sharing == "global":
            self.seq_res = (T.SeqAffine(layer.residual_w[0], layer.residual_b[0])
                            if cfg.use_residual else None)
            self.seq_final = T.SeqAffine(layer.final_w[0], layer.final_b[0])

    def components(self, h, record=None):
        layer, cfg = self.layer, self.layer.config
        n, dq = layer.n_components, cfg.d_query
        B = h.shape[0]
        q3 = T.reshape(self.seq_query.apply(h), (B, n, dq))
        q3 = T.dropout(T.layer_norm(q3, self.ln_g, self.ln_b),
                       cfg.p_dropout, self.mode, self.rng)
        q2 = T.reshape(q3, (B, n * dq))
        queries = [T.slice_cols(q2, j * dq, (j + 1) * dq) for j in range(n)]
        codes = [None] * n
        if cfg.use_codebook:
            for g, comps in enumerate(self.group_comps):
                qg = T.concat([queries[j] for j in comps], axis=0)
                full = self.seq_score[g].apply(qg)       # (m*B, n_code)
                idx = T.top_k_indices(full.array, cfg.top_k)
                if self.usage is not None:
                    self.usage[g] += np.bincount(idx.ravel(), minlength=cfg.n_code)
                w = T.softmax(T.take_along(full, idx, unique=True))
                spread = T.scatter_cols(w, idx, cfg.n_code)
                cg = self.seq_value[g].apply(spread)     # (m*B, d_code)
                for a, j in enumerate(comps):
                    codes[j] = T.slice_rows(cg, a * B, (a + 1) * B)
        if cfg.ffn_sharing == "per_group":
            outs = []
            for j in range(n):
                f = layer._ffn_index(j)
                body = codes[j]
                if cfg.use_residual:
                    res = T.affine(queries[j], layer.residual_w[f], layer.residual_b[f])
                    body = T.add(body, res) if body is not None else res
                outs.append(T.affine(body, layer.final_w[f], layer.final_b[f]))
        else:
            # stack components along rows so the shared projections run once
            body = T.concat(codes, axis=0) if cfg.use_codebook else None
            if cfg.use_residual:
                res = self.seq_res.apply(T.concat(queries, axis=0))
                body = T.add(body, res) if body is not None else res
            out_stack = self.seq_final.apply(body)
            outs = [T.slice_rows(out_stack, j * B, (j + 1) * B) for j in range(n)]
        if record is not None:
            record.setdefault("query", {})
            record.setdefault("code", {})
            record.setdefault("component", {})
            for j in range(n):
                name = layer.components[j][0]
                record["query"][name] = np.array(queries[j].array, copy=True)
                record["code"][name] = np.array(codes[j].array, copy=True) if cfg.use_codebook else None
                record["component"][name] = np.array(outs[j].array, copy=True)
        return outs
