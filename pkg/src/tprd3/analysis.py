"""Post-hoc qualitative analysis of a trained run.

Probe construction (also stamped into report headers): take the first
min(30, V) x-ids of the training split X1 in ascending order, bind every one
to the same fixed y (the first id of the held-out split Y2) during discovery,
then query the same x-ids in the same order during inference. With that
identity ordering, discovery step i and inference step i concern the same x,
so row i of a role matrix lines up with row i of an unbind matrix.

Matrices are written as CSV (label row + label column, 9 significant digits)
and as binary P6 PPM heatmaps with a diverging colormap: -1 blue, 0 white,
+1 red, one pixel per cell, row 0 at top.
"""

import numpy as np
from scipy.cluster.hierarchy import average, leaves_list
from scipy.spatial.distance import squareform

from . import fwm, sar
from .errors import ConfigError

PROBE_KINDS = ("query", "code", "role", "unbind", "component")


def probe_episode(vocab, n_probe=None):
    """One episode over the probe set: x = first min(30, V) ids of X1
    ascending, y fixed to the first id of Y2, inference in identity order."""
    V = vocab.V
    n = min(30, V) if n_probe is None else n_probe
    if not (1 <= n <= V):
        raise ConfigError(f"probe count {n} must be in [1, {V}]")
    xs = list(range(n))
    y_fix = V  # first id of the held-out Y2 split
    return sar.SarEpisode(
        discovery=[(x, y_fix) for x in xs],
        inference=list(xs),
        targets=[y_fix] * n,
    )


def probe_representations(model, vocab, which, n_probe=None):
    """(labels, matrix) of per-step vectors from an eval-mode probe pass.

    which = "role"/"unbind": the generated role1 (discovery steps) or
    unbind1 (inference steps) component. "query"/"code": the role1 query or
    code (discovery; D3 variants only). "component" is an alias for "role".
    """
    if which not in PROBE_KINDS:
        raise ConfigError(f"unknown probe kind {which!r}; expected one of {PROBE_KINDS}")
    episode = probe_episode(vocab, n_probe)
    n = len(episode.inference)
    record = []
    fwm.run_episodes(model, [episode], "eval", record=record)
    name = "unbind1" if which == "unbind" else "role1"
    steps = range(n, 2 * n) if which == "unbind" else range(n)
    rows = []
    for t in steps:
        if which in ("query", "code"):
            bank = record[t].get(which, {})
            vec = bank.get(name)
            if vec is None:
                raise ConfigError(
                    f"{which!r} probes need a D3 generator; this model records none")
        else:
            vec = record[t]["component"][name]
        rows.append(np.asarray(vec)[0])
    labels = [f"x{b}" for b in episode.inference] if which == "unbind" \
        else [f"x{x}" for x, _ in episode.discovery]
    return labels, np.stack(rows)


def cosine_matrix(A, B=None):
    """M[i, j] = cos(A[i], B[j]); zero-norm rows produce 0 entries.

    Returns (M, n_zero_rows) where the count covers both inputs.
    """
    A = np.asarray(A, dtype=np.float64)
    B = A if B is None else np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ConfigError(f"cosine_matrix: bad shapes {A.shape} vs {B.shape}")

    def unit(X):
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        zero = norms[:, 0] < 1e-12
        out = X / np.maximum(norms, 1e-12)
        out[zero] = 0.0
        return out, int(zero.sum())

    An, za = unit(A)
    Bn, zb = unit(B)
    return An @ Bn.T, za + (0 if B is A else zb)


def codebook_similarity(dictionary):
    """Key-key and value-value cosine matrices under one shared permutation.

    The permutation is the dendrogram leaf order of average-linkage
    clustering on (1 - key cosine) distances; the same order applies to the
    value matrix so the two stay comparable row for row.
    """
    keys = dictionary.keys.array
    values = dictionary.values.array
    mk, _ = cosine_matrix(keys)
    mv, _ = cosine_matrix(values)
    n = mk.shape[0]
    if n < 3:
        perm = np.arange(n)
    else:
        dist = 1.0 - mk
        np.fill_diagonal(dist, 0.0)
        dist = np.maximum(dist, 0.0)
        condensed = squareform((dist + dist.T) / 2.0, checks=False)
        perm = np.asarray(leaves_list(average(condensed)))
    return mk[np.ix_(perm, perm)], mv[np.ix_(perm, perm)], perm


def orthogonality_report(model, vocab, n_probe=None):
    """Scalars the qualitative claims rest on, from one probe pass:
    role-role off-diagonal |cos| mean, role-unbind diagonal mean, and
    role-unbind off-diagonal |cos| mean."""
    labels, roles = probe_representations(model, vocab, "role", n_probe)
    _, unbinds = probe_representations(model, vocab, "unbind", n_probe)
    mrr, _ = cosine_matrix(roles)
    mru, _ = cosine_matrix(roles, unbinds)
    n = mrr.shape[0]
    off = ~np.eye(n, dtype=bool)
    return {
        "n_probe": n,
        "role_role_offdiag_absmean": float(np.abs(mrr[off]).mean()),
        "role_unbind_diag_mean": float(np.diag(mru).mean()),
        "role_unbind_offdiag_absmean": float(np.abs(mru[off]).mean()),
    }, labels, mrr, mru


def write_matrix_csv(path, labels, M):
    M = np.asarray(M)
    if M.shape != (len(labels), len(labels)):
        raise ConfigError(f"matrix shape {M.shape} does not match {len(labels)} labels")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(labels) + "\n")
        for lab, row in zip(labels, M):
            fh.write(lab + "," + ",".join(f"{v:.9g}" for v in row) + "\n")


def read_matrix_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")[1:]
        rows = []
        for line in fh:
            rows.append([float(v) for v in line.rstrip("\n").split(",")[1:]])
    return header, np.array(rows)


def render_heatmap(M, path):
    """Binary P6 PPM, one pixel per cell: -1 blue, 0 white, +1 red."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ConfigError("heatmap input must be a 2-D matrix")
    if np.abs(M).max() > 1.0 + 1e-9:
        raise ConfigError(f"heatmap values must lie in [-1, 1], got |max| {np.abs(M).max()}")
    v = np.clip(M, -1.0, 1.0)
    h, w = v.shape
    px = np.empty((h, w, 3), dtype=np.uint8)
    fade = np.rint(255.0 * (1.0 - np.abs(v))).astype(np.uint8)
    pos = v >= 0
    px[..., 0] = np.where(pos, 255, fade)
    px[..., 1] = fade
    px[..., 2] = np.where(pos, fade, 255)
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
        fh.write(px.tobytes())


def _report_header(scalars):
    lines = [
        "# probe construction: first min(30, V) x-ids of X1 ascending, one episode,",
        "# y fixed to the first id of Y2, inference in identity order so that",
        "# discovery step i and inference step i concern the same x.",
        f"# n_probe={scalars['n_probe']}",
    ]
    return "\n".join(lines) + "\n"


def run_analysis(model, vocab, out_dir, which):
    """Dispatch for the analyze subcommand; writes CSV + PPM and returns the
    written paths. `which` in role|unbind|query|code|codebook."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    if which == "codebook":
        layer = model.gen.d3_layer
        if layer is None or not layer.dicts:
            raise ConfigError("this model has no codebook to analyze")
        for g, dic in enumerate(layer.dicts):
            mk, mv, perm = codebook_similarity(dic)
            labels = [f"k{int(i)}" for i in perm]
            for tag, M in (("keys", mk), ("values", mv)):
                base = os.path.join(out_dir, f"codebook_group{g}_{tag}")
                write_matrix_csv(base + ".csv", labels, M)
                render_heatmap(M, base + ".ppm")
                written += [base + ".csv", base + ".ppm"]
        return written
    if which in ("role", "unbind"):
        scalars, labels, mrr, mru = orthogonality_report(model, vocab)
        for tag, M in (("role_role", mrr), ("role_unbind", mru)):
            base = os.path.join(out_dir, tag)
            write_matrix_csv(base + ".csv", labels, M)
            render_heatmap(M, base + ".ppm")
            written += [base + ".csv", base + ".ppm"]
        rep = os.path.join(out_dir, "orthogonality.txt")
        with open(rep, "w", encoding="utf-8") as fh:
            fh.write(_report_header(scalars))
            for key in ("role_role_offdiag_absmean", "role_unbind_diag_mean",
                        "role_unbind_offdiag_absmean"):
                fh.write(f"{key}={scalars[key]:.9g}\n")
        written.append(rep)
        return written
    if which in ("query", "code"):
        labels, vecs = probe_representations(model, vocab, which)
        M, _ = cosine_matrix(vecs)
        base = os.path.join(out_dir, which)
        write_matrix_csv(base + ".csv", labels, M)
        render_heatmap(M, base + ".ppm")
        return [base + ".csv", base + ".ppm"]
    raise ConfigError(f"unknown analysis target {which!r}")
