"""Training and evaluation loops, metric logging, the ablation suite.

A run writes into its own directory:
  manifest.json   canonical JSON of the effective RunConfig (written first)
  metrics.csv     iteration,loss,accuracy,seconds  (one row per eval point;
                  the seconds column is a fixed 0.000 so reruns are
                  byte-identical — real timings live in timing.csv)
  timing.csv      iteration,seconds (wall clock, informational only)
  usage.csv       group,key_index,count codebook-selection histogram
  best.ckpt       highest eval accuracy, ties resolved to the later iteration
  final.ckpt      parameters after the last iteration

Runs are deterministic: the same manifest reproduces every artifact above
byte for byte except timing.csv.
"""

import gc
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint, fwm, sar
from . import tensor as T
from .config import manifest_json
from .d3 import D3Config
from .errors import DivergenceError
from .optim import Adam
from .rng import STREAM_DROPOUT, STREAM_EVAL, STREAM_INIT, STREAM_TRAIN, make_rng

GC_EVERY = 25  # redrop collector pauses out of the hot loop


@dataclass
class MetricsRecord:
    iteration: int
    loss: float
    accuracy: float
    seconds: float


def build_model(cfg):
    """Vocab + model from a RunConfig; both drawn from the seed's init stream
    (vocab first, then parameters) so a config pins every array."""
    rng = make_rng(cfg.seed, STREAM_INIT)
    vocab = sar.make_vocab(cfg.v, rng)
    d3_config = None
    if cfg.variant != "fwm-baseline":
        d3_config = D3Config(
            d_code=cfg.d_code, n_code=cfg.n_code, top_k=cfg.top_k,
            d_query=cfg.d_query, p_dropout=cfg.p_dropout,
            d_component=cfg.d_fwm, use_codebook=cfg.use_codebook,
            use_residual=cfg.use_residual,
            apply_to_filler=(cfg.variant == "fwm-d3-wF"),
            ffn_sharing=cfg.ffn_sharing)
    model = fwm.make_model(vocab, cfg.variant, rng=rng, d3_config=d3_config,
                           d_lstm=cfg.d_lstm, d_fwm=cfg.d_fwm,
                           flag_mode=cfg.flag_mode)
    return vocab, model


def evaluate(model, vocab, episode_len, seed, batch=64):
    """Accuracy over the full held-out pass: fraction of inference steps whose
    argmax matches the bound y-id. Returns (mean loss, accuracy, preds, targets)."""
    episodes = sar.gen_eval_pass(vocab, make_rng(seed, STREAM_EVAL), episode_len)
    losses, preds_all, tgt_all = [], [], []
    for start in range(0, len(episodes), batch):
        chunk = episodes[start:start + batch]
        loss, preds = fwm.run_episodes(model, chunk, "eval")
        losses.append(float(loss.array) * len(chunk))
        preds_all.append(preds)
        tgt_all.append(np.array([ep.targets for ep in chunk]))
    preds = np.concatenate(preds_all, axis=0)
    targets = np.concatenate(tgt_all, axis=0)
    accuracy = float((preds == targets).mean())
    return sum(losses) / len(episodes), accuracy, preds, targets


def _unique_run_dir(cfg):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(cfg.out_dir, f"{cfg.variant}-{cfg.seed}-{stamp}")
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    return path


def _write_usage(path, usage):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("group,key_index,count\n")
        for g in sorted(usage):
            for k, count in enumerate(usage[g]):
                fh.write(f"{g},{k},{int(count)}\n")


def train(cfg, run_dir=None):
    """Full training run. Returns a summary dict; raises DivergenceError after
    persisting partial metrics if the model blows up."""
    if run_dir is None:
        run_dir = _unique_run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(manifest_json(cfg))

    vocab, model = build_model(cfg)
    params = model.params()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
               eps=cfg.adam_eps)
    drop_rng = make_rng(cfg.seed, STREAM_DROPOUT)
    usage = None
    if model.gen.d3_layer is not None and cfg.use_codebook:
        usage = {g: np.zeros(cfg.n_code, dtype=np.int64)
                 for g in range(model.gen.d3_layer.n_groups)}

    metrics_path = os.path.join(run_dir, "metrics.csv")
    timing_path = os.path.join(run_dir, "timing.csv")
    best_acc, best_iter = -1.0, -1
    records = []
    t0 = time.time()
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        with open(metrics_path, "w", encoding="utf-8") as mf, \
             open(timing_path, "w", encoding="utf-8") as tf:
            mf.write("iteration,loss,accuracy,seconds\n")
            mf.flush()
            tf.write("iteration,seconds\n")
            loss_val = float("nan")
            for it in range(cfg.iterations):
                episodes = [
                    sar.gen_train_episode(
                        vocab, make_rng(cfg.seed, STREAM_TRAIN, it * cfg.batch + b),
                        cfg.episode_len)
                    for b in range(cfg.batch)
                ]
                with T.Tape() as tape:
                    loss, _ = fwm.run_episodes(model, episodes, "train", drop_rng,
                                               usage=usage)
                    tape.backward(loss)
                opt.step()
                loss_val = float(loss.array)
                if it % GC_EVERY == GC_EVERY - 1:
                    gc.collect()
                if (it + 1) % cfg.eval_every == 0 or (it + 1) == cfg.iterations:
                    _, acc, _, _ = evaluate(model, vocab, cfg.episode_len,
                                            cfg.seed, cfg.batch)
                    rec = MetricsRecord(it + 1, loss_val, acc, 0.0)
                    records.append(rec)
                    mf.write(f"{rec.iteration},{rec.loss:.9g},{rec.accuracy:.9g},"
                             f"{rec.seconds:.3f}\n")
                    mf.flush()
                    tf.write(f"{it + 1},{time.time() - t0:.3f}\n")
                    tf.flush()
                    if acc >= best_acc:  # ties resolve to the later iteration
                        best_acc, best_iter = acc, it + 1
                        checkpoint.save(os.path.join(run_dir, "best.ckpt"), params)
            if cfg.iterations == 0:
                _, best_acc, _, _ = evaluate(model, vocab, cfg.episode_len,
                                             cfg.seed, cfg.batch)
                best_iter = 0
                rec = MetricsRecord(0, float("nan"), best_acc, 0.0)
                records.append(rec)
                mf.write(f"0,nan,{best_acc:.9g},0.000\n")
                mf.flush()
                checkpoint.save(os.path.join(run_dir, "best.ckpt"), params)
    except DivergenceError:
        if usage is not None:
            _write_usage(os.path.join(run_dir, "usage.csv"), usage)
        raise
    finally:
        if gc_was_enabled:
            gc.enable()
        gc.collect()

    checkpoint.save(os.path.join(run_dir, "final.ckpt"), params)
    if usage is not None:
        _write_usage(os.path.join(run_dir, "usage.csv"), usage)
    final = records[-1] if records else None
    return {
        "run_dir": run_dir,
        "records": records,
        "final_loss": final.loss if final else float("nan"),
        "final_accuracy": final.accuracy if final else float("nan"),
        "best_accuracy": best_acc,
        "best_iteration": best_iter,
        "wall_seconds": time.time() - t0,
    }


# ------------------------------------------------------------ ablation suite

def ablation_grid(base):
    """(row name, RunConfig) pairs for the fixed ablation grid. top_k is
    clamped to n_code where the grid would otherwise be inconsistent."""
    rows = []
    for d_code in (8, 16, 32, 64):
        rows.append((f"d_code={d_code}",
                     replace(base, d_code=d_code, d_query=0)))
    for top_k in (1, 2, 4, 8):
        rows.append((f"top_k={top_k}", replace(base, top_k=top_k, n_code=64)))
    for n_code in (2, 4, 8, 16, 64):
        rows.append((f"n_code={n_code}",
                     replace(base, n_code=n_code, top_k=min(base.top_k, n_code))))
    rows.append(("wo_codebook", replace(base, use_codebook=False)))
    rows.append(("wo_residual", replace(base, use_residual=False)))
    rows.append(("n_code=1,top_k=1", replace(base, n_code=1, top_k=1)))
    return rows


def run_ablation_suite(base, seeds=(0, 1111, 2222), out_dir=None, runner=None):
    """Run the grid over the seeds; one aggregated CSV row per grid entry.

    Individual run failures (divergence) are recorded and the suite
    continues. Identical configs (the grid has overlapping corners) are
    executed once and shared. `runner(cfg) -> accuracy` is injectable for
    tests; the default trains for real.
    """
    if out_dir is None:
        out_dir = base.out_dir
    os.makedirs(out_dir, exist_ok=True)

    def default_runner(cfg):
        return train(cfg)["final_accuracy"]

    runner = runner or default_runner
    cache = {}
    results = []
    for name, cfg in ablation_grid(base):
        accs, failures = [], 0
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, out_dir=out_dir)
            key = manifest_json(run_cfg)
            if key not in cache:
                try:
                    cache[key] = runner(run_cfg)
                except DivergenceError:
                    cache[key] = None
            if cache[key] is None:
                failures += 1
            else:
                accs.append(cache[key])
        mean = float(np.mean(accs)) if accs else float("nan")
        sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        results.append({"name": name, "runs_ok": len(accs), "failures": failures,
                        "accuracy_mean": mean, "accuracy_sd": sd})
    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,runs_ok,failures,accuracy_mean,accuracy_sd\n")
        for row in results:
            fh.write(f"{row['name']},{row['runs_ok']},{row['failures']},"
                     f"{row['accuracy_mean']:.9g},{row['accuracy_sd']:.9g}\n")
    return results, path
