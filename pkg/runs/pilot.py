"""Pilot convergence check: fwm-d3-woF, V=20, 3000 iters, seed 0."""
import gc, sys, time
import numpy as np
from tprd3 import fwm, sar, tensor as T
from tprd3.optim import Adam
from tprd3.rng import make_rng, STREAM_INIT, STREAM_TRAIN, STREAM_EVAL, STREAM_DROPOUT

variant = sys.argv[1] if len(sys.argv) > 1 else "fwm-d3-woF"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
V, L, B, iters = 20, 20, 64, 3000

vocab = sar.make_vocab(V, make_rng(seed, STREAM_INIT))
model = fwm.make_model(vocab, variant, seed=seed)
opt = Adam(model.params())
drop_rng = make_rng(seed, STREAM_DROPOUT)

def evaluate(tag):
    eps = sar.gen_eval_pass(vocab, make_rng(seed, STREAM_EVAL), L)
    loss, preds = fwm.run_episodes(model, eps, "eval")
    tgt = np.array([ep.targets for ep in eps])
    acc = float((preds == tgt).mean())
    print(f"[eval {tag}] loss {loss.array:.4f} acc {acc:.4f}", flush=True)
    return acc

gc.disable()
t_start = time.time()
for it in range(iters):
    eps = [sar.gen_train_episode(vocab, make_rng(seed, STREAM_TRAIN, it * B + b), L) for b in range(B)]
    with T.Tape() as tape:
        loss, preds = fwm.run_episodes(model, eps, "train", drop_rng)
        tape.backward(loss)
    opt.step()
    if it % 25 == 24:
        gc.collect()
    if it % 50 == 0:
        print(f"iter {it:5d} loss {loss.array:.4f} elapsed {time.time()-t_start:7.1f}s", flush=True)
    if it % 250 == 249:
        evaluate(it + 1)
acc = evaluate("final")
print(f"TOTAL {time.time()-t_start:.1f}s final_acc {acc:.4f}", flush=True)
