"""Systematic associative recall episodes.

An episode presents L (x, y) pairs in a discovery phase, then queries the
same x-ids in permuted order during inference with the y slot zeroed out.
The x vocabulary splits into halves X1 = [0, V) and X2 = [V, 2V), likewise
Y1/Y2 for y. Training episodes only ever pair X1 with Y1 and X2 with Y2;
the evaluation pass enumerates exactly the held-out X1 x Y2 combinations,
so above-chance eval accuracy requires recombining familiar parts rather
than recalling familiar pairs.

Targets are y-ids, so the classification layer has C = 2V classes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError

EMBED_DIM = 50
N_FLAGS = 2  # discovery marker, inference marker
INPUT_DIM = 2 * EMBED_DIM + N_FLAGS


@dataclass
class SarVocab:
    """Vocabulary sizes plus the trainable symbol embeddings."""

    V: int
    x_embed: object = field(repr=False)  # Tensor (2V, EMBED_DIM)
    y_embed: object = field(repr=False)  # Tensor (2V, EMBED_DIM)

    @property
    def n_classes(self):
        return 2 * self.V


def make_vocab(V, rng):
    if V < 1:
        raise ConfigError(f"vocabulary size must be positive, got {V}")
    scale = 1.0 / np.sqrt(EMBED_DIM)
    return SarVocab(
        V=V,
        x_embed=T.init_normal(rng, (2 * V, EMBED_DIM), scale),
        y_embed=T.init_normal(rng, (2 * V, EMBED_DIM), scale),
    )


@dataclass
class SarEpisode:
    discovery: list  # [(x_id, y_id)] length L
    inference: list  # [x_id], a permutation of the discovery x-ids
    targets: list    # [y_id] aligned with inference

    def to_dict(self):
        return {
            "discovery": [[int(x), int(y)] for x, y in self.discovery],
            "inference": [int(x) for x in self.inference],
            "targets": [int(y) for y in self.targets],
        }


def gen_train_episode(vocab, rng, L):
    """Sample one training episode: per item pick a setting (X1/Y1 or X2/Y2)
    uniformly, draw x without replacement within the episode and y with
    replacement from the matching y-half."""
    V = vocab.V
    if L > 2 * V:
        raise ConfigError(f"episode length {L} exceeds the {2 * V} distinct x-ids available")
    pools = [list(range(V)), list(range(V, 2 * V))]
    discovery = []
    for _ in range(L):
        s = int(rng.integers(2))
        if not pools[s]:
            s = 1 - s  # chosen half exhausted; the other still has room since L <= 2V
        x = pools[s].pop(int(rng.integers(len(pools[s]))))
        y = int(rng.integers(V)) + s * V
        discovery.append((x, y))
    order = rng.permutation(L)
    inference = [discovery[i][0] for i in order]
    targets = [discovery[i][1] for i in order]
    return SarEpisode(discovery, inference, targets)


def gen_eval_pass(vocab, rng, L):
    """Episodes covering each held-out (x in X1, y in Y2) pair exactly once.

    Pairs are laid out so any L <= V consecutive ones have distinct x-ids
    (pair t binds x = t mod V to y-offset (t mod V + t div V) mod V). A
    short final episode is padded with already-covered pairs whose x-id is
    not yet used in that episode. Inference order is shuffled per episode.
    """
    V = vocab.V
    if L > V:
        raise ConfigError(f"eval episode length {L} exceeds the {V} x-ids in X1")
    pairs = []
    for t in range(V * V):
        i = t % V
        j = (i + t // V) % V
        pairs.append((i, V + j))
    episodes = []
    for start in range(0, V * V, L):
        chunk = pairs[start:start + L]
        if len(chunk) < L:
            used = {x for x, _ in chunk}
            for i in range(V):
                if len(chunk) == L:
                    break
                if i not in used:
                    chunk.append((i, V + i))  # covered by pair t = i in the first episode
        order = rng.permutation(L)
        episodes.append(SarEpisode(
            discovery=list(chunk),
            inference=[chunk[k][0] for k in order],
            targets=[chunk[k][1] for k in order],
        ))
    return episodes


def encode_step(vocab, item, phase, is_phase_start, flag_mode="start"):
    """Input vector for one timestep: [x-embedding | y-embedding | flags].

    Discovery items are (x, y) pairs; inference items are bare x-ids with
    the y slot zeroed. With flag_mode "start" the phase flag is an impulse
    on the first step of each phase; with "constant" it stays on.
    """
    if phase not in ("discovery", "inference"):
        raise ConfigError(f"unknown phase {phase!r}")
    if flag_mode not in ("start", "constant"):
        raise ConfigError(f"unknown flag mode {flag_mode!r}")
    if phase == "discovery":
        x, y = item
        y_part = T.take_rows(vocab.y_embed, [int(y)])
    else:
        x = item
        y_part = T.constant(np.zeros((1, EMBED_DIM)))
    x_part = T.take_rows(vocab.x_embed, [int(x)])
    on = is_phase_start if flag_mode == "start" else True
    flags = np.zeros((1, N_FLAGS))
    flags[0, 0 if phase == "discovery" else 1] = 1.0 if on else 0.0
    row = T.concat([x_part, y_part, T.constant(flags)], axis=1)
    return T.reshape(row, (INPUT_DIM,))


def flag_array(phase, step, flag_mode):
    """Flag pair for a step index within its phase, as plain floats."""
    on = (step == 0) if flag_mode == "start" else True
    d = 1.0 if (phase == "discovery" and on) else 0.0
    i = 1.0 if (phase == "inference" and on) else 0.0
    return d, i
