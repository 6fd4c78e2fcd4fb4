"""Synthetic task generators for desk-scale experiments.

Three generators:

* motif classification: label 1 iff a fixed 3-token motif occurs contiguously
  and in order among distractor tokens; negatives may contain up to two motif
  tokens so single-word shortcuts do not fully solve the task.
* group classification: linearly separable 2-class task (each class draws its
  words from a disjoint group).
* paraphrase corpus: topic-word sentences for unsupervised training plus a
  graded-similarity eval set whose gold score is the fraction of shared
  content words between the two sentences. Sentences carry a few random
  function words, which dilutes raw bag-of-words cosine for an untrained
  encoder; contrastive training has to learn to discount them.

Run ``python -m callab.synthdata OUT_DIR`` to write all of them as files in
the formats the CLI consumes.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from .autodiff import derive_seed, rng_from_seed
from .text import LabeledExample, ScoredPair

MOTIF = ("zig", "zag", "zum")
DISTRACTORS = tuple(f"d{i:02d}" for i in range(30))

_TOPIC_NAMES = ("alpha", "bravo", "coral", "delta", "ember", "frost", "grove", "haven")
TOPIC_WORDS = {t: tuple(f"{t}{j}" for j in range(10)) for t in _TOPIC_NAMES}
FUNCTION_WORDS = ("the", "a", "of", "to", "in", "is")
SENT_WORDS = 8


def _contains_motif(tokens: list[str]) -> bool:
    for i in range(len(tokens) - len(MOTIF) + 1):
        if tuple(tokens[i : i + len(MOTIF)]) == MOTIF:
            return True
    return False


def _motif_sentence(rng: np.random.Generator, positive: bool) -> str:
    n = int(rng.integers(6, 11))
    tokens = [DISTRACTORS[i] for i in rng.integers(0, len(DISTRACTORS), size=n)]
    if positive:
        pos = int(rng.integers(0, n + 1))
        tokens[pos:pos] = list(MOTIF)
    else:
        # scatter at most two motif words; the full ordered motif never appears
        k = int(rng.integers(0, 3))
        picks = rng.choice(len(MOTIF), size=k, replace=False)
        for w in picks:
            pos = int(rng.integers(0, len(tokens) + 1))
            tokens.insert(pos, MOTIF[int(w)])
        assert not _contains_motif(tokens)
    return " ".join(tokens)


def make_motif_task(
    n_train: int = 2000, n_dev: int = 500, seed: int = 0
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Balanced 2-class motif-presence task: (train rows, dev rows)."""

    def rows(n: int, split: str) -> list[LabeledExample]:
        rng = rng_from_seed(derive_seed(seed, "motif", split))
        out = []
        for i in range(n):
            label = i % 2
            out.append(LabeledExample(label, _motif_sentence(rng, positive=label == 1)))
        return out

    return rows(n_train, "train"), rows(n_dev, "dev")


GROUP_A = tuple(f"a{i:02d}" for i in range(12))
GROUP_B = tuple(f"b{i:02d}" for i in range(12))


def make_group_task(n: int, seed: int = 0) -> list[LabeledExample]:
    """Linearly separable task: class = which word group the sentence uses."""
    rng = rng_from_seed(derive_seed(seed, "group"))
    rows = []
    for i in range(n):
        label = i % 2
        pool = GROUP_B if label else GROUP_A
        length = int(rng.integers(4, 9))
        words = [pool[j] for j in rng.integers(0, len(pool), size=length)]
        rows.append(LabeledExample(label, " ".join(words)))
    return rows


def _topic_content(rng: np.random.Generator, topic: str) -> list[str]:
    return [str(w) for w in rng.choice(TOPIC_WORDS[topic], size=SENT_WORDS, replace=False)]


def _with_function_noise(rng: np.random.Generator, content: list[str]) -> str:
    words = list(content)
    m = int(rng.integers(2, 6))
    words += [FUNCTION_WORDS[i] for i in rng.integers(0, len(FUNCTION_WORDS), size=m)]
    rng.shuffle(words)
    return " ".join(words)


def make_paraphrase_corpus(
    n_lines: int = 480, n_pairs: int = 200, seed: int = 0
) -> tuple[list[str], list[ScoredPair]]:
    """Unsupervised topic sentences plus graded-similarity pairs.

    Pair construction: take a topic sentence's content words, replace k of
    them with words from other topics, re-draw the function-word noise, and
    shuffle; gold score = 5 * (kept / total). k cycles over 0..SENT_WORDS so
    every similarity level is represented.
    """
    rng = rng_from_seed(derive_seed(seed, "paraphrase", "lines"))
    topics = list(TOPIC_WORDS)
    lines = [
        _with_function_noise(
            rng, _topic_content(rng, topics[int(rng.integers(0, len(topics)))])
        )
        for _ in range(n_lines)
    ]

    rng = rng_from_seed(derive_seed(seed, "paraphrase", "pairs"))
    pairs: list[ScoredPair] = []
    for i in range(n_pairs):
        k = i % (SENT_WORDS + 1)
        topic = topics[int(rng.integers(0, len(topics)))]
        base = _topic_content(rng, topic)
        variant = list(base)
        if k:
            slots = rng.choice(SENT_WORDS, size=k, replace=False)
            for s in slots:
                other = topics[int(rng.integers(0, len(topics)))]
                while other == topic:
                    other = topics[int(rng.integers(0, len(topics)))]
                variant[int(s)] = str(rng.choice(TOPIC_WORDS[other]))
        score = 5.0 * (SENT_WORDS - k) / SENT_WORDS
        pairs.append(
            ScoredPair(
                score,
                _with_function_noise(rng, base),
                _with_function_noise(rng, variant),
            )
        )
    return lines, pairs


def write_supervised_tsv(rows: list[LabeledExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            if r.text_b is None:
                fh.write(f"{r.label}\t{r.text_a}\n")
            else:
                fh.write(f"{r.label}\t{r.text_a}\t{r.text_b}\n")


def write_lines(lines: list[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_similarity_tsv(pairs: list[ScoredPair], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.score}\t{p.text_a}\t{p.text_b}\n")


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    out_dir = args[0] if args else "synth_data"
    seed = int(args[1]) if len(args) > 1 else 0
    os.makedirs(out_dir, exist_ok=True)
    train, dev = make_motif_task(seed=seed)
    write_supervised_tsv(train, os.path.join(out_dir, "motif_train.tsv"))
    write_supervised_tsv(dev, os.path.join(out_dir, "motif_dev.tsv"))
    lines, pairs = make_paraphrase_corpus(seed=seed)
    write_lines(lines, os.path.join(out_dir, "paraphrase.txt"))
    write_similarity_tsv(pairs, os.path.join(out_dir, "sims.tsv"))
    print(f"wrote motif_train.tsv, motif_dev.tsv, paraphrase.txt, sims.tsv to {out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
