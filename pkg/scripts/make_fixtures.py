#!/usr/bin/env python3
"""Regenerate the bundled fixtures in src/earlyexit/fixtures/.

Deterministic: the corpus and the rigged bank are identical across runs.
Run from anywhere; paths are resolved relative to this file.
"""

import os
import sys

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "src"))

from earlyexit.calibration import save_bank  # noqa: E402
from earlyexit.fixtures import make_rigged_bank  # noqa: E402
from earlyexit.model import desk_config  # noqa: E402

FIXTURES = os.path.join(ROOT, "src", "earlyexit", "fixtures")

CORPUS_SEED = 20240811
CORPUS_LINES = 2000

OPENERS = ["", "", "", "meanwhile", "later that day", "by morning", "after the rain",
           "in the valley", "near the harbor", "at first light", "once again"]
SUBJECTS = ["the tide", "a gray heron", "the old miller", "our small crew", "the river",
            "a slow train", "the lighthouse keeper", "the north wind", "her brother",
            "the market", "a lone fox", "the orchard", "the ferry", "this machine",
            "the archivist", "a quiet voice", "the glacier", "the committee"]
VERBS = ["carried", "measured", "followed", "ignored", "repaired", "crossed",
         "remembered", "sorted", "sheltered", "traced", "watched", "reached",
         "counted", "signaled", "weighed", "circled", "gathered", "mapped"]
OBJECTS = ["the broken gate", "every signal", "an old ledger", "the narrow channel",
           "its own shadow", "the spare parts", "a faded map", "the last shipment",
           "three small boats", "the winter stores", "a ring of keys", "the far ridge",
           "the morning post", "a line of geese", "the tide tables", "the empty yard"]
TAILS = ["", "", "before the frost set in", "without a word", "for the third time",
         "as the fog lifted", "under a pale sky", "while the bells rang",
         "despite the delay", "long after dark", "with steady hands",
         "against the current", "until the lamps burned low"]


def make_corpus(path):
    rng = np.random.Generator(np.random.PCG64(CORPUS_SEED))

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    lines = []
    for _ in range(CORPUS_LINES):
        parts = []
        opener = pick(OPENERS)
        if opener:
            parts.append(opener + ",")
        parts += [pick(SUBJECTS), pick(VERBS), pick(OBJECTS)]
        tail = pick(TAILS)
        if tail:
            parts.append(tail)
        sentence = " ".join(parts) + "."
        if int(rng.integers(4)) == 0:
            sentence += " " + " ".join([pick(SUBJECTS), pick(VERBS), pick(OBJECTS)]) + "."
        lines.append(sentence[0].upper() + sentence[1:])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {path} ({os.path.getsize(path)} bytes, {len(lines)} lines)")


def make_bank(path):
    config = desk_config()
    # Middle checkpoint hot: deterministic exits at layer 7 on any real row.
    bank = make_rigged_bank(config, hot_layers=(7,))
    save_bank(bank, path)
    print(f"wrote {path} ({os.path.getsize(path)} bytes, checkpoints {bank.checkpoints})")


if __name__ == "__main__":
    make_corpus(os.path.join(FIXTURES, "corpus.txt"))
    make_bank(os.path.join(FIXTURES, "rigged.bank"))
