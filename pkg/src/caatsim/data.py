"""Byte-level data handling: corpus ingestion, synthetic streams,
deterministic batch sampling, and a structured pseudo-text generator
for self-contained experiments.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "BYTE_VOCAB",
    "ingest_corpus",
    "train_val_split",
    "synth_data",
    "sample_batch",
    "eval_windows",
    "generate_text_corpus",
]

BYTE_VOCAB = 256
VAL_FRACTION = 0.05

_BATCH_STREAM = 0xB47C4
_CORPUS_STREAM = 0xC0905


def ingest_corpus(path) -> np.ndarray:
    """Read a file as a byte-level token stream (vocab 256)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise ValueError(f"corpus {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def train_val_split(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 95/5 split; validation is the contiguous suffix."""
    n_val = int(np.floor(VAL_FRACTION * len(tokens)))
    return tokens[: len(tokens) - n_val], tokens[len(tokens) - n_val :]


def synth_data(seed: int, vocab: int, length: int) -> np.ndarray:
    """Seeded uniform token stream (structureless smoke-test data)."""
    rng = np.random.default_rng((seed, _CORPUS_STREAM))
    return rng.integers(0, vocab, size=length, dtype=np.int64)


def sample_batch(
    tokens: np.ndarray, seq_len: int, batch: int, seed: int, step: int
) -> tuple[np.ndarray, np.ndarray]:
    """Batch of (input, next-token target) windows for one step.

    Window starts are drawn from a generator keyed by (seed, step), so
    any step's batch can be regenerated without replaying the run.
    """
    n = len(tokens)
    if n < seq_len + 1:
        raise ValueError(f"stream of {n} tokens too short for seq_len {seq_len}")
    rng = np.random.default_rng((seed, _BATCH_STREAM, step))
    starts = rng.integers(0, n - seq_len, size=batch)
    x = np.stack([tokens[s : s + seq_len] for s in starts])
    y = np.stack([tokens[s + 1 : s + seq_len + 1] for s in starts])
    return x, y


def eval_windows(tokens: np.ndarray, seq_len: int, limit: int) -> np.ndarray:
    """Non-overlapping evaluation windows (input plus shifted target)."""
    n = len(tokens)
    if n < seq_len + 1:
        raise ValueError(f"stream of {n} tokens too short for seq_len {seq_len}")
    starts = range(0, n - seq_len, seq_len)
    return np.stack([tokens[s : s + seq_len + 1] for s in list(starts)[:limit]])


_NOUNS = (
    "river mountain forest village stone garden harbor lantern meadow cloud "
    "valley bridge market tower window shadow winter summer morning evening "
    "captain farmer teacher sailor painter miller weaver hunter keeper scribe "
    "horse raven salmon falcon cedar willow barley copper silver thunder "
    "anchor barrel candle compass ferry granary hillside island journal kettle "
    "ladder mill notebook orchard plough quarry rope saddle tavern wagon "
    "anvil beacon cellar dune ember fountain gate hearth inkwell jetty "
    "kiln loom mast nest oar pier quill reed sail tide vane well yarn "
    "archway bakery chapel dock estuary fieldstone grove hamlet inlet knoll"
).split()
_VERBS = (
    "watches carries builds crosses follows gathers paints repairs guards "
    "remembers studies borrows trades shelters plants harvests mends sings "
    "measures draws sharpens waters counts welcomes answers binds carves "
    "dries empties fills gilds hauls inspects joins kindles loads marks "
    "numbers opens polishes quiets raises stacks tends unloads varnishes "
    "weighs anchors braids cleans drains engraves ferries grinds hones irons"
).split()
_ADJECTIVES = (
    "old quiet bright narrow heavy gentle distant golden broken silent "
    "crooked steady frozen amber pale wandering patient hollow brisk cedar "
    "damp eager faded grand humble ivory jagged keen limed mossy newer "
    "oaken plain quick rustic sturdy tarred upper veiled woven young"
).split()
_ADVERBS = (
    "slowly carefully quietly rarely often twice together alone daily "
    "gladly briskly early late seldom soon warily yearly gently"
).split()
_NAMES = (
    "Anna Bren Cole Dara Edda Finn Greta Hale Ines Joren Kasia Lund "
    "Mirel Noor Odane Petra Quist Rowan Senna Tovi"
).split()
_PREPS = "over under beside beyond near through behind across along around".split()
_NUMBERS = "two three four five six seven eight nine ten twelve twenty forty".split()
_UNITS = "sacks crates barrels bundles spools baskets lengths pails".split()


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / (np.arange(n) + 2.0)
    return w / w.sum()


def generate_text_corpus(seed: int, n_bytes: int) -> bytes:
    """Deterministic pseudo-English corpus with word- and sentence-level
    structure, for char-level language-model experiments that need a
    learnable stream without shipping a real text file. Each paragraph
    revisits a topic word, so models benefit from using their context.
    """
    rng = np.random.default_rng((seed, _CORPUS_STREAM, n_bytes))
    pick = lambda words: lambda: words[
        int(rng.choice(len(words), p=_zipf_weights(len(words))))
    ]
    noun, verb, adj, adv, name, prep, number, unit = (
        pick(_NOUNS), pick(_VERBS), pick(_ADJECTIVES), pick(_ADVERBS),
        pick(_NAMES), pick(_PREPS), pick(_NUMBERS), pick(_UNITS),
    )

    def noun_phrase(topic: str) -> str:
        if rng.random() < 0.22:
            return name()
        head = topic if rng.random() < 0.3 else noun()
        det = "the" if rng.random() < 0.7 else "a"
        qualifier = f"{adj()} " if rng.random() < 0.45 else ""
        return f"{det} {qualifier}{head}"

    def clause(topic: str) -> str:
        subject = noun_phrase(topic)
        action = verb()
        tail = rng.random()
        if tail < 0.35:
            return f"{subject} {action} {noun_phrase(topic)}"
        if tail < 0.6:
            return f"{subject} {action} {prep()} {noun_phrase(topic)}"
        if tail < 0.75:
            return f"{subject} {action} {number()} {unit()} of {noun()}"
        if tail < 0.9:
            return f"{subject} {action} {adv()}"
        return f'{name()} said, "{subject} {action} {adv()}"'

    out: list[str] = []
    size = 0
    while size < n_bytes:
        topic = noun()
        sentences = []
        for _ in range(int(rng.integers(3, 8))):
            parts = [clause(topic)]
            joiner = rng.random()
            if joiner < 0.2:
                parts.append(clause(topic))
                sentence = ", and ".join(parts) + "."
            elif joiner < 0.3:
                sentence = f"{parts[0]} while {clause(topic)}."
            else:
                sentence = parts[0] + "."
            sentences.append(sentence[0].upper() + sentence[1:])
        paragraph = " ".join(sentences) + "\n"
        out.append(paragraph)
        size += len(paragraph)
    return "".join(out).encode("ascii")[:n_bytes]
