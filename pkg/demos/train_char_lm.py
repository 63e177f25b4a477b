"""Train a small byte-level model with two simulated ranks at p=0.5.

Takes about a minute on a laptop CPU; prints the loss every 25 steps,
the communication ledger, and a greedy text sample at the end.

Run: python3 demos/train_char_lm.py
"""

import os
import tempfile

import numpy as np

from caatsim.data import generate_text_corpus
from caatsim.inference import greedy_generate
from caatsim.training import TrainConfig, run_training

corpus_path = os.path.join(tempfile.mkdtemp(), "corpus.txt")
with open(corpus_path, "wb") as f:
    f.write(generate_text_corpus(seed=0, n_bytes=200_000))

config = TrainConfig(
    layers=2, hidden=64, heads=4, vocab=256, seq_len=64, batch=8,
    steps=200, lr=2e-3, tp=2, p=0.5, placement="h", scale_private=True,
    seed=0, data=corpus_path, eval_every=25,
)
result = run_training(config)

print("step  train_loss  val_loss")
for row in result.rows:
    if row["val_loss"] != "":
        train = f"{row['train_loss']:.3f}" if row["train_loss"] != "" else "  -  "
        print(f"{row['step']:4d}  {train:>10s}  {row['val_loss']:.3f}")

print("\ncommunication ledger (elements per rank, cumulative):")
print(result.ledger.to_csv())

prompt = np.frombuffer(b"The river ", dtype=np.uint8).astype(np.int64)
continuation = greedy_generate(result.model, prompt, max_new=60)
print("greedy sample:")
print("  " + (bytes(prompt.tolist()) + bytes(continuation)).decode("ascii", "replace"))
