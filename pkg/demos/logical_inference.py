"""Serve a 2-rank-trained model on one simulated physical device.

The collectives degenerate to local summation, so re-evaluating every
logical rank sequentially reproduces the 2-rank execution exactly, with
zero communicated elements.

Run: python3 demos/logical_inference.py
"""

import os
import tempfile

import numpy as np

from caatsim.collectives import CommLedger
from caatsim.checkpoint import load_checkpoint, save_checkpoint
from caatsim.data import generate_text_corpus
from caatsim.inference import logical_device_inference, ranked_logits
from caatsim.training import TrainConfig, run_training

corpus_path = os.path.join(tempfile.mkdtemp(), "corpus.txt")
with open(corpus_path, "wb") as f:
    f.write(generate_text_corpus(seed=1, n_bytes=100_000))

config = TrainConfig(
    layers=2, hidden=32, heads=4, vocab=256, seq_len=32, batch=4,
    steps=40, lr=2e-3, tp=2, p=0.5, seed=1, data=corpus_path, eval_every=0,
)
result = run_training(config)

ckpt_dir = os.path.join(tempfile.mkdtemp(), "ckpt")
save_checkpoint(result.model, result.opt_state, config.steps, config, ckpt_dir)
model, _, step, _ = load_checkpoint(ckpt_dir)
print(f"checkpoint reloaded at step {step}; tp={model.m}, p={model.spec.p}")

prompt = np.frombuffer(b"the harbor keeper", dtype=np.uint8).astype(np.int64)
window = prompt[: model.max_seq].reshape(1, -1)

ranked_ledger = CommLedger()
ranked = ranked_logits(model, window, ranked_ledger)
logical_ledger = CommLedger()
logical = logical_device_inference(model, window, logical_ledger)

print(f"2-rank execution communicated {ranked_ledger.elements()} elements per rank")
print(f"logical-device execution communicated {logical_ledger.elements()} elements")
print(f"max |logits difference| = {np.max(np.abs(ranked - logical))}")
print("bitwise identical:", np.array_equal(ranked, logical))
