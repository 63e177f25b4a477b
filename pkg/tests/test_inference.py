import numpy as np

from caatsim.collectives import CommLedger
from caatsim.inference import greedy_generate, logical_device_inference, ranked_logits
from test_model import tiny_model


class TestLogicalDeviceInference:
    def test_bitwise_equal_to_ranked_execution(self):
        model = tiny_model(m=2, p=0.5, seed=21, vocab=17, max_seq=6)
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, 17, size=(1, 6))
        ledger = CommLedger()
        ranked = ranked_logits(model, tokens, ledger)
        assert ledger.elements() > 0
        logical_ledger = CommLedger()
        logical = logical_device_inference(model, tokens, logical_ledger)
        assert np.array_equal(ranked, logical)
        assert logical_ledger.elements() == 0

    def test_single_rank_is_plain_forward(self):
        model = tiny_model(m=1, p=1.0, seed=22, vocab=9, max_seq=4)
        tokens = np.array([[1, 2, 3, 4]])
        a = logical_device_inference(model, tokens)
        b = model.forward(tokens).logits
        assert np.array_equal(a, b)


class TestGreedyGenerate:
    def test_deterministic(self):
        model = tiny_model(m=2, p=0.5, seed=23, vocab=11, max_seq=5)
        prompt = np.array([1, 2])
        a = greedy_generate(model, prompt, max_new=8)
        b = greedy_generate(model, prompt, max_new=8)
        assert a == b
        assert len(a) == 8
        assert all(0 <= t < 11 for t in a)

    def test_window_slides_past_max_seq(self):
        model = tiny_model(m=2, p=0.5, seed=24, vocab=11, max_seq=4)
        out = greedy_generate(model, np.array([1, 2, 3]), max_new=10)
        assert len(out) == 10

    def test_logical_and_ranked_paths_agree(self):
        model = tiny_model(m=2, p=0.25, seed=25, vocab=13, max_seq=6)
        prompt = np.array([5, 6, 7])
        assert greedy_generate(model, prompt, 6, logical=True) == greedy_generate(
            model, prompt, 6, logical=False
        )
