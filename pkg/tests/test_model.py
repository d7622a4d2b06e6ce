"""Tests for the decoder-only LM: forward semantics, loss masking,
manual gradients vs finite differences, training loops, generation."""

import math

import numpy as np
import pytest

from uttertune.errors import CorruptFile, NonFiniteLoss, SequenceTooLong
from uttertune.lora import init_adapter
from uttertune.model import (
    ToyLM,
    ToyLMConfig,
    TrainConfig,
    TrainingExample,
    _forward_batch,
    generate,
    gradient_check,
    loss_and_grads,
    lr_at_step,
    pretrain,
    train_adapter,
)

# Tiny id space: text 0..29, tags 30/31, speech 32..39 (39 = end of speech).
TINY = ToyLMConfig(
    vocab_size=40,
    speech_offset=32,
    speech_count=8,
    layers=2,
    width=16,
    heads=2,
    ff_width=32,
    max_seq=48,
    seed=11,
)
TAG_START, TAG_END = 30, 31


def make_examples(rng, n, with_tags=False):
    out = []
    for _ in range(n):
        li = int(rng.integers(2, 6))
        ti = int(rng.integers(2, 6))
        inp = [int(x) for x in rng.integers(0, 30, size=li)]
        if with_tags:
            inp = [inp[0], TAG_START] + inp[1:] + [TAG_END]
        tgt = tuple(int(x) for x in rng.integers(32, 39, size=ti))
        out.append(TrainingExample(tuple(inp), tgt))
    return out


@pytest.fixture(scope="module")
def tiny_model():
    return ToyLM.init(TINY)


def weight_bytes(model):
    return {k: v.tobytes() for k, v in model.weights.items()}


# -- config and construction -------------------------------------------------


def test_width_must_divide_heads():
    with pytest.raises(ValueError):
        ToyLMConfig(vocab_size=40, speech_offset=32, speech_count=8, heads=3)


def test_speech_range_must_fit_vocab():
    with pytest.raises(ValueError):
        ToyLMConfig(vocab_size=40, speech_offset=35, speech_count=8)


def test_warmup_fraction_bounds():
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=1.0)


def test_training_example_requires_input():
    with pytest.raises(ValueError):
        TrainingExample((), (32,))


def test_init_is_deterministic():
    a = ToyLM.init(TINY)
    b = ToyLM.init(TINY)
    assert weight_bytes(a) == weight_bytes(b)


def test_param_count_matches_hand_formula():
    model = ToyLM.init(TINY)
    d, ff, V = TINY.width, TINY.ff_width, TINY.vocab_size
    per_layer = 4 * d * d + d * ff + ff + ff * d + d + 4 * d
    expected = V * d + TINY.max_seq * d + TINY.layers * per_layer + 2 * d + d * V
    assert model.param_count() == expected


# -- forward semantics -------------------------------------------------------


def test_logits_shape(tiny_model):
    ids = [1, 2, 3, TAG_START, 7, TAG_END, 33]
    logits = tiny_model.forward(ids)
    assert logits.shape == (7, TINY.vocab_size)
    assert logits.dtype == np.float64


def test_causality_is_exact(tiny_model):
    rng = np.random.default_rng(0)
    ids = [int(x) for x in rng.integers(0, 30, size=12)]
    base = tiny_model.forward(ids)
    j = 7
    changed = list(ids)
    changed[j] = (changed[j] + 5) % 30
    after = tiny_model.forward(changed)
    assert np.array_equal(base[:j], after[:j])
    assert not np.array_equal(base[j:], after[j:])


def test_attention_rows_are_normalized(tiny_model):
    ids = np.array([[1, 2, 3, 4, 5, 6]], dtype=np.int64)
    _, cache = _forward_batch(tiny_model.params64(), TINY, ids, None, None)
    for layer_cache in cache["layers"]:
        sums = layer_cache["attn"].sum(axis=-1)
        assert np.all(np.abs(sums - 1.0) < 1e-6)


def test_forward_rejects_overlong_sequence(tiny_model):
    with pytest.raises(SequenceTooLong):
        tiny_model.forward([0] * (TINY.max_seq + 1))


# -- loss --------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    model = ToyLM.init(TINY)
    model.weights["head"] = np.zeros_like(model.weights["head"])
    model.invalidate_cache()
    ex = TrainingExample((1, 2, 3), (33, 34))
    assert model.loss([ex]) == pytest.approx(math.log(TINY.vocab_size), rel=1e-12)


def test_loss_matches_positionwise_oracle(tiny_model):
    """Recompute the masked cross-entropy from raw logits, per position."""
    ex = TrainingExample((4, 9, TAG_START, 2, TAG_END), (33, 35, 32))
    seq = list(ex.input_ids) + list(ex.target_ids) + [TINY.eos_id]
    logits = tiny_model.forward(seq)
    li = len(ex.input_ids)
    total = 0.0
    count = 0
    for t in range(li - 1, len(seq) - 1):
        row = logits[t]
        row = row - row.max()
        total += math.log(np.exp(row).sum()) - row[seq[t + 1]]
        count += 1
    assert tiny_model.loss([ex]) == pytest.approx(total / count, rel=1e-12)


def test_batch_loss_is_position_weighted_mean(tiny_model):
    rng = np.random.default_rng(3)
    a, b = make_examples(rng, 2)
    la = tiny_model.loss([a])
    lb = tiny_model.loss([b])
    na = len(a.target_ids) + 1
    nb = len(b.target_ids) + 1
    combined = (la * na + lb * nb) / (na + nb)
    assert tiny_model.loss([a, b]) == pytest.approx(combined, rel=1e-10)


def test_padding_does_not_leak_into_loss(tiny_model):
    short = TrainingExample((1, 2), (33,))
    long = TrainingExample((3, 4, 5, 6, 7, 8), (34, 35, 36, 37))
    alone = tiny_model.loss([short])
    ns, nl = 2, 5
    batched = tiny_model.loss([short, long])
    recovered = (batched * (ns + nl) - tiny_model.loss([long]) * nl) / ns
    assert alone == pytest.approx(recovered, rel=1e-9)


# -- adapter path ------------------------------------------------------------


def test_fresh_adapter_is_bitwise_transparent(tiny_model):
    adapter = init_adapter(tiny_model.shape_spec(), r=2, seed=7)
    ids = [1, TAG_START, 5, TAG_END, 9, 33]
    assert np.array_equal(
        tiny_model.forward(ids), tiny_model.forward(ids, adapter=adapter)
    )
    ex = TrainingExample((1, TAG_START, 5, TAG_END), (33, 34))
    assert tiny_model.loss([ex]) == tiny_model.loss([ex], adapter=adapter)


def test_adapter_with_nonzero_c_changes_logits(tiny_model):
    adapter = init_adapter(tiny_model.shape_spec(), r=2, seed=7)
    rng = np.random.default_rng(1)
    for layer in adapter.layers:
        layer.C = rng.normal(0, 0.05, layer.C.shape).astype(np.float32)
    ids = [1, 2, 3]
    assert not np.array_equal(
        tiny_model.forward(ids), tiny_model.forward(ids, adapter=adapter)
    )


def test_tag_delta_gradient_flows_only_through_tags(tiny_model):
    adapter = init_adapter(tiny_model.shape_spec(), r=2, seed=7)
    with_tags = TrainingExample((1, TAG_START, 5, TAG_END), (33,))
    without = TrainingExample((1, 2, 5, 9), (33,))
    _, _, agrads = loss_and_grads(tiny_model, [with_tags], adapter=adapter)
    assert np.abs(agrads["tag_deltas"]).sum() > 0
    _, _, agrads = loss_and_grads(tiny_model, [without], adapter=adapter)
    assert np.abs(agrads["tag_deltas"]).sum() == 0


def _randomized_adapter(model, dropout_rate):
    adapter = init_adapter(
        model.shape_spec(), r=2, alpha=8.0, dropout_rate=dropout_rate, seed=3
    )
    rng = np.random.default_rng(42)
    for layer in adapter.layers:
        layer.C = rng.normal(0, 0.05, layer.C.shape).astype(np.float32)
    adapter.tag_deltas = rng.normal(0, 0.05, adapter.tag_deltas.shape).astype(
        np.float32
    )
    return adapter


def test_gradient_check_without_dropout(tiny_model):
    adapter = _randomized_adapter(tiny_model, dropout_rate=0.0)
    rng = np.random.default_rng(9)
    batch = make_examples(rng, 3, with_tags=True)
    worst = gradient_check(tiny_model, adapter, batch, n_samples=50, seed=0)
    assert worst < 1e-4


def test_gradient_check_with_dropout(tiny_model):
    adapter = _randomized_adapter(tiny_model, dropout_rate=0.2)
    rng = np.random.default_rng(10)
    batch = make_examples(rng, 3, with_tags=True)
    worst = gradient_check(
        tiny_model, adapter, batch, n_samples=50, seed=1, dropout_seed=123
    )
    assert worst < 1e-4


# -- learning-rate schedule --------------------------------------------------


def test_lr_schedule_shape():
    cfg = TrainConfig(steps=1000, learning_rate=1e-4, warmup_fraction=0.10)
    warmup = 100
    assert lr_at_step(warmup, cfg) == cfg.learning_rate
    assert lr_at_step(50, cfg) == pytest.approx(cfg.learning_rate * 0.5)
    assert lr_at_step(cfg.steps, cfg) == 0.0
    values = [lr_at_step(s, cfg) for s in range(1, cfg.steps + 1)]
    assert all(b >= a for a, b in zip(values[:warmup], values[1:warmup]))
    assert all(b <= a for a, b in zip(values[warmup:], values[warmup + 1 :]))
    assert max(values) == cfg.learning_rate


# -- training loops ----------------------------------------------------------


def test_pretrain_learns_and_freezes_unused_rows():
    model = ToyLM.init(TINY)
    unused_id = 25
    row_before = model.weights["embed"][unused_id].copy()
    rng = np.random.default_rng(5)
    # Ids 0..19 only, so id 25 never receives a gradient.
    examples = []
    for _ in range(30):
        inp = tuple(int(x) for x in rng.integers(0, 20, size=4))
        tgt = tuple(int(x) for x in rng.integers(32, 39, size=3))
        examples.append(TrainingExample(inp, tgt))
    cfg = TrainConfig(steps=120, learning_rate=1e-3, batch_size=8, seed=0,
                      log_every=20)
    curve = pretrain(model, examples, cfg)
    assert curve[-1][1] < curve[0][1]
    assert model.weights["embed"][unused_id].tobytes() == row_before.tobytes()
    assert model.weights["embed"][3].tobytes() != row_before.tobytes()


def test_overfits_small_set():
    model = ToyLM.init(TINY)
    rng = np.random.default_rng(5)
    examples = make_examples(rng, 50)
    cfg = TrainConfig(steps=2000, learning_rate=1e-3, batch_size=8, seed=0,
                      log_every=100)
    curve = pretrain(model, examples, cfg)
    assert curve[-1][1] < 0.1


def test_pretrain_is_deterministic():
    rng = np.random.default_rng(6)
    examples = make_examples(rng, 20)
    cfg = TrainConfig(steps=60, learning_rate=1e-3, batch_size=4, seed=2,
                      log_every=20)
    runs = []
    for _ in range(2):
        model = ToyLM.init(TINY)
        curve = pretrain(model, examples, cfg)
        runs.append((curve, weight_bytes(model)))
    assert runs[0] == runs[1]


def test_adapter_training_leaves_base_untouched(tiny_model):
    rng = np.random.default_rng(7)
    examples = make_examples(rng, 20, with_tags=True)
    adapter = init_adapter(tiny_model.shape_spec(), r=2, alpha=8.0,
                           dropout_rate=0.1, seed=1)
    before = weight_bytes(tiny_model)
    c_before = adapter.layers[0].C.tobytes()
    cfg = TrainConfig(steps=80, learning_rate=1e-3, batch_size=4, seed=3,
                      log_every=20)
    curve = train_adapter(tiny_model, adapter, examples, cfg)
    assert weight_bytes(tiny_model) == before
    assert adapter.layers[0].C.tobytes() != c_before
    assert np.abs(adapter.tag_deltas).sum() > 0
    assert curve[-1][1] < curve[0][1]


def test_adapter_training_is_deterministic(tiny_model):
    rng = np.random.default_rng(8)
    examples = make_examples(rng, 16, with_tags=True)
    cfg = TrainConfig(steps=40, learning_rate=1e-3, batch_size=4, seed=4,
                      log_every=10)
    results = []
    for _ in range(2):
        adapter = init_adapter(tiny_model.shape_spec(), r=2, dropout_rate=0.1,
                               seed=5)
        curve = train_adapter(tiny_model, adapter, examples, cfg)
        results.append(
            (curve, adapter.layers[0].B.tobytes(), adapter.layers[0].C.tobytes(),
             adapter.tag_deltas.tobytes())
        )
    assert results[0] == results[1]


def test_non_finite_loss_is_reported():
    model = ToyLM.init(TINY)
    model.weights["embed"] = np.full_like(model.weights["embed"], np.nan)
    model.invalidate_cache()
    examples = [TrainingExample((1, 2), (33,))]
    cfg = TrainConfig(steps=5, log_every=1)
    with pytest.raises(NonFiniteLoss):
        pretrain(model, examples, cfg)


# -- persistence -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = ToyLM.init(TINY)
    path = tmp_path / "model.utt"
    model.save(path)
    loaded = ToyLM.load(path)
    assert loaded.config == model.config
    assert weight_bytes(loaded) == weight_bytes(model)
    assert loaded.fingerprint() == model.fingerprint()


def test_checkpoint_detects_corruption(tmp_path):
    model = ToyLM.init(TINY)
    path = tmp_path / "model.utt"
    model.save(path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFile):
        ToyLM.load(path)


def test_fingerprint_tracks_weights():
    model = ToyLM.init(TINY)
    fp = model.fingerprint()
    examples = [TrainingExample((1, 2), (33, 34))]
    pretrain(model, examples, TrainConfig(steps=5, log_every=5))
    assert model.fingerprint() != fp


# -- generation --------------------------------------------------------------


def test_greedy_generation_is_deterministic_and_in_range(tiny_model):
    prompt = [1, 2, 3, 4]
    a = generate(tiny_model, prompt, max_new=10)
    b = generate(tiny_model, prompt, max_new=10)
    assert a == b
    assert len(a) <= 10
    lo, hi = TINY.speech_offset, TINY.speech_offset + TINY.speech_count
    assert all(lo <= t < hi - 1 for t in a)


def test_sampled_generation_is_seeded(tiny_model):
    prompt = [5, 6, 7]
    a = generate(tiny_model, prompt, max_new=10, mode="sampled", seed=99)
    b = generate(tiny_model, prompt, max_new=10, mode="sampled", seed=99)
    assert a == b


def test_generation_stops_at_end_of_speech():
    model = ToyLM.init(TINY)
    for name in model.weights:
        model.weights[name] = np.zeros_like(model.weights[name])
    model.weights["lnf.b"] = np.ones_like(model.weights["lnf.b"])
    head = np.zeros_like(model.weights["head"])
    head[:, TINY.eos_id] = 1.0
    model.weights["head"] = head
    model.invalidate_cache()
    assert generate(model, [1, 2], max_new=10) == []


def test_generation_rejects_overflow(tiny_model):
    with pytest.raises(SequenceTooLong):
        generate(tiny_model, [0] * 40, max_new=20)


def test_generation_rejects_unknown_mode(tiny_model):
    with pytest.raises(ValueError):
        generate(tiny_model, [1], max_new=3, mode="beam")
