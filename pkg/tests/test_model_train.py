import numpy as np
import pytest

from msfront import tensor as T
from msfront.audio import Corpus, CorpusConfig, Utterance, synth_corpus
from msfront.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from msfront.frontend import scaled_multiscale
from msfront.model import ModelConfig, build_model, expected_parameter_count
from msfront.tensor import Tensor
from msfront.train import (DivergenceError, NesterovSGD, TrainConfig, augmentation_plan, epoch_order,
                           evaluate, restore_state, run_epoch, save_state, setup, train)


@pytest.fixture(scope="module")
def tiny_corpus():
    return synth_corpus(CorpusConfig(n_utts=4, alphabet_size=3, min_chars=3, max_chars=3, seed=1))


def small_setup(corpus, **train_kwargs):
    fe = scaled_multiscale(2, seed=0)
    mc = ModelConfig(corpus.alphabet, hidden_size=8, n_rnn_layers=1)
    tc = TrainConfig(**{"batch_size": 2, "epochs": 1, "noise_fraction": 0.0, **train_kwargs})
    return setup(fe, mc, corpus, tc)


# --- model structure -------------------------------------------------------

def test_parameter_count_closed_form():
    mc = ModelConfig("ab", hidden_size=4, n_rnn_layers=1)
    model = build_model(mc, input_features=3)
    # bn_in 2*3, conv 11*3*4+4, bn_conv 2*4, rnn 2*(3 matrices/vectors: 4*4+4*4+4), bn 2*8, fc 8*3+3
    assert model.n_parameters() == 6 + 136 + 8 + 72 + 16 + 27 == 265
    assert expected_parameter_count(mc, 3) == 265


def test_full_size_shape_is_constructible():
    mc = ModelConfig("abcdefghijklmnopqrstuvwxyz' ", hidden_size=1770, n_rnn_layers=3)
    assert mc.n_classes == 29
    assert expected_parameter_count(mc, 161) > 3e7  # full-size shape, counted but not built


def test_output_shape_valid_conv():
    model = build_model(ModelConfig("ab", hidden_size=4, n_rnn_layers=2), input_features=3)
    feats = [Tensor(np.random.default_rng(0).standard_normal((15, 3)))]
    (logits,) = model.forward(feats)
    assert logits.shape == (5, 3)


def test_same_seed_same_weights():
    mc = ModelConfig("abc", hidden_size=5, n_rnn_layers=2)
    a, b = build_model(mc, 4, seed=3), build_model(mc, 4, seed=3)
    for (ka, pa), (kb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert ka == kb and pa.data.tobytes() == pb.data.tobytes()


def test_model_config_validation():
    with pytest.raises(ValueError, match="odd"):
        ModelConfig("ab", conv_window=10)
    with pytest.raises(ValueError, match="duplicates"):
        ModelConfig("aab")


def test_batch_statistics_are_shared_across_utterances():
    model = build_model(ModelConfig("ab", hidden_size=4, n_rnn_layers=1), input_features=2)
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((14, 2)), rng.standard_normal((16, 2)) + 3
    together = model.forward([Tensor(a), Tensor(b)])
    alone = model.forward([Tensor(a)])
    assert together[0].shape == alone[0].shape
    assert not np.allclose(together[0].data, alone[0].data)


def test_inference_uses_running_stats():
    model = build_model(ModelConfig("ab", hidden_size=4, n_rnn_layers=1), input_features=2)
    x = Tensor(np.random.default_rng(2).standard_normal((12, 2)))
    before = model.bn_in.running_mean.copy()
    model.forward([x], training=False)
    np.testing.assert_array_equal(model.bn_in.running_mean, before)
    model.forward([x], training=True)
    np.testing.assert_allclose(model.bn_in.running_mean, 0.1 * x.data.mean(axis=0))


# --- optimizer -------------------------------------------------------------

def test_nesterov_matches_hand_iteration():
    # f(x) = 0.5 * x^2, gradient x; two steps of v <- mu v - lr g(theta + mu v), theta <- theta + v
    p = Tensor([2.0], requires_grad=True)
    opt = NesterovSGD({"x": p}, lr=0.1, momentum=0.9, clip_norm=None)
    theta, v = 2.0, 0.0
    for _ in range(3):
        opt.lookahead()
        assert p.data[0] == pytest.approx(theta + 0.9 * v)
        T.mul(T.mul(p, p), Tensor([0.5])).backward()
        opt.step()
        g = theta + 0.9 * v
        v = 0.9 * v - 0.1 * g
        theta = theta + v
        assert p.data[0] == pytest.approx(theta, abs=1e-15)


def test_gradient_clipping_caps_update():
    p = Tensor([0.0, 0.0], requires_grad=True)
    opt = NesterovSGD({"x": p}, lr=1.0, momentum=0.0, clip_norm=5.0)
    opt.lookahead()
    p.grad = np.array([30.0, 40.0])
    assert opt.step() == pytest.approx(50.0)
    np.testing.assert_allclose(p.data, [-3.0, -4.0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


# --- schedule --------------------------------------------------------------

def test_first_epoch_sortagrad_then_shuffled(tiny_corpus):
    corpus = synth_corpus(CorpusConfig(n_utts=10, seed=4))
    first = epoch_order(corpus, 0, seed=0)
    lengths = [len(corpus[i].waveform) for i in first]
    assert lengths == sorted(lengths)
    assert sorted(epoch_order(corpus, 1, seed=0)) == list(range(10))
    assert epoch_order(corpus, 1, seed=0) == epoch_order(corpus, 1, seed=0)


def test_augmentation_fraction_and_snr_range():
    plan = augmentation_plan(50, epoch=3, tc=TrainConfig())
    assert len(plan) == 20
    assert all(0 <= s <= 15 for s in plan.values())
    assert plan == augmentation_plan(50, epoch=3, tc=TrainConfig())
    assert augmentation_plan(50, 3, TrainConfig(noise_fraction=0)) == {}


# --- training --------------------------------------------------------------

def test_lr_zero_leaves_weights_unchanged(tiny_corpus):
    state = small_setup(tiny_corpus, lr=0.0)
    before = {k: p.data.copy() for k, p in state.named_parameters().items()}
    run_epoch(state, tiny_corpus)
    for k, p in state.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[k])


def test_overfit_single_utterance():
    corpus = synth_corpus(CorpusConfig(n_utts=1, alphabet_size=3, min_chars=3, max_chars=3, seed=2))
    state = small_setup(corpus, lr=3e-3, momentum=0.9, batch_size=1)
    losses = [run_epoch(state, corpus) for _ in range(200)]
    assert losses[-1] < losses[0]
    assert min(losses[-10:]) < 0.5 * losses[0]


def test_epoch_one_loss_is_deterministic(tiny_corpus):
    a = run_epoch(small_setup(tiny_corpus, noise_fraction=0.5), tiny_corpus)
    b = run_epoch(small_setup(tiny_corpus, noise_fraction=0.5), tiny_corpus)
    assert a == b


def test_divergence_is_reported(tiny_corpus):
    state = small_setup(tiny_corpus, lr=1e300, momentum=0.0)
    with pytest.raises(DivergenceError, match="diverged"), np.errstate(over="ignore", invalid="ignore"):
        for _ in range(3):
            run_epoch(state, tiny_corpus)


def test_checkpoint_resume_is_bit_identical(tiny_corpus, tmp_path):
    straight = small_setup(tiny_corpus, epochs=3, noise_fraction=0.5)
    rows_straight = []
    for _ in range(3):
        run_epoch(straight, tiny_corpus, rows_straight)

    first = small_setup(tiny_corpus, epochs=3, noise_fraction=0.5)
    run_epoch(first, tiny_corpus)
    run_epoch(first, tiny_corpus)
    save_state(first, tmp_path / "ck.bin")
    resumed = restore_state(tmp_path / "ck.bin")
    rows_resumed = []
    run_epoch(resumed, tiny_corpus, rows_resumed)
    n = len(rows_resumed)
    assert [r[:3] for r in rows_resumed] == [r[:3] for r in rows_straight[-n:]]
    for k, p in straight.named_parameters().items():
        assert p.data.tobytes() == resumed.named_parameters()[k].data.tobytes()


def test_train_writes_log_and_checkpoints(tiny_corpus, tmp_path):
    state = small_setup(tiny_corpus, epochs=2)
    train(state, tiny_corpus, tmp_path)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,lr,wall_ms"
    assert len(lines) == 1 + 2 * 2
    assert sorted(p.name for p in tmp_path.glob("*.bin")) == ["ckpt_epoch001.bin", "ckpt_epoch002.bin"]


def test_evaluate_rejects_foreign_alphabet(tiny_corpus):
    state = small_setup(tiny_corpus)
    foreign = Corpus([Utterance("x", tiny_corpus[0].waveform, "z")], "z")
    with pytest.raises(ValueError, match="alphabet"):
        evaluate(state, foreign)


# --- checkpoint container --------------------------------------------------

def test_checkpoint_container_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"a": rng.standard_normal((2, 3, 4)), "b.ü": np.array([np.pi]), "c": rng.standard_normal(7)}
    save_checkpoint(tmp_path / "x.bin", arrays, {"epoch": 3})
    back, meta = load_checkpoint(tmp_path / "x.bin")
    assert meta == {"epoch": 3}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_layout_header(tmp_path):
    save_checkpoint(tmp_path / "x.bin", {"w": np.array([[1.0, 2.0]])}, {})
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == b"MSFCKPT\0"
    assert int.from_bytes(raw[8:12], "little") == 1
    # tail: name "w", ndim 2, shape (1, 2), then two float64 values
    assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"garbage!" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")
