import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msfront.ctc import (InfeasibleLabelError, cer, collapse, merge_repeats, ctc_loss, encode, greedy_decode, min_frames,
                         softmax, wer)
from msfront.tensor import Tensor

from oracles import ctc_brute_force, levenshtein, numerical_grad, rel_error


def loss_of(logits, label):
    return ctc_loss(Tensor(logits), label).item()


# --- loss values -----------------------------------------------------------

def test_single_frame_uniform():
    assert loss_of(np.zeros((1, 3)), [1]) == pytest.approx(math.log(3), abs=1e-12)


def test_two_frames_uniform_enumerated():
    # paths for "a" over {blank, a}: aa, a-, -a -> 3 of 4 equiprobable paths
    assert loss_of(np.zeros((2, 2)), [1]) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_brute_force(np.zeros((2, 2)), [1]) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_random_logits_match_enumeration():
    logits = np.random.default_rng(0).standard_normal((4, 3))
    assert abs(loss_of(logits, [1, 2]) - ctc_brute_force(logits, [1, 2])) < 1e-10


def all_cases(max_t=5, max_label=3, max_alpha=3):
    for n_alpha in range(1, max_alpha + 1):
        for length in range(1, max_label + 1):
            for label in itertools.product(range(1, n_alpha + 1), repeat=length):
                for t in range(min_frames(label), max_t + 1):
                    yield t, n_alpha, list(label)


def test_exhaustive_small_cases():
    rng = np.random.default_rng(1)
    worst = 0.0
    for t, n_alpha, label in all_cases(max_t=4, max_label=2, max_alpha=2):
        logits = rng.standard_normal((t, n_alpha + 1)) * 2
        worst = max(worst, abs(loss_of(logits, label) - ctc_brute_force(logits, label)))
    assert worst < 1e-10


def test_infeasible_label():
    with pytest.raises(InfeasibleLabelError):
        loss_of(np.zeros((2, 3)), [1, 1])  # "aa" needs a blank in between: 3 frames
    with pytest.raises(InfeasibleLabelError):
        loss_of(np.zeros((1, 3)), [1, 2])
    assert min_frames([1, 1, 2, 2]) == 6


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    for trial in range(5):
        logits = rng.standard_normal((5, 4))
        label = [1, 3, 3] if trial % 2 else [2, 1]
        t = Tensor(logits, requires_grad=True)
        ctc_loss(t, label).backward()
        (numeric,) = numerical_grad(lambda: loss_of(logits, label), [logits])
        assert rel_error(t.grad, numeric) < 1e-5


def test_gradient_rows_sum_to_zero():
    logits = np.random.default_rng(3).standard_normal((6, 4))
    t = Tensor(logits, requires_grad=True)
    ctc_loss(t, [1, 2, 3]).backward()
    np.testing.assert_allclose(t.grad.sum(axis=1), 0, atol=1e-12)


def test_softmax_rows_sum_to_one():
    logits = np.random.default_rng(4).standard_normal((20, 7)) * 30
    assert np.abs(softmax(logits).sum(axis=1) - 1).max() < 1e-12


def test_long_sequence_stays_finite():
    logits = np.random.default_rng(5).standard_normal((400, 6)) * 10
    assert np.isfinite(loss_of(logits, [1, 2, 3, 4, 5] * 10))


# --- greedy decoding -------------------------------------------------------

def one_hot_logits(path, vocab=3):
    out = np.zeros((len(path), vocab))
    out[np.arange(len(path)), path] = 5.0
    return out


def test_decode_collapse_then_strip():
    assert greedy_decode(one_hot_logits([1, 1, 0, 2]), "ab") == "ab"


def test_decode_all_blank():
    assert greedy_decode(one_hot_logits([0, 0, 0]), "ab") == ""


def test_decode_blank_separates_repeats():
    assert greedy_decode(one_hot_logits([1, 0, 1]), "ab") == "aa"


@settings(max_examples=200)
@given(st.lists(st.integers(0, 4), max_size=30))
def test_repeat_merge_is_idempotent(path):
    once = merge_repeats(path)
    assert merge_repeats(once) == once
    assert collapse(path) == [p for p in once if p != 0]


def test_encode_rejects_unknown():
    assert encode("ba", "ab") == [2, 1]
    with pytest.raises(ValueError, match="not in alphabet"):
        encode("z", "ab")


# --- error rates -----------------------------------------------------------

def test_wer_identical():
    assert wer("the cat sat", "the cat sat") == 0.0


def test_wer_one_substitution():
    assert wer("the cat sat", "the bat sat") == pytest.approx(1 / 3)


def test_wer_empty_reference():
    with pytest.raises(ValueError):
        wer("", "x")
    with pytest.raises(ValueError):
        cer("", "x")


@settings(max_examples=200)
@given(st.text(alphabet="abc ", min_size=1, max_size=12), st.text(alphabet="abc ", max_size=12))
def test_rates_match_dp_oracle(ref, hyp):
    assert cer(ref, hyp) == levenshtein(ref, hyp) / len(ref)
    if ref.split():
        assert wer(ref, hyp) == levenshtein(ref.split(), hyp.split()) / len(ref.split())
