import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from inkfuse.critics import (
    CriticInputError,
    Discriminator,
    TextRecognizer,
    WriterClassifier,
    classify_writer,
    ctc_loss,
    ctc_min_frames,
    discriminate,
    greedy_decode,
    hinge_discriminator_loss,
    hinge_generator_loss,
    pad_batch,
    recognize,
    writer_ce_loss,
)
from oracles import ctc_brute_force, neg_log_softmax

# -- hinge -------------------------------------------------------------------


@pytest.mark.parametrize(
    "scores, expected", [([2.0], -2.0), ([1.0, -1.0], 0.0), ([0.3, 0.5, -0.2], -0.2)]
)
def test_hinge_generator_examples(scores, expected):
    assert hinge_generator_loss(torch.tensor(scores, dtype=torch.float64)).item() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize(
    "real, fake, expected",
    [([2.0], [-3.0], 0.0), ([0.0], [0.0], 2.0), ([0.5, 1.5], [-0.5], 0.75)],
)
def test_hinge_discriminator_examples(real, fake, expected):
    loss = hinge_discriminator_loss(torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64))
    assert loss.item() == expected


@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=8),
    st.lists(st.floats(-5, 5), min_size=1, max_size=8),
)
def test_hinge_discriminator_zero_iff_margins(real, fake):
    loss = hinge_discriminator_loss(torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64))
    assert loss.item() >= 0
    assert (loss.item() == 0) == (min(real) >= 1 and max(fake) <= -1)


def test_hinge_empty_rejected():
    with pytest.raises(ValueError):
        hinge_generator_loss(torch.tensor([]))
    with pytest.raises(ValueError):
        hinge_discriminator_loss(torch.tensor([1.0]), torch.tensor([]))


# -- CTC -----------------------------------------------------------------------


def test_ctc_single_frame_closed_form():
    # p(target symbol) = 0.25 on a single frame
    probs = torch.tensor([[[0.5, 0.25, 0.25]]], dtype=torch.float64)
    loss = ctc_loss(probs.log(), [[1]], [1])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_ctc_certain_path_is_zero():
    logits = torch.full((3, 1, 4), -1e4, dtype=torch.float64)
    for t, s in enumerate([1, 0, 1]):
        logits[t, 0, s] = 0.0
    assert ctc_loss(logits, [[1, 1]], [3]).item() < 1e-6


def test_ctc_random_four_step_two_char():
    rng = np.random.default_rng(4)
    logits = torch.tensor(rng.normal(size=(4, 1, 3)))
    log_probs = torch.log_softmax(logits, -1)[:, 0].numpy()
    assert ctc_loss(logits, [[1, 2]], [4]).item() == pytest.approx(ctc_brute_force(log_probs, [1, 2]), abs=1e-6)


def test_ctc_exhaustive_small_cases():
    """Every admissible (T <= 5, |target| <= 3) case over three non-blank symbols."""
    rng = np.random.default_rng(0)
    worst, cases = 0.0, 0
    for t_steps in range(1, 6):
        logits = torch.tensor(rng.normal(scale=1.5, size=(t_steps, 1, 4)))
        log_probs = torch.log_softmax(logits, -1)[:, 0].numpy()
        for length in range(1, 4):
            for target in itertools.product([1, 2, 3], repeat=length):
                if ctc_min_frames(target) > t_steps:
                    continue
                ours = ctc_loss(logits, [list(target)], [t_steps]).item()
                worst = max(worst, abs(ours - ctc_brute_force(log_probs, list(target))))
                cases += 1
    assert cases > 100
    assert worst < 1e-6


def test_ctc_batch_mean_of_items():
    rng = np.random.default_rng(1)
    logits = torch.tensor(rng.normal(size=(5, 2, 4)))
    a = ctc_loss(logits[:, :1], [[1, 2]], [5]).item()
    b = ctc_loss(logits[:3, 1:], [[3]], [3]).item()
    assert ctc_loss(logits, [[1, 2], [3]], [5, 3]).item() == pytest.approx((a + b) / 2, abs=1e-12)


def test_ctc_inadmissible_target():
    with pytest.raises(ValueError, match="frames"):
        ctc_loss(torch.zeros(2, 1, 4), [[1, 1]], [2])  # repeat needs a blank: 3 frames
    with pytest.raises(ValueError):
        ctc_loss(torch.zeros(2, 1, 4), [[1, 2, 3]], [2])


def test_ctc_nonnegative():
    logits = torch.randn(6, 3, 5)
    assert ctc_loss(logits, [[1], [2, 3], [4, 4]], [6, 6, 6]).item() >= 0


# -- cross-entropy ---------------------------------------------------------------


def test_writer_ce_examples():
    f64 = torch.float64
    assert writer_ce_loss(torch.tensor([[0.0, 0.0]], dtype=f64), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert writer_ce_loss(torch.tensor([[10.0, -10.0]], dtype=f64), [0]).item() < 1e-4
    value = writer_ce_loss(torch.tensor([[1.0, 2.0, 3.0]], dtype=f64), [2]).item()
    assert value == pytest.approx(0.40760596444438013, abs=1e-7)


def test_writer_ce_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.normal(scale=3, size=(4, 6))
        labels = rng.integers(0, 6, 4)
        ours = writer_ce_loss(torch.tensor(logits), labels.tolist()).item()
        ref = np.mean([neg_log_softmax(row, int(y)) for row, y in zip(logits, labels)])
        assert abs(ours - ref) < 1e-7 and ours >= 0


def test_writer_ce_label_range():
    with pytest.raises(ValueError):
        writer_ce_loss(torch.zeros(1, 3), [3])
    with pytest.raises(ValueError):
        writer_ce_loss(torch.zeros(1, 3), [-1])


# -- networks --------------------------------------------------------------------


def test_discriminator_shape():
    scores = discriminate(Discriminator(16), torch.rand(4, 1, 32, 48) * 2 - 1)
    assert scores.shape == (4,)


def test_recognizer_frames(tokenizer):
    logits, lengths = recognize(TextRecognizer(tokenizer.num_classes, 16, 32), torch.zeros(1, 1, 32, 64))
    assert logits.shape == (16, 1, 96) and lengths == [16]


def test_writer_classifier_339():
    logits = classify_writer(WriterClassifier(339, 16), torch.zeros(2, 1, 32, 40))
    assert logits.shape == (2, 339)


def test_wrong_height_rejected(tokenizer):
    for net in (Discriminator(8), WriterClassifier(2, 8), TextRecognizer(tokenizer.num_classes, 8, 8)):
        with pytest.raises(CriticInputError):
            net(torch.zeros(1, 1, 31, 40))


def test_item_result_independent_of_batch_mates(tokenizer):
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    short = rng.integers(0, 256, (32, 20), dtype=np.uint8)
    mates = [rng.integers(0, 256, (32, 52), dtype=np.uint8) for _ in range(2)]
    batch_a, widths = pad_batch([short, mates[0]])
    batch_b, _ = pad_batch([short, mates[1]])
    assert batch_a.shape == (2, 1, 32, 52) and widths == [20, 52]
    d, wcn = Discriminator(8).eval(), WriterClassifier(3, 8).eval()
    tr = TextRecognizer(tokenizer.num_classes, 8, 8).eval()
    with torch.no_grad():
        assert torch.allclose(d(batch_a, widths)[0], d(batch_b, widths)[0], atol=1e-6)
        assert torch.allclose(wcn(batch_a, widths)[0], wcn(batch_b, widths)[0], atol=1e-6)
        la, lens = tr(batch_a, widths)
        lb, _ = tr(batch_b, widths)
        assert lens == [5, 13]
        # the BiLSTM only runs over the first 5 frames of the short item
        assert torch.allclose(la[:5, 0], lb[:5, 0], atol=1e-6)


def test_greedy_decode(tokenizer):
    a, b = tokenizer.encode("ab")
    seq = [0, a, a, 0, a, b, b, 0]
    logits = torch.full((len(seq), 1, tokenizer.num_classes), -5.0)
    for t, s in enumerate(seq):
        logits[t, 0, s] = 5.0
    assert greedy_decode(logits, [len(seq)], tokenizer) == ["aab"]
    assert greedy_decode(logits, [3], tokenizer) == ["a"]
