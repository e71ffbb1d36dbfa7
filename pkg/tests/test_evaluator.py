import copy
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hallucinet.evaluator import (
    EvalReport,
    MetricError,
    attribute_accuracies,
    evaluate_student,
    hallucination_error,
    reduction_percent,
    spearman_correlation,
    top1_accuracy,
)
from hallucinet.models import StudentConfig, StudentModel, student_forward, teacher_forward
from hallucinet.trainer import TrainConfig, train_student

# -- independent oracles ------------------------------------------------------------


def closed_form_spearman(a, b):
    """1 - 6 sum d^2 / (n (n^2 - 1)), tie-free inputs only."""
    n = len(a)
    ra = np.argsort(np.argsort(a))
    rb = np.argsort(np.argsort(b))
    d = (ra - rb).astype(np.float64)
    return 1 - 6 * np.sum(d**2) / (n * (n**2 - 1))


def average_ranks(x):
    """Ranks starting at 1; tied values share their mean rank."""
    x = list(x)
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for m in range(i, j + 1):
            ranks[order[m]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    a, b = a - a.mean(), b - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# -- top1 ---------------------------------------------------------------------------


def test_top1_examples():
    assert top1_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert top1_accuracy([0, 0, 0, 0], [0, 1, 1, 1]) == 0.25
    with pytest.raises(MetricError):
        top1_accuracy([], [])
    with pytest.raises(MetricError):
        top1_accuracy([0, 1], [0])


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40), st.randoms())
def test_top1_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    p, l = zip(*pairs)
    ps, ls = zip(*shuffled)
    assert top1_accuracy(p, l) == top1_accuracy(ps, ls)


# -- spearman -----------------------------------------------------------------------


def test_spearman_examples():
    x = [0.1, 0.5, 0.3, 0.9]
    assert spearman_correlation(x, x) == 1.0
    assert spearman_correlation(x, [-v for v in x]) == -1.0
    assert spearman_correlation([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(0.8, abs=1e-15)


def test_spearman_closed_form_on_permutations(rng):
    for _ in range(200):
        n = int(rng.integers(2, 30))
        a, b = rng.permutation(n), rng.permutation(n)
        assert abs(spearman_correlation(a, b) - closed_form_spearman(a, b)) <= 1e-12


def test_spearman_all_permutations_of_five():
    base = np.arange(5)
    for perm in itertools.permutations(base):
        assert spearman_correlation(base, perm) == pytest.approx(closed_form_spearman(base, np.array(perm)), abs=1e-12)


def test_spearman_ties_use_average_ranks():
    a = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0]
    b = [0.3, 0.1, 0.4, 0.4, 0.9, 0.2]
    expected = pearson(average_ranks(a), average_ranks(b))
    assert spearman_correlation(a, b) == pytest.approx(expected, abs=1e-12)


def test_spearman_constant_vector_is_an_error():
    with pytest.raises(MetricError):
        spearman_correlation([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(MetricError):
        spearman_correlation([1.0], [1.0])


# integers keep the transformed values distinct in floating point
tie_free = st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True)


@settings(max_examples=60)
@given(tie_free, st.randoms())
def test_spearman_monotone_transform_invariance(a, rnd):
    b = list(a)
    rnd.shuffle(b)
    if len(set(b)) < 2:
        return
    rho = spearman_correlation(a, b)
    assert spearman_correlation(np.exp(np.asarray(a) / 100.0), b) == pytest.approx(rho, abs=1e-12)
    assert spearman_correlation(a, np.asarray(b) * 3 + 7) == pytest.approx(rho, abs=1e-12)


@settings(max_examples=60)
@given(tie_free)
def test_spearman_identity_and_reverse(a):
    a = np.asarray(a)
    assert spearman_correlation(a, a) == pytest.approx(1.0, abs=1e-12)
    assert spearman_correlation(a, -a) == pytest.approx(-1.0, abs=1e-12)


# -- attribute accuracy -------------------------------------------------------------


def test_attribute_accuracies_perfect_and_one_wrong():
    labels = np.array([[0, 1, 2, 0, 1], [3, 0, 1, 2, 2], [1, 1, 0, 1, 0]])
    perfect = [labels[:, i] for i in range(5)]
    assert attribute_accuracies(perfect, labels) == [1.0] * 5
    broken = list(perfect)
    broken[2] = (labels[:, 2] + 1) % 3
    assert attribute_accuracies(broken, labels) == [1.0, 1.0, 0.0, 1.0, 1.0]


def test_attribute_accuracies_counting_oracle(rng):
    labels = rng.integers(0, 3, size=(17, 5))
    preds = [np.where(rng.random(17) < 0.6, labels[:, i], (labels[:, i] + 1) % 3) for i in range(5)]
    expected = [sum(int(p == l) for p, l in zip(preds[i], labels[:, i])) / 17 for i in range(5)]
    assert attribute_accuracies(preds, labels) == expected
    logits = [torch.nn.functional.one_hot(torch.tensor(p), 3).float() for p in preds]
    assert attribute_accuracies(logits, labels) == expected


def test_attribute_accuracies_arity_mismatch():
    with pytest.raises(MetricError):
        attribute_accuracies([np.zeros(3)] * 4, np.zeros((3, 5), dtype=int))


# -- hallucination error ------------------------------------------------------------


def _student_for(data, teacher, **kw):
    _, T, C, H, W = data["train"].frames.shape
    cfg = StudentConfig(in_channels=C, height=H, width=W, channels=(4, 8), feature_dim=teacher.config.feature_dim, **kw)
    return StudentModel(cfg)


def test_hallucination_error_rigged_student_is_zero(tiny_data, tiny_teacher):
    one = tiny_data["test"].subset([0])
    student = _student_for(tiny_data, tiny_teacher)
    target, _ = teacher_forward(tiny_teacher, one.frames[0])
    with torch.no_grad():
        student.hallucinate.weight.zero_()
        student.hallucinate.bias.copy_(target)
    assert hallucination_error(student, tiny_teacher, one) == 0.0


def test_hallucination_error_matches_standalone_per_clip_oracle(tiny_data, tiny_teacher):
    arrays = tiny_data["test"]
    assert len(arrays) <= 32
    student = _student_for(tiny_data, tiny_teacher, init_seed=4).double()
    teacher = copy.deepcopy(tiny_teacher).double()
    T = arrays.frames.shape[1]
    per_clip = []
    for clip in arrays.frames:
        s = student_forward(student, clip[T // 2]).hallucinated.numpy()
        t, _ = teacher_forward(teacher, clip)
        per_clip.append(np.mean((np_sigmoid(s) - np_sigmoid(t.numpy())) ** 2))
    assert abs(hallucination_error(student, teacher, arrays) - float(np.mean(per_clip))) <= 1e-9


def test_hallucination_error_trained_below_untrained(tiny_data, tiny_teacher):
    cfg = TrainConfig(epochs=6, lr=3e-3, batch_size=7, channels=(4, 8), seed=1)
    untrained = StudentModel(_student_for(tiny_data, tiny_teacher, init_seed=1).config)
    trained, _ = train_student(tiny_data, tiny_teacher, cfg)
    split = tiny_data["test"]
    assert hallucination_error(trained, tiny_teacher, split) < hallucination_error(untrained, tiny_teacher, split)


def test_hallucination_error_errors(tiny_data, tiny_teacher):
    student = _student_for(tiny_data, tiny_teacher)
    with pytest.raises(MetricError):
        hallucination_error(student, tiny_teacher, tiny_data["test"].subset([]))
    narrow = StudentModel(
        StudentConfig(in_channels=1, height=16, width=16, channels=(4,), feature_dim=3)
    )
    with pytest.raises(ValueError):
        hallucination_error(narrow, tiny_teacher, tiny_data["test"])


# -- reports ------------------------------------------------------------------------


def test_evaluation_is_pure_and_report_round_trips(tiny_data, tiny_teacher, tmp_path):
    student = _student_for(tiny_data, tiny_teacher)
    a = evaluate_student(student, tiny_data["val"], tiny_teacher)
    b = evaluate_student(student, tiny_data["val"], tiny_teacher)
    assert a == b
    a.write(tmp_path / "r.jsonl")
    assert EvalReport.read(tmp_path / "r.jsonl") == a
    assert np.sum(a.confusion) == a.sample_count == len(tiny_data["val"])
    assert "top1" in a.to_text()


def test_report_rejects_inconsistent_confusion():
    with pytest.raises(MetricError):
        EvalReport(split="test", metrics={}, confusion=[[1, 0], [0, 1]], sample_count=3, checkpoint_hash="x")


def test_reduction_percent_arithmetic():
    assert reduction_percent(3.3e-3, 3.2e-3) == pytest.approx(3.03, abs=0.01)
    assert reduction_percent(4.2e-3, 3.9e-3) == pytest.approx(7.14, abs=0.01)
    assert reduction_percent(1.0, 1.2) == pytest.approx(-20.0)
