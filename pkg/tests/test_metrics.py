import numpy as np
import pytest

from crosskd.errors import ContractError
from crosskd.metrics import (
    accuracy,
    cam_from_gradients,
    confusion_matrix,
    grad_cam,
    latency,
    macro_f1,
    per_class_f1,
    read_pgm,
    write_heatmap_text,
    write_pgm,
)
from crosskd.models import StudentConfig, StudentModel, TeacherConfig, TeacherModel
from crosskd.tensor import Tensor


def test_confusion_matrix_rows_true_cols_predicted():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 0], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]
    assert cm.sum() == 4


def test_macro_f1_perfect_diagonal():
    assert macro_f1(np.diag([3, 4, 5])) == 1.0
    assert accuracy(np.diag([3, 4, 5])) == 1.0


def test_macro_f1_hand_computed():
    cm = np.array([[5, 5], [0, 10]])
    assert per_class_f1(cm) == pytest.approx([2 / 3, 0.8], abs=1e-12)
    assert macro_f1(cm) == pytest.approx(0.7333, abs=1e-4)
    assert accuracy(cm) == 0.75


def test_all_predictions_one_class():
    cm = np.array([[10, 0], [10, 0]])
    assert macro_f1(cm) == pytest.approx(1 / 3, abs=1e-12)


def test_all_wrong_accuracy_zero():
    assert accuracy(np.array([[0, 4], [6, 0]])) == 0.0


def test_zero_support_class_scores_zero():
    cm = np.array([[4, 0, 0], [0, 4, 0], [0, 0, 0]])
    assert per_class_f1(cm).tolist() == [1.0, 1.0, 0.0]
    assert macro_f1(cm) == pytest.approx(2 / 3)


@pytest.mark.parametrize("cm", [np.zeros((2, 2)), np.zeros((0, 0)), np.zeros((2, 3)), np.array([[1, -1], [0, 1]])])
def test_invalid_confusion_matrix(cm):
    with pytest.raises(ContractError):
        macro_f1(cm)
    with pytest.raises(ContractError):
        accuracy(cm)


def test_metrics_permutation_invariant(rng):
    cm = rng.integers(0, 10, size=(4, 4))
    perm = rng.permutation(4)
    permuted = cm[np.ix_(perm, perm)]
    assert macro_f1(permuted) == pytest.approx(macro_f1(cm), abs=1e-15)
    assert accuracy(permuted) == accuracy(cm)


def _loop_cam(features, grads):
    k, h, w = features.shape
    weights = [sum(grads[c, i, j] for i in range(h) for j in range(w)) / (h * w) for c in range(k)]
    cam = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            cam[i, j] = max(0.0, sum(weights[c] * features[c, i, j] for c in range(k)))
    lo, hi = cam.min(), cam.max()
    return (cam - lo) / (hi - lo) if hi > lo else cam


def test_cam_matches_loop_oracle_two_channels():
    features = np.array([[[1.0, 2.0], [0.5, -1.0]], [[0.3, 0.0], [2.0, 1.0]]])
    grads = np.array([[[0.2, 0.4], [0.1, 0.3]], [[-0.1, 0.5], [0.2, 0.2]]])
    assert np.allclose(cam_from_gradients(features, grads), _loop_cam(features, grads), atol=1e-12)


def test_cam_single_channel_uniform_gradient():
    f = np.array([[[0.0, 1.0], [3.0, -2.0]]])
    cam = cam_from_gradients(f, np.full_like(f, 0.7))
    relu = np.maximum(f[0], 0)
    assert np.allclose(cam, relu / relu.max(), atol=1e-15)


def test_cam_zero_gradient_gives_zero_map():
    f = np.random.default_rng(0).random((3, 4, 4))
    assert np.array_equal(cam_from_gradients(f, np.zeros_like(f)), np.zeros((4, 4)))


def test_cam_invariant_to_positive_gradient_scale():
    rng = np.random.default_rng(1)
    f, g = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert np.allclose(cam_from_gradients(f, g), cam_from_gradients(f, 7.5 * g), atol=1e-12)


def _student(seed=0):
    return StudentModel(StudentConfig(), num_classes=3, seed=seed)


def test_grad_cam_matches_manual_gradients(rng):
    model = _student()
    image = rng.random((1, 32, 32, 1))
    cam = grad_cam(model, image, target_class=1)
    assert cam.shape == (4, 4)
    assert cam.min() >= 0.0 and cam.max() <= 1.0
    assert model.training is True  # mode restored
    # independent route: finite differences of the target logit w.r.t. F_S
    feats = model.eval().features(image).data
    grads = np.zeros_like(feats)
    step = 1e-6
    for idx in np.ndindex(feats.shape):
        up, down = feats.copy(), feats.copy()
        up[idx] += step
        down[idx] -= step
        grads[idx] = (model.classify(Tensor(up)).data[0, 1] - model.classify(Tensor(down)).data[0, 1]) / (2 * step)
    assert np.allclose(cam, cam_from_gradients(feats[0], grads[0]), atol=1e-6)


def test_grad_cam_rejects_bad_class(rng):
    with pytest.raises(ContractError):
        grad_cam(_student(), rng.random((32, 32, 1)), target_class=3)


def test_heatmap_exports(tmp_path):
    cam = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(cam, tmp_path / "m.pgm", scale=3)
    pixels = read_pgm(tmp_path / "m.pgm")
    assert pixels.shape == (6, 6)
    assert pixels[0, 0] == 0 and pixels[3, 0] == 255 and pixels[0, 3] == 128
    write_heatmap_text(cam, tmp_path / "m.txt")
    assert np.allclose(np.loadtxt(tmp_path / "m.txt"), cam)


def test_latency_positive_and_stable():
    student = _student()
    a = latency(student, (32, 32, 1), warmup_iters=3, timed_iters=20)
    b = latency(student, (32, 32, 1), warmup_iters=3, timed_iters=20)
    assert a > 0 and b > 0
    assert max(a, b) / min(a, b) < 3.0


def test_student_faster_than_teacher():
    teacher = TeacherModel(TeacherConfig(), num_classes=3)
    student = _student()
    s = latency(student, (32, 32, 1), warmup_iters=5, timed_iters=40)
    t = latency(teacher, (32, 32, 1), warmup_iters=5, timed_iters=40)
    assert s < t


def test_latency_needs_one_iteration():
    with pytest.raises(ContractError):
        latency(_student(), (32, 32, 1), timed_iters=0)
