import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlang.dataset import FrameSet, Frame, Intrinsics
from occlang.errors import DomainError
from occlang.evaluation import (
    RECON_KEYS,
    mesh_recon_metrics,
    nearest_distances,
    observed_mask,
    recon_metrics,
    sample_mesh_points,
    seg_metrics,
    transfer_labels,
)
from occlang.query import Mesh
from occlang.synthetic import look_at


def grid_cloud(step=0.1, n=6):
    """Regular lattice: nearest-neighbor distances under small shifts are known exactly."""
    a = np.arange(n) * step
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)


def test_identity():
    p = grid_cloud()
    m = recon_metrics(p, p)
    assert (m.acc, m.comp, m.chamfer_l1) == (0.0, 0.0, 0.0)
    assert (m.prec, m.recall, m.fscore) == (1.0, 1.0, 1.0)
    assert list(m.to_dict()) == list(RECON_KEYS)


def test_translation_3cm():
    p = grid_cloud(step=0.2)
    m = recon_metrics(p + [0.03, 0, 0], p, threshold=0.05)
    assert m.acc == pytest.approx(0.03, abs=1e-12)
    assert m.comp == pytest.approx(0.03, abs=1e-12)
    assert m.chamfer_l1 == pytest.approx(0.03, abs=1e-12)
    assert (m.prec, m.recall, m.fscore) == (1.0, 1.0, 1.0)


def test_translation_10cm():
    p = grid_cloud(step=0.25)
    m = recon_metrics(p + [0.0, 0.1, 0], p, threshold=0.05)
    assert (m.prec, m.recall, m.fscore) == (0.0, 0.0, 0.0)
    assert m.acc == pytest.approx(0.1)


def test_empty_sets_rejected():
    with pytest.raises(DomainError):
        recon_metrics(np.zeros((0, 3)), grid_cloud())
    with pytest.raises(DomainError):
        recon_metrics(grid_cloud(), grid_cloud(), threshold=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_swap_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((int(rng.integers(1, 60)), 3)), rng.random((int(rng.integers(1, 60)), 3))
    m1, m2 = recon_metrics(a, b, 0.2), recon_metrics(b, a, 0.2)
    assert m1.chamfer_l1 == pytest.approx(m2.chamfer_l1, abs=1e-15)
    assert (m1.acc, m1.prec) == (m2.comp, m2.recall)
    assert (m1.comp, m1.recall) == (m2.acc, m2.prec)
    if m1.prec + m1.recall > 0:
        assert m1.fscore == pytest.approx(2 * m1.prec * m1.recall / (m1.prec + m1.recall))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nearest_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(int(rng.integers(1, 1000)), 3))
    b = rng.normal(size=(int(rng.integers(1, 1000)), 3))
    brute = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)
    np.testing.assert_allclose(nearest_distances(a, b), brute, rtol=1e-12, atol=1e-15)


def test_seg_examples():
    gt = np.array([0, 1, 1, 0, 2])
    m = seg_metrics(gt, gt, 3)
    assert m.miou == 1.0 and m.macc == 1.0
    m = seg_metrics(1 - np.array([0, 1, 0, 1]), np.array([0, 1, 0, 1]), 2)
    assert m.miou == 0.0
    m = seg_metrics(np.zeros(4, int), np.array([0, 0, 1, 1]), 2)
    np.testing.assert_allclose(m.iou, [0.5, 0.0])
    assert m.miou == pytest.approx(0.25)
    assert m.macc == pytest.approx(0.5)


def test_seg_void_and_absent_classes():
    m = seg_metrics(np.array([-1, 0, 0]), np.array([0, 0, -1]), 3)
    assert np.isnan(m.iou[1]) and np.isnan(m.iou[2])
    assert m.iou[0] == pytest.approx(1 / 2)
    assert m.void_pred[0] == 1
    with pytest.raises(DomainError):
        seg_metrics(np.array([0]), np.array([-1]), 2)
    with pytest.raises(DomainError):
        seg_metrics(np.array([5]), np.array([0]), 2)
    d = m.to_dict()
    assert set(d) == {"miou", "macc", "iou", "class_acc", "confusion"}
    assert d["iou"][1] is None


def brute_seg(pred, gt, k):
    conf = np.zeros((k, k), dtype=np.int64)
    miss = np.zeros(k, dtype=np.int64)
    for p, g in zip(pred, gt):
        if g < 0:
            continue
        if p < 0:
            miss[g] += 1
        else:
            conf[g, p] += 1
    ious = []
    for c in range(k):
        n_gt = conf[c].sum() + miss[c]
        if n_gt == 0:
            continue
        tp = conf[c, c]
        ious.append(tp / (n_gt + conf[:, c].sum() - tp))
    return conf, float(np.mean(ious))


def test_seg_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(1, 80))
        gt = rng.integers(-1, k, n)
        gt[0] = rng.integers(0, k)
        pred = rng.integers(-1, k, n)
        conf, miou = brute_seg(pred, gt, k)
        m = seg_metrics(pred, gt, k)
        np.testing.assert_array_equal(m.confusion, conf)
        assert m.miou == pytest.approx(miou, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_seg_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    gt, pred = rng.integers(0, k, 50), rng.integers(-1, k, 50)
    perm = rng.permutation(k)
    remap = lambda a: np.where(a < 0, a, perm[np.maximum(a, 0)])  # noqa: E731
    a, b = seg_metrics(pred, gt, k), seg_metrics(remap(pred), remap(gt), k)
    assert a.miou == pytest.approx(b.miou) and a.macc == pytest.approx(b.macc)


def unit_square_mesh(z=0.0):
    v = np.array([[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], dtype=float)
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def test_mesh_sampling_density_and_support():
    pts = sample_mesh_points(unit_square_mesh(), density=1e4, seed=0)
    assert len(pts) == 10000
    assert np.all((pts[:, :2] >= 0) & (pts[:, :2] <= 1)) and np.all(pts[:, 2] == 0)
    # area-weighted: each triangle gets about half
    assert abs(np.mean(pts[:, 0] > pts[:, 1]) - 0.5) < 0.02
    np.testing.assert_array_equal(pts, sample_mesh_points(unit_square_mesh(), 1e4, seed=0))


def test_culling_and_mesh_metrics():
    h = w = 32
    intr = Intrinsics(16.0, 16.0, 15.5, 15.5)
    pose = look_at(np.array([0.5, 0.5, 2.0]), np.array([0.5, 0.5, 0.0]), up=(0.0, 1.0, 0.0))
    depth = np.full((h, w), 2.0, dtype=np.float32)
    frames = FrameSet([Frame(np.zeros((h, w, 3), np.uint8), depth, pose)], intr)
    pts = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, -0.5], [0.5, 0.5, 3.0], [40.0, 0.5, 0.0]])
    assert list(observed_mask(pts, frames)) == [True, False, False, False]
    gt = sample_mesh_points(unit_square_mesh(), 1e4, seed=1)
    extra = Mesh(np.array([[0, 0, -1.0], [1, 0, -1.0], [1, 1, -1.0]]), np.array([[0, 1, 2]]))
    both = Mesh(np.vstack([unit_square_mesh().vertices, extra.vertices]),
                np.vstack([unit_square_mesh().faces, extra.faces + 4]))
    raw = mesh_recon_metrics(both, gt, 0.05)
    culled = mesh_recon_metrics(both, gt, 0.05, frames=frames)
    assert raw.prec < 0.8
    assert culled.prec == 1.0 and culled.recall == 1.0


def test_back_faces_need_a_camera_in_front():
    h = w = 32
    intr = Intrinsics(16.0, 16.0, 15.5, 15.5)
    pose = look_at(np.array([0.5, 0.5, 2.0]), np.array([0.5, 0.5, 0.0]), up=(0.0, 1.0, 0.0))
    frames = FrameSet([Frame(np.zeros((h, w, 3), np.uint8), np.full((h, w), 2.0, np.float32), pose)], intr)
    pts = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, -0.05]])
    assert list(observed_mask(pts, frames)) == [True, True]
    up, down = [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]
    assert list(observed_mask(pts, frames, normals=[up, down])) == [True, False]


def test_transfer_labels():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    dst = np.array([[0.1, 0, 0], [0.8, 0, 0], [5.0, 0, 0]])
    assert list(transfer_labels(src, [3, 7], dst, 0.5)) == [3, 7, -1]
    assert list(transfer_labels(np.zeros((0, 3)), [], dst, 0.5)) == [-1, -1, -1]
