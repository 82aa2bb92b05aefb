import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from torch import nn

from detseglab.dethead import (BG, IGNORE, DetHead, DetHeadConfig, balanced_l1_loss, cxcywh_to_corners,
                               decode_boxes, decode_detections, detection_loss, encode_boxes, focal_loss,
                               generate_anchors, iou, match_anchors, nms, postprocess)
from detseglab.seghead import SegHead, SegHeadConfig, predict_mask, seg_loss

from oracles import balanced_l1_scalar, central_difference, exact_iou, focal_scalar, nms_oracle, pixel_iou, rel_error

int_box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


# ---------------------------------------------------------------------------
# IoU

def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(pixel_iou((0, 0, 10, 10), (5, 0, 15, 10)))
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)


@given(int_box, int_box)
def test_iou_matches_pixel_count(a, b):
    assert iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-12)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0 <= iou(a, b) <= 1


# ---------------------------------------------------------------------------
# Anchors and matching

def test_anchor_counts_and_centres():
    cfg = DetHeadConfig(anchor_scales=(1.0,), anchor_ratios=(1.0,))
    (a,) = generate_anchors([(2, 2)], [8], cfg)
    assert a[:, :2].tolist() == [[4, 4], [12, 4], [4, 12], [12, 12]]
    cfg = DetHeadConfig(anchor_scales=(1.0, 1.5, 2.0), anchor_ratios=(0.5, 2.0))
    (a,) = generate_anchors([(4, 4)], [8], cfg)
    assert len(a) == 96
    centres = set(map(tuple, a[:, :2].tolist()))
    assert centres == {(4 + 8 * i, 4 + 8 * j) for i in range(4) for j in range(4)}


def test_no_gt_means_all_background():
    cfg = DetHeadConfig()
    anchors = torch.cat(generate_anchors([(4, 4)], [8], cfg))
    t = match_anchors(anchors, torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), cfg)
    assert (t.labels == BG).all()


def test_identical_anchor_is_positive_with_zero_deltas():
    cfg = DetHeadConfig(anchor_ratios=(1.0,))
    anchors = torch.cat(generate_anchors([(4, 4)], [8], cfg))
    gt = cxcywh_to_corners(anchors[5:6])
    t = match_anchors(anchors, gt, torch.tensor([2]), cfg)
    assert t.labels[5] == 1 and t.matched[5] == 0
    assert torch.allclose(t.deltas[5], torch.zeros(4, dtype=torch.float64), atol=1e-12)


def test_force_match_low_iou_gt():
    cfg = DetHeadConfig()
    # four anchors (cx, cy, w, h); the gt overlaps anchor 2 best with IoU 0.3
    anchors = torch.tensor([[5, 5, 10, 10], [30, 30, 10, 10], [15, 5, 10, 10], [50, 50, 4, 4]], dtype=torch.float64)
    gt = torch.tensor([[13.0, 0.0, 16.0, 10.0]])
    table = [float(exact_iou(cxcywh_to_corners(anchors[i:i + 1])[0].tolist(), gt[0].tolist())) for i in range(4)]
    assert max(table) == pytest.approx(0.3) and int(np.argmax(table)) == 2
    t = match_anchors(anchors, gt, torch.tensor([1]), cfg)
    assert t.labels.tolist() == [BG, BG, 0, BG]


def test_ignore_band():
    cfg = DetHeadConfig()
    anchors = torch.tensor([[5, 5, 10, 10], [5.0, 5, 10, 10]], dtype=torch.float64)
    gt = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    t = match_anchors(anchors, gt, torch.tensor([1]), cfg)
    assert t.labels.tolist() == [0, 0]  # both at IoU 1
    anchors = torch.tensor([[5, 5, 10, 10], [5.0, 9.0, 10, 10], [50, 50, 2, 2]], dtype=torch.float64)
    t = match_anchors(anchors, gt, torch.tensor([1]), cfg)
    # the shifted anchor overlaps 6/14, inside the ignore band
    o = float(exact_iou(cxcywh_to_corners(anchors[1:2])[0].tolist(), gt[0].tolist()))
    assert 0.4 <= o < 0.5
    assert t.labels.tolist() == [0, IGNORE, BG]


@settings(max_examples=40)
@given(st.lists(int_box, min_size=1, max_size=5))
def test_every_gt_gets_a_positive(boxes):
    cfg = DetHeadConfig()
    anchors = torch.cat(generate_anchors([(4, 4), (2, 2)], [8, 16], cfg))
    gt = torch.tensor(boxes, dtype=torch.float64)
    t = match_anchors(anchors, gt, torch.ones(len(boxes), dtype=torch.long), cfg)
    claimed = set(t.matched[t.labels >= 0].tolist())
    # a gt may lose its forced anchor only to a later gt forcing the same one
    corners = cxcywh_to_corners(anchors).tolist()
    best = []
    for b in boxes:
        table = [float(exact_iou(a, b)) for a in corners]
        top = max(table)
        # near-ties may resolve either way in floating point
        best.append({i for i, v in enumerate(table) if v >= top - 1e-9})
    for g in range(len(boxes)):
        if not any(best[g] & best[h] for h in range(g + 1, len(boxes))):
            assert g in claimed


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_encode_decode_round_trip(d):
    anchors = torch.tensor([[20.0, 24.0, 16.0, 8.0]], dtype=torch.float64)
    deltas = torch.tensor([d], dtype=torch.float64)
    boxes = decode_boxes(deltas, anchors)
    assert torch.allclose(encode_boxes(boxes, anchors), deltas, atol=1e-9)


def test_zero_deltas_give_anchors():
    anchors = torch.tensor([[20.0, 24.0, 16.0, 8.0]], dtype=torch.float64)
    assert decode_boxes(torch.zeros(1, 4, dtype=torch.float64), anchors).tolist() == [[12, 20, 28, 28]]


# ---------------------------------------------------------------------------
# Head forward

def test_head_shapes_and_zero_weights():
    cfg = DetHeadConfig(num_classes=20, anchor_ratios=(1.0,))
    head = DetHead(16, cfg)
    (logits, deltas), = head([torch.rand(1, 16, 2, 2)])
    assert logits.shape == (1, 4, 20) and deltas.shape == (1, 4, 4)
    for p in head.parameters():
        nn.init.zeros_(p)
    (logits, _), = head([torch.rand(1, 16, 2, 2)])
    assert torch.all(torch.sigmoid(logits) == 0.5)
    with pytest.raises(ValueError):
        head([torch.rand(1, 8, 2, 2)])


def test_branches_share_architecture_not_weights():
    head = DetHead(16, DetHeadConfig(num_classes=4, anchor_ratios=(1.0,)))
    shapes_cls = [p.shape for p in head.cls_branch[:-1].parameters()]
    shapes_box = [p.shape for p in head.box_branch[:-1].parameters()]
    assert shapes_cls == shapes_box
    assert all(a.data_ptr() != b.data_ptr() for a, b in zip(head.cls_branch.parameters(), head.box_branch.parameters()))


# ---------------------------------------------------------------------------
# Losses

def test_focal_examples():
    x = torch.tensor([0.0])
    assert float(focal_loss(x, torch.tensor([1.0]), 0.25, 2.0)) == pytest.approx(0.25 * 0.25 * math.log(2))
    logits = torch.randn(50)
    targets = (torch.rand(50) > 0.5).float()
    bce = F.binary_cross_entropy_with_logits(logits, targets)
    assert float(focal_loss(logits, targets, None, 0.0, "mean")) == pytest.approx(float(bce), rel=1e-6)
    perfect = torch.where(targets > 0, 20.0, -20.0)
    assert float(focal_loss(perfect, targets)) < 1e-6
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([float("nan")]), torch.tensor([1.0]))


@given(st.lists(st.tuples(st.floats(-15, 15), st.integers(0, 1)), min_size=1, max_size=10),
       st.sampled_from([None, 0.25, 0.75]), st.sampled_from([0.0, 1.0, 2.0]))
def test_focal_matches_scalar_formula(pairs, alpha, gamma):
    x = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    t = torch.tensor([float(p[1]) for p in pairs], dtype=torch.float64)
    ours = float(focal_loss(x, t, alpha, gamma))
    ref = sum(focal_scalar(a, b, alpha, gamma) for a, b in pairs)
    assert ours == pytest.approx(ref, rel=1e-9, abs=1e-12)
    assert ours >= 0


def test_balanced_l1_examples():
    z = torch.zeros(3)
    assert float(balanced_l1_loss(z, z)) == 0.0
    x = torch.tensor([100.0, 101.0], dtype=torch.float64, requires_grad=True)
    loss = balanced_l1_loss(x, torch.zeros(2, dtype=torch.float64), reduction="none")
    assert float((loss[1] - loss[0]).detach()) == pytest.approx(1.5, abs=1e-12)
    loss.sum().backward()
    assert x.grad.tolist() == pytest.approx([1.5, 1.5])


def test_balanced_l1_continuity_at_one():
    alpha, gamma = 0.5, 1.5
    b = math.exp(gamma / alpha) - 1
    inner = lambda x: alpha / b * (b * x + 1) * math.log(b * x + 1) - alpha * x
    outer = lambda x: gamma * x + gamma / b - alpha
    assert abs(inner(1.0) - outer(1.0)) < 1e-9
    d_inner = alpha * math.log(b + 1)  # derivative of inner at x = 1
    assert abs(d_inner - gamma) < 1e-9
    for side in (1 - 1e-12, 1 + 1e-12):
        x = torch.tensor([side], dtype=torch.float64, requires_grad=True)
        balanced_l1_loss(x, torch.zeros(1, dtype=torch.float64)).backward()
        assert abs(float(x.grad) - gamma) < 1e-9
    vals = [float(balanced_l1_loss(torch.tensor([v], dtype=torch.float64), torch.zeros(1, dtype=torch.float64)))
            for v in (1 - 1e-12, 1.0, 1 + 1e-12)]
    assert max(vals) - min(vals) < 1e-9


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_balanced_l1_matches_scalar_formula(xs):
    x = torch.tensor(xs, dtype=torch.float64)
    assert float(balanced_l1_loss(x, torch.zeros_like(x))) == pytest.approx(
        sum(balanced_l1_scalar(v) for v in xs), rel=1e-9, abs=1e-12)


def test_detection_loss_normalization_and_ignore():
    cfg = DetHeadConfig(num_classes=2, anchor_ratios=(1.0,))
    logits = torch.zeros(1, 4, 2)
    deltas = torch.zeros(1, 4, 4)
    from detseglab.dethead import DetTargets
    labels = torch.tensor([1, BG, IGNORE, BG])
    t = DetTargets(labels, torch.ones(4, 4, dtype=torch.float64), torch.tensor([0, -1, -1, -1]))
    cls, loc = detection_loss([(logits, deltas)], [t], cfg)
    per = focal_scalar(0.0, 0, 0.25, 2)
    pos = focal_scalar(0.0, 1, 0.25, 2)
    # one positive column, five negative columns; the ignored anchor contributes nothing
    assert float(cls) == pytest.approx(pos + 5 * per, rel=1e-6)
    assert float(loc) == pytest.approx(4 * balanced_l1_scalar(1.0), rel=1e-6)


def test_head_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = DetHeadConfig(num_classes=2, conv_blocks=1, anchor_ratios=(1.0,))
    head = DetHead(4, cfg).double()
    n_params = sum(p.numel() for p in head.parameters())
    assert n_params <= 1000
    for p in head.parameters():
        nn.init.normal_(p, std=0.3)
    feats = [torch.randn(1, 4, 3, 3, dtype=torch.float64)]
    from detseglab.dethead import DetTargets
    labels = torch.tensor([0, BG, 1, BG, IGNORE, BG, BG, 0, BG])
    t = DetTargets(labels, torch.randn(9, 4, dtype=torch.float64), torch.zeros(9, dtype=torch.long))

    def loss():
        cls, loc = detection_loss(head(feats), [t], cfg)
        return cls + loc

    loss().backward()
    for name, p in head.named_parameters():
        arr = p.detach().numpy()

        def f(v, p=p):
            with torch.no_grad():
                p.copy_(torch.from_numpy(v))
                return float(loss())

        orig = arr.copy()
        num = central_difference(f, orig.copy())
        with torch.no_grad():
            p.copy_(torch.from_numpy(orig))
        assert rel_error(num, p.grad.numpy(), floor=1e-6) < 1e-3, name


# ---------------------------------------------------------------------------
# NMS and decoding

def test_nms_examples():
    boxes = torch.tensor([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    assert nms(boxes, torch.tensor([0.9, 0.8]), 0.5).tolist() == [0]
    # pairwise IoU 0.6 (a,b), 0.6 (b,c)... constructed from 1D overlaps
    a = [0, 0, 10, 10]
    b = [2.5, 0, 12.5, 10]  # IoU(a, b) = 7.5 / 12.5 = 0.6
    c = [5, 0, 15, 10]  # IoU(b, c) = 0.6, IoU(a, c) = 1/3
    for x, y, v in ((a, b, 0.6), (b, c, 0.6)):
        assert iou(x, y) == pytest.approx(v)
    keep = nms(torch.tensor([a, b, c], dtype=torch.float64), torch.tensor([0.9, 0.8, 0.7]), 0.5)
    assert sorted(keep.tolist()) == [0, 2]


boxes_scores = st.lists(st.tuples(int_box, st.integers(1, 20)), min_size=1, max_size=12)


@given(boxes_scores, st.randoms(use_true_random=False))
def test_nms_oracle_and_order_invariance(items, rnd):
    boxes = [list(map(float, b)) for b, _ in items]
    scores = [s / 20 for _, s in items]
    keep = nms(torch.tensor(boxes, dtype=torch.float64), torch.tensor(scores, dtype=torch.float64), 0.5)
    ref = nms_oracle(boxes, scores, 0.5)
    kept = sorted((tuple(boxes[i]), scores[i]) for i in keep.tolist())
    assert kept == sorted((tuple(boxes[i]), scores[i]) for i in ref)
    perm = list(range(len(boxes)))
    rnd.shuffle(perm)
    keep2 = nms(torch.tensor([boxes[i] for i in perm], dtype=torch.float64),
                torch.tensor([scores[i] for i in perm], dtype=torch.float64), 0.5)
    assert sorted((tuple(boxes[perm[i]]), scores[perm[i]]) for i in keep2.tolist()) == kept


@settings(max_examples=20)
@given(st.integers(0, 10 ** 6))
def test_decode_limits_and_thresholds(seed):
    g = torch.Generator().manual_seed(seed)
    cfg = DetHeadConfig(num_classes=3, max_detections=100)
    shapes, strides = [(8, 8), (4, 4)], [8, 16]
    anchors = generate_anchors(shapes, strides, cfg)
    outs = [(torch.randn(1, len(a), 3, generator=g) * 3, torch.randn(1, len(a), 4, generator=g))
            for a in anchors]
    dets = decode_detections(outs, anchors, cfg, (64, 64))
    assert len(dets) <= 100
    for d in dets:
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
        assert cfg.score_threshold <= d.score <= 1 and math.isfinite(d.score)


def test_zero_delta_decode_returns_anchor_boxes():
    cfg = DetHeadConfig(num_classes=1, anchor_ratios=(1.0,), nms_iou=1.0, score_threshold=0.0)
    (anc,) = generate_anchors([(2, 2)], [16], cfg)
    logits = torch.zeros(1, 4, 1)
    dets = decode_detections([(logits, torch.zeros(1, 4, 4))], [anc], cfg, (64, 64))
    expected = cxcywh_to_corners(anc).clamp(0, 64)
    assert sorted(d.box for d in dets) == sorted(tuple(b) for b in expected.tolist())


def test_postprocess_per_class_nms():
    cfg = DetHeadConfig()
    boxes = torch.tensor([[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 10.0]])
    dets = postprocess(boxes, torch.tensor([0.9, 0.8, 0.7]), torch.tensor([1, 1, 2]), cfg)
    assert [(d.class_id, d.score) for d in dets] == [(1, pytest.approx(0.9)), (2, pytest.approx(0.7))]


# ---------------------------------------------------------------------------
# Segmentation head

def test_seg_head_shapes_and_chains():
    head = SegHead(8, (8, 16, 32), SegHeadConfig(num_classes=4, seg_channels=8))
    assert head.chain_lengths() == [1, 2, 3]
    out = head([torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4), torch.rand(1, 8, 2, 2)])
    assert out.shape == (1, 4, 64, 64)
    for p in head.parameters():
        nn.init.zeros_(p)
    out = head([torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4), torch.rand(1, 8, 2, 2)])
    assert torch.allclose(out.softmax(1), torch.full_like(out, 0.25))


def test_seg_loss_examples():
    mask = torch.randint(0, 3, (2, 5, 5))
    logits = F.one_hot(mask, 3).permute(0, 3, 1, 2).float() * 20
    assert float(seg_loss(logits, mask)) < 1e-6
    assert float(seg_loss(torch.zeros(2, 3, 5, 5), mask)) == pytest.approx(math.log(3), rel=1e-6)
    logits = torch.randn(1, 3, 4, 4)
    m = torch.randint(0, 3, (1, 4, 4))
    half = m.clone()
    half[:, :2] = 255
    logp = logits.log_softmax(1)
    expected = -np.mean([float(logp[0, m[0, i, j], i, j]) for i in range(2, 4) for j in range(4)])
    assert float(seg_loss(logits, half)) == pytest.approx(expected, rel=1e-6)
    with pytest.raises(ValueError):
        seg_loss(logits, torch.full((1, 4, 4), 255))
    with pytest.raises(ValueError):
        seg_loss(logits, torch.zeros(1, 3, 3, dtype=torch.long))


def test_seg_loss_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 3, 3))
    m = torch.from_numpy(rng.integers(0, 3, size=(1, 3, 3)))
    m[0, 0, 0] = 255
    t = torch.tensor(x, requires_grad=True)
    seg_loss(t, m).backward()
    num = central_difference(lambda v: float(seg_loss(torch.from_numpy(v), m)), x.copy())
    assert rel_error(num, t.grad.numpy(), floor=1e-6) < 1e-3


def test_predict_mask_rules():
    labels = np.random.default_rng(0).integers(0, 4, size=(5, 6))
    onehot = np.eye(4)[labels].transpose(2, 0, 1)
    assert np.array_equal(predict_mask(onehot), labels)
    assert (predict_mask(np.zeros((4, 3, 3))) == 0).all()
    shift = np.random.default_rng(1).normal(size=(1, 5, 6))
    assert np.array_equal(predict_mask(onehot + shift), labels)


@given(st.integers(0, 1000))
def test_softmax_sums_to_one(seed):
    g = torch.Generator().manual_seed(seed)
    head = SegHead(8, (8, 16), SegHeadConfig(num_classes=5, seg_channels=8))
    out = head([torch.randn(1, 8, 4, 4, generator=g), torch.randn(1, 8, 2, 2, generator=g)])
    assert torch.allclose(out.softmax(1).sum(1), torch.ones(1, 32, 32), atol=1e-6)
