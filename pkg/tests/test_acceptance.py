"""End-to-end acceptance checks: exact matcher optimality, gradient and
algebraic correctness of the aggregation pipeline, metric oracles, and
desk-scale training experiments demonstrating the multi-class aggregation
advantage. Each test prints a single PASS/FAIL summary line."""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from conftest import finite_difference_gradient, relative_gradient_error
from corrdet.cam import CamConfig, CorrelationalAggregation, make_task_encodings
from corrdet.config import RunConfig
from corrdet.core import Annotation, Box, ClassSplit, LabeledImage, SupportExample
from corrdet.data import (
    ShapeWorldConfig,
    build_dataset,
    build_finetune_set,
    sample_episode,
    support_examples,
)
from corrdet.detector import (
    DetectorConfig,
    MetaDetector,
    detect,
    precompute_prototypes,
)
from corrdet.evaluate import average_precision, evaluate_map
from corrdet.experiments import directional_experiment
from corrdet.losses import (
    LossWeights,
    box_loss,
    detection_loss,
    prototype_class_loss,
    sigmoid_focal_loss,
)
from corrdet.matcher import hungarian_match
from corrdet.targets import EMPTY, build_encoding_map, remap_targets, unmap_predictions
from corrdet.train import OptimConfig, make_optimizer, train_step


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""), flush=True)
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# 1. bipartite matcher optimality


def test_matcher_optimality_exact():
    t0 = time.time()
    gen = torch.Generator().manual_seed(0)
    checked = 0
    perm_cache = {
        n: np.array(list(itertools.permutations(range(n)))) for n in range(2, 8)
    }
    for trial in range(500):
        n = 2 + trial % 6  # N in 2..7
        cost = torch.randn(n, n, generator=gen, dtype=torch.float64)
        cost_np = cost.numpy()
        perms = perm_cache[n]
        # same summation order (row 0..n-1) for every candidate and the result
        all_costs = cost_np[np.arange(n)[None, :], perms].sum(axis=1)
        best = float(all_costs.min())
        sigma = hungarian_match(cost).sigma.numpy()
        got = float(cost_np[np.arange(n), sigma].sum())
        if got != best:
            report("matcher optimality", False, f"trial {trial}: {got} != {best}")
        checked += 1
    elapsed = time.time() - t0
    report(
        "matcher optimality",
        checked == 500 and elapsed < 10,
        f"500 matrices exact, {elapsed:.1f}s",
    )


# --------------------------------------------------------------------------
# 2. gradient correctness against central finite differences


def test_gradient_correctness():
    t0 = time.time()
    worst = 0.0

    def check(analytic, numeric):
        nonlocal worst
        worst = max(worst, relative_gradient_error(analytic, numeric))

    for seed in range(4):
        gen = torch.Generator().manual_seed(seed)

        # focal classification loss
        logits = torch.randn(3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        targets = (torch.rand(3, 4, generator=gen) > 0.5).double()
        sigmoid_focal_loss(logits, targets).sum().backward()
        check(
            logits.grad,
            finite_difference_gradient(
                lambda: sigmoid_focal_loss(logits.detach(), targets).sum(), logits.detach()
            ),
        )

        # box regression loss
        pred = (0.2 + 0.6 * torch.rand(4, generator=gen, dtype=torch.float64)).requires_grad_()
        tgt = 0.2 + 0.6 * torch.rand(4, generator=gen, dtype=torch.float64)
        sum(box_loss(pred, tgt)).backward()
        check(
            pred.grad,
            finite_difference_gradient(lambda: sum(box_loss(pred.detach(), tgt)), pred.detach()),
        )

        # prototype classification loss
        protos = torch.randn(3, 6, generator=gen, dtype=torch.float64, requires_grad=True)
        emb = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        labels = torch.tensor([1, 0, 4])
        prototype_class_loss(protos, labels, emb).backward()
        check(
            protos.grad,
            finite_difference_gradient(
                lambda: prototype_class_loss(protos.detach(), labels, emb), protos.detach()
            ),
        )

        # aggregation module forward
        torch.manual_seed(seed)
        cam = CorrelationalAggregation(CamConfig(dim=8, heads=2)).double()
        q = torch.randn(1, 4, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        cprotos = torch.randn(2, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        enc = make_task_encodings(1, 8, dtype=torch.float64)
        cam(q, cprotos, enc).pow(2).sum().backward()

        def cam_loss():
            with torch.no_grad():
                return cam(q.detach(), cprotos.detach(), enc).pow(2).sum()

        check(q.grad, finite_difference_gradient(cam_loss, q.detach()))
        check(cprotos.grad, finite_difference_gradient(cam_loss, cprotos.detach()))

        # full detection loss through matcher-fixed assignments
        labels_t = torch.tensor([1, 2, EMPTY, EMPTY])
        boxes_t = torch.zeros(4, 4, dtype=torch.float64)
        boxes_t[0] = torch.tensor([0.3, 0.4, 0.2, 0.2])
        boxes_t[1] = torch.tensor([0.6, 0.6, 0.3, 0.2])
        from corrdet.targets import DetectionTargets

        dt = DetectionTargets(labels=labels_t, boxes=boxes_t)
        dl_logits = torch.randn(4, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        raw = torch.randn(4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        sigma = torch.randperm(4, generator=gen)
        w = LossWeights()

        def dloss(lg, bx):
            return detection_loss([lg], [0.3 + 0.4 * torch.sigmoid(bx)], dt, [sigma], w)[0]

        dloss(dl_logits, raw).backward()
        check(
            dl_logits.grad,
            finite_difference_gradient(
                lambda: dloss(dl_logits.detach(), raw.detach()), dl_logits.detach()
            ),
        )
        check(
            raw.grad,
            finite_difference_gradient(
                lambda: dloss(dl_logits.detach(), raw.detach()), raw.detach()
            ),
        )

    elapsed = time.time() - t0
    report(
        "gradient correctness",
        worst < 1e-4 and elapsed < 60,
        f"20 seeded checks, worst rel err {worst:.2e}, {elapsed:.1f}s",
    )


# --------------------------------------------------------------------------
# 3. aggregation algebra


@torch.no_grad()
def test_aggregation_algebra():
    torch.manual_seed(0)
    cam = CorrelationalAggregation(CamConfig(dim=16, heads=4))

    # (a) coefficient rows sum to 1
    gen = torch.Generator().manual_seed(1)
    max_dev = 0.0
    for _ in range(100):
        q = torch.randn(1, 8, 16, generator=gen)
        protos = torch.randn(int(torch.randint(2, 7, (1,), generator=gen)), 16, generator=gen)
        a, _ = cam.feature_match(q, protos)
        max_dev = max(max_dev, float((a.sum(-1) - 1).abs().max()))
    row_ok = max_dev < 1e-6

    # (b) joint permutation leaves forward output and detections bitwise fixed
    q = torch.randn(2, 12, 16, generator=gen)
    protos = torch.randn(6, 16, generator=gen)
    enc = make_task_encodings(5, 16)
    base = cam(q, protos, enc)
    perm_ok = True
    for _ in range(5):
        perm = torch.cat([torch.zeros(1, dtype=torch.long), 1 + torch.randperm(5, generator=gen)])
        perm_ok &= torch.equal(cam(q, protos[perm], enc[perm]), base)

    rng = np.random.default_rng(0)
    model = MetaDetector(
        DetectorConfig(dim=32, heads=4, enc_layers=2, dec_layers=2, num_queries=6),
        num_dataset_classes=12,
    )
    model.eval()

    def support():
        img = LabeledImage(image=rng.random((64, 64, 3)).astype(np.float32))
        return SupportExample(image=img, instance_box=Box(0.5, 0.5, 0.5, 0.5))

    classes = [0, 3, 6, 9]
    sets = {c: [support(), support()] for c in classes}
    img = rng.random((64, 64, 3)).astype(np.float32)
    d_protos, chi = precompute_prototypes(model, sets, classes)
    d_enc = model.task_encodings(len(classes))
    base_dets = detect(model, img, d_protos, chi, threshold=0.0, encodings=d_enc)
    det_ok = True
    for perm in ([2, 0, 3, 1], [3, 2, 1, 0]):
        permuted, _ = precompute_prototypes(model, sets, [classes[i] for i in perm])
        row_perm = torch.tensor([0] + [1 + i for i in perm])
        out = detect(model, img, permuted, chi, threshold=0.0, encodings=d_enc[row_perm])
        det_ok &= [(d.class_id, d.score, d.box.as_tuple()) for d in out] == [
            (d.class_id, d.score, d.box.as_tuple()) for d in base_dets
        ]

    # (c) zero query features give uniform coefficients
    protos = torch.randn(4, 16, generator=gen)  # background + 3 classes
    a, _ = cam.feature_match(torch.zeros(1, 5, 16), protos)
    uniform_ok = bool((a - 1 / 4).abs().max() < 1e-6)

    report(
        "aggregation algebra",
        row_ok and perm_ok and det_ok and uniform_ok,
        f"rows {row_ok}, perm {perm_ok}, detections {det_ok}, uniform {uniform_ok}",
    )


# --------------------------------------------------------------------------
# 4. target generation round trip


def test_target_generation_round_trip():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        pool = rng.permutation(12)
        c = int(rng.integers(1, 6))
        chi = build_encoding_map([int(x) for x in pool[:c]])
        anns = [
            Annotation(
                class_id=int(rng.integers(0, 12)),
                box=Box(0.5, 0.5, float(rng.uniform(0.1, 0.4)), float(rng.uniform(0.1, 0.4))),
            )
            for _ in range(int(rng.integers(0, 6)))
        ]
        targets = remap_targets(anns, chi, num_slots=8)
        kept = [a for a in anns if a.class_id in chi]

        # out-of-support annotations never occupy a slot
        ok &= targets.num_objects == len(kept)
        # round trip: decode the occupied slots back to class ids and boxes
        raw = [
            (int(targets.labels[i]), 1.0, Box(*targets.boxes[i].tolist()))
            for i in range(len(kept))
        ]
        decoded = unmap_predictions(raw, chi)
        for (cid, _s, box), orig in zip(decoded, kept):
            ok &= cid == orig.class_id
            ok &= np.allclose(box.as_tuple(), orig.box.as_tuple(), atol=1e-6)
        ok &= bool((targets.labels[len(kept):] == EMPTY).all())

        if not kept:
            # an all-empty slot set contributes zero box loss
            logits = [torch.randn(8, c, dtype=torch.float64)]
            boxes = [torch.full((8, 4), 0.5, dtype=torch.float64)]
            _, parts = detection_loss(
                logits, boxes, targets, [torch.arange(8)], LossWeights()
            )
            ok &= parts["loss_l1"] == 0.0 and parts["loss_giou"] == 0.0
        if not ok:
            break
    report("target generation", ok, "1000 episodes, exact round trip")


# --------------------------------------------------------------------------
# 5. sinusoidal task encodings


def test_sinusoidal_encoding_values():
    table = make_task_encodings(3, 4, dtype=torch.float64)
    zero_ok = torch.equal(table[0], torch.zeros(4, dtype=torch.float64))
    expected = torch.tensor([0.841471, 0.540302, 0.0099998, 0.99995], dtype=torch.float64)
    val_ok = bool((table[1] - expected).abs().max() < 1e-5)
    report(
        "sinusoidal encodings",
        zero_ok and val_ok,
        f"row0 zero {zero_ok}, closed-form row1 {val_ok}",
    )


# --------------------------------------------------------------------------
# 6. efficient inference: cached prototypes vs recomputation


def test_cached_prototype_equivalence():
    rng = np.random.default_rng(0)
    model = MetaDetector(
        DetectorConfig(dim=32, heads=4, enc_layers=2, dec_layers=2, num_queries=6),
        num_dataset_classes=12,
    )
    model.eval()

    def support():
        img = LabeledImage(image=rng.random((64, 64, 3)).astype(np.float32))
        return SupportExample(image=img, instance_box=Box(0.5, 0.5, 0.5, 0.5))

    sets = {1: [support(), support()], 5: [support()], 8: [support()]}
    order = [1, 5, 8]
    cached, chi = precompute_prototypes(model, sets, order)
    ok = True
    for _ in range(50):
        img = rng.random((64, 64, 3)).astype(np.float32)
        with torch.no_grad():
            fresh = model.build_prototypes([list(sets[c]) for c in order])
        ok &= torch.equal(cached, fresh)
        a = detect(model, img, cached, chi, threshold=0.0)
        b = detect(model, img, fresh, chi, threshold=0.0)
        ok &= [(d.class_id, d.score, d.box.as_tuple()) for d in a] == [
            (d.class_id, d.score, d.box.as_tuple()) for d in b
        ]
        if not ok:
            break
    report("cached-prototype inference", ok, "50 images bitwise identical")


# --------------------------------------------------------------------------
# 7. overfit sanity on one memorized episode


def test_overfit_sanity(tmp_path):
    t0 = time.time()
    cfg = ShapeWorldConfig(
        image_size=64, num_base_scenes=60, num_novel_scenes=20,
        num_test_scenes=10, max_objects=2, seed=0,
    )
    ds = build_dataset(cfg, tmp_path / "data")
    torch.manual_seed(0)
    model = MetaDetector(
        DetectorConfig(dim=64, heads=4, enc_layers=2, dec_layers=2, num_queries=6,
                       max_support_classes=2),
        num_dataset_classes=12,
    )
    opt = make_optimizer(model, OptimConfig(lr=3e-4))
    episode = sample_episode(
        ds, "base", num_classes=2, shots=1, rng=np.random.default_rng(0), num_queries=1
    )
    w = LossWeights()
    reached = None
    final = math.inf
    for step in range(2000):
        final = train_step(model, opt, [episode], w)["loss_total"]
        if final < 0.05:
            reached = step
            break
    elapsed = time.time() - t0
    report(
        "overfit sanity",
        reached is not None and elapsed < 600,
        f"loss {final:.4f} at step {reached}, {elapsed:.0f}s",
    )


# --------------------------------------------------------------------------
# 8 + 9. desk-scale directional experiment and confusion reduction


@pytest.fixture(scope="module")
def directional_results(tmp_path_factory):
    root = tmp_path_factory.mktemp("directional")
    data_cfg = ShapeWorldConfig(
        image_size=64, num_base_scenes=600, num_novel_scenes=150,
        num_test_scenes=100, min_objects=2, max_objects=3,
        scale_range=(0.12, 0.22), seed=0,
    )
    dataset = build_dataset(data_cfg, root / "data")
    base_config = RunConfig(
        seed=0,
        episode_classes=5,
        shots=2,
        queries_per_episode=2,
        batch_episodes=2,
        steps=6000,
        checkpoint_every=2000,
        detector=DetectorConfig(
            dim=64, heads=4, enc_layers=2, dec_layers=2, num_queries=10,
            max_support_classes=5, stride=8,
        ),
        optim=OptimConfig(lr=2e-4, grad_clip=1.0),
    )
    return directional_experiment(
        dataset, root / "out", base_config,
        support_seeds=[0, 1, 2, 3, 4], shots=2, finetune_steps=300,
        finetune_lr=5e-5, threshold=0.05,
    )


def test_directional_claim(directional_results):
    v = directional_results["variants"]
    c5, c1, nocam = v["c5_cam"], v["c1_cam"], v["c1_nocam"]
    mean_gap_c = c5["mean_novel_map"] - c1["mean_novel_map"]
    mean_gap_cam = c1["mean_novel_map"] - nocam["mean_novel_map"]
    wins_c = sum(
        a["novel_map"] > b["novel_map"] for a, b in zip(c5["runs"], c1["runs"])
    )
    wins_cam = sum(
        a["novel_map"] > b["novel_map"] for a, b in zip(c1["runs"], nocam["runs"])
    )
    ok = mean_gap_c > 0 and mean_gap_cam > 0 and wins_c >= 4 and wins_cam >= 4
    report(
        "directional claim",
        ok,
        f"novel mAP C=5 {c5['mean_novel_map']:.4f} vs C=1 {c1['mean_novel_map']:.4f} "
        f"({wins_c}/5 seeds), C=1 vs reweighting {nocam['mean_novel_map']:.4f} "
        f"({wins_cam}/5 seeds)",
    )


def test_confusion_reduction(directional_results):
    v = directional_results["variants"]
    c5 = v["c5_cam"]["total_cross_confusion"]
    c1 = v["c1_cam"]["total_cross_confusion"]
    report(
        "confusion reduction",
        c5 <= c1,
        f"ring-filled/circle-filled cross confusion C=5: {c5} vs C=1: {c1} over 5 seeds",
    )


# --------------------------------------------------------------------------
# 10. metric oracle


def test_metric_oracle():
    split = ClassSplit(base_classes=frozenset({0}), novel_classes=frozenset({1}))

    def det(cid, score, cx=0.5, cy=0.5, w=0.2, h=0.2):
        from corrdet.detector import Detection

        return Detection(class_id=cid, score=score, box=Box(cx, cy, w, h))

    def ann(cid, cx=0.5, cy=0.5, w=0.2, h=0.2):
        return Annotation(class_id=cid, box=Box(cx, cy, w, h))

    ok = True
    # perfect single detection
    r = evaluate_map([[det(0, 0.9)]], [[ann(0)]], split)
    ok &= r.per_class_ap[0] == 1.0
    # one TP one FP on one GT: precisions 1/1 then envelope keeps 1.0
    r = evaluate_map([[det(0, 0.9), det(0, 0.8, cx=0.1)]], [[ann(0)]], split)
    ok &= r.per_class_ap[0] == 1.0
    # FP above TP: precision at the TP rank is 1/2
    r = evaluate_map([[det(0, 0.9, cx=0.1), det(0, 0.8)]], [[ann(0)]], split)
    ok &= r.per_class_ap[0] == 0.5
    # two GT, only one found: recall caps at 0.5
    r = evaluate_map([[det(0, 0.9)]], [[ann(0), ann(0, cx=0.15, cy=0.15)]], split)
    ok &= r.per_class_ap[0] == 0.5
    # wrong class never scores
    r = evaluate_map([[det(1, 0.9)]], [[ann(0)]], split)
    ok &= r.per_class_ap[0] == 0.0
    # duplicate detections on one GT: second one is a FP
    r = evaluate_map([[det(0, 0.9), det(0, 0.8)]], [[ann(0), ann(0, cx=0.15, cy=0.15)]], split)
    ok &= r.per_class_ap[0] == 0.5
    # three detections (TP, FP, TP) over two GT: AP = 0.5*1 + 0.5*(2/3)
    dets = [[det(0, 0.9), det(0, 0.8, cx=0.1, cy=0.9), det(0, 0.7, cx=0.2)]]
    gts = [[ann(0), ann(0, cx=0.2)]]
    r = evaluate_map(dets, gts, split)
    three_det_ap = r.per_class_ap[0]
    ok &= abs(three_det_ap - 0.8333) < 1e-4
    report("metric oracle", ok, f"3-detection case AP {three_det_ap:.4f}")
