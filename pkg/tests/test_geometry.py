import pytest
import torch

from corrdet.errors import DegenerateBox
from corrdet.geometry import (
    box_cxcywh_to_xyxy,
    box_xyxy_to_cxcywh,
    giou,
    iou,
    pairwise_giou,
)


def random_xyxy(n, gen):
    pts = torch.rand(n, 4, generator=gen, dtype=torch.float64)
    x0 = torch.minimum(pts[:, 0], pts[:, 2])
    x1 = torch.maximum(pts[:, 0], pts[:, 2]) + 1e-3
    y0 = torch.minimum(pts[:, 1], pts[:, 3])
    y1 = torch.maximum(pts[:, 1], pts[:, 3]) + 1e-3
    return torch.stack([x0, y0, x1, y1], dim=-1).clamp(0, 1)


class TestConversions:
    def test_full_image_box(self):
        out = box_cxcywh_to_xyxy(torch.tensor([0.5, 0.5, 1.0, 1.0]))
        assert torch.allclose(out, torch.tensor([0.0, 0.0, 1.0, 1.0]))

    def test_corner_box(self):
        out = box_cxcywh_to_xyxy(torch.tensor([0.25, 0.25, 0.5, 0.5]))
        assert torch.allclose(out, torch.tensor([0.0, 0.0, 0.5, 0.5]))

    def test_roundtrip_1000_random(self):
        gen = torch.Generator().manual_seed(0)
        cxcywh = torch.rand(1000, 4, generator=gen, dtype=torch.float64)
        cxcywh[:, 2:] += 1e-3
        back = box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(cxcywh))
        assert (back - cxcywh).abs().max() < 1e-12


class TestIoU:
    def test_identical(self):
        b = torch.tensor([0.0, 0.0, 1.0, 1.0])
        assert iou(b, b).item() == pytest.approx(1.0)

    def test_hand_case_one_seventh(self):
        a = torch.tensor([0.0, 0.0, 2 / 3, 2 / 3], dtype=torch.float64)
        b = torch.tensor([1 / 3, 1 / 3, 1.0, 1.0], dtype=torch.float64)
        assert iou(a, b).item() == pytest.approx(1 / 7, abs=1e-9)

    def test_disjoint(self):
        a = torch.tensor([0.0, 0.0, 0.1, 0.1])
        b = torch.tensor([0.5, 0.5, 0.6, 0.6])
        assert iou(a, b).item() == 0.0

    def test_strict_mode_degenerate(self):
        z = torch.tensor([0.3, 0.3, 0.3, 0.3])
        with pytest.raises(DegenerateBox):
            iou(z, z, strict=True)
        assert iou(z, z).item() == 0.0  # lenient default


class TestGIoU:
    def test_identical(self):
        b = torch.tensor([0.1, 0.1, 0.8, 0.9], dtype=torch.float64)
        assert giou(b, b).item() == pytest.approx(1.0, abs=1e-6)

    def test_diagonal_hand_case(self):
        a = torch.tensor([0.0, 0.0, 0.5, 0.5], dtype=torch.float64)
        b = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        assert giou(a, b).item() == pytest.approx(-0.5, abs=1e-9)

    def test_giou_leq_iou_property(self):
        gen = torch.Generator().manual_seed(1)
        a, b = random_xyxy(10_000, gen), random_xyxy(10_000, gen)
        assert bool((giou(a, b) <= iou(a, b) + 1e-12).all())

    def test_symmetry_and_bounds(self):
        gen = torch.Generator().manual_seed(2)
        a, b = random_xyxy(500, gen), random_xyxy(500, gen)
        assert torch.allclose(giou(a, b), giou(b, a))
        assert torch.allclose(iou(a, b), iou(b, a))
        assert bool((iou(a, b) >= 0).all()) and bool((iou(a, b) <= 1 + 1e-12).all())
        g = giou(a, b)
        assert bool((g > -1).all()) and bool((g <= 1 + 1e-12).all())

    def test_translation_invariance(self):
        gen = torch.Generator().manual_seed(3)
        a = random_xyxy(200, gen) * 0.5
        b = random_xyxy(200, gen) * 0.5
        shift = torch.tensor([0.2, 0.3, 0.2, 0.3], dtype=torch.float64)
        assert torch.allclose(giou(a + shift, b + shift), giou(a, b), atol=1e-9)
        assert torch.allclose(iou(a + shift, b + shift), iou(a, b), atol=1e-9)


class TestPairwiseGIoU:
    def test_unit_box(self):
        u = torch.tensor([[0.0, 0.0, 1.0, 1.0]])
        out = pairwise_giou(u, u)
        assert out.shape == (1, 1) and out[0, 0].item() == pytest.approx(1.0)

    def test_matches_elementwise_loop(self):
        gen = torch.Generator().manual_seed(4)
        a, b = random_xyxy(7, gen), random_xyxy(5, gen)
        mat = pairwise_giou(a, b)
        for i in range(7):
            for j in range(5):
                assert mat[i, j].item() == pytest.approx(giou(a[i], b[j]).item(), abs=1e-12)

    def test_empty(self):
        b = random_xyxy(3, torch.Generator().manual_seed(5))
        out = pairwise_giou(torch.zeros(0, 4, dtype=torch.float64), b)
        assert out.shape == (0, 3)
