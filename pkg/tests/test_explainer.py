import json

import numpy as np
import pytest
import torch
from PIL import Image

from mace.explainer import (
    explain,
    render_overlay,
    threshold_mask,
    union_mask,
    upscale_and_normalize,
)


def test_bilinear_2x2_to_4x4_hand_oracle():
    # half-pixel centres: source coordinates -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1
    m = torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=torch.float64)
    t = np.array([0.0, 0.25, 0.75, 1.0])
    expected = (2 * t[:, None] + t[None, :]) / 3.0
    np.testing.assert_allclose(upscale_and_normalize(m, 4, 4).numpy(), expected, atol=1e-12)


def test_nearest_mode():
    m = torch.tensor([[0.0, 1.0], [2.0, 4.0]], dtype=torch.float64)
    out = upscale_and_normalize(m, 4, 4, mode="nearest").numpy()
    np.testing.assert_allclose(out[:2, :2], 0.0)
    np.testing.assert_allclose(out[2:, 2:], 1.0)
    with pytest.raises(ValueError):
        upscale_and_normalize(m, 4, 4, mode="cubic")


def test_constant_map_gives_zeros():
    out = upscale_and_normalize(torch.full((3, 3), 5.0), 6, 6)
    assert torch.all(out == 0)


def test_batched_and_range():
    out = upscale_and_normalize(torch.rand(2, 3, 4, 4, dtype=torch.float64), 16, 16)
    assert out.shape == (2, 3, 16, 16)
    assert out.min() >= 0 and out.max() <= 1
    flat = out.reshape(6, -1)
    torch.testing.assert_close(flat.max(1).values, torch.ones(6, dtype=torch.float64))


def test_threshold_and_union():
    heat = torch.tensor([[0.2, 0.5], [0.7, 0.49]])
    np.testing.assert_array_equal(threshold_mask(heat, 0.5).numpy(), [[False, True], [True, False]])
    with pytest.raises(ValueError):
        threshold_mask(heat, 0.0)
    a = torch.tensor([[True, False], [False, False]])
    b = torch.tensor([[False, False], [False, True]])
    np.testing.assert_array_equal(union_mask([a, b]).numpy(), [[True, False], [False, True]])
    assert not union_mask([], shape=(2, 2)).any()
    with pytest.raises(ValueError):
        union_mask([])


def test_overlay_shape_and_alpha():
    img = np.zeros((4, 4, 3))
    out = render_overlay(img, np.zeros((4, 4)), alpha=0.0)
    assert out.dtype == np.uint8 and out.shape == (4, 4, 3)
    assert np.all(out == 0)
    with pytest.raises(ValueError):
        render_overlay(img, np.zeros((3, 3)))


def test_explain_bundle(small_mace, small_blackbox, small_data, tmp_path):
    model, _, _ = small_mace
    image = small_data[2][3]
    bundle = explain(model, small_blackbox, image, "cross-triangle", threshold=0.5)
    assert bundle.class_index == 2 and bundle.image_id == image.image_id
    rels = [c.relevance for c in bundle.concepts]
    assert rels == sorted(rels, reverse=True)
    assert sorted(c.concept for c in bundle.concepts) == model.concept_ids[2]
    for c in bundle.concepts:
        assert c.heatmap.shape == (64, 64) and c.mask.dtype == bool
        assert 0 <= c.heatmap.min() and c.heatmap.max() <= 1
    np.testing.assert_array_equal(bundle.union, np.logical_or.reduce([c.mask for c in bundle.concepts]))
    written = bundle.save(tmp_path / "b", image.pixels)
    assert len(written) == len(bundle.concepts) + 2
    meta = json.loads((tmp_path / "b" / "bundle.json").read_text())
    assert meta["class_name"] == "cross-triangle"
    assert len(meta["concepts"]) == len(bundle.concepts)
    png = Image.open(written[0])
    assert png.size == (64, 64) and png.mode == "RGB"


def test_explain_unknown_class(small_mace, small_blackbox, small_data):
    with pytest.raises(ValueError):
        explain(small_mace[0], small_blackbox, small_data[2][0], "fox")
