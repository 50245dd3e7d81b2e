import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudolabel.augment import (
    DEFAULT_AUGMENTATIONS,
    HFLIP,
    IDENTITY,
    VFLIP,
    AugmentationSet,
    AugmentationSpec,
    flip_array,
    forward_box,
    forward_mask,
    inverse_box,
    inverse_instance,
    inverse_mask,
    parse_spec,
    serialize_spec,
)
from pseudolabel.geometry import BBox, BinaryMask, Instance

from conftest import boxes, masks

BRIGHT = AugmentationSpec("brightness", (1.3,))
ALL_VIEWS = [IDENTITY, HFLIP, VFLIP, BRIGHT, AugmentationSpec("saturation", (0.8,)),
             AugmentationSpec("color-shift", (0.1, -0.05, 0.0))]


def test_forward_and_inverse_examples():
    assert forward_box(VFLIP, BBox(0.1, 0.2, 0.4, 0.5)) == BBox(0.1, 0.5, 0.4, 0.8)
    assert inverse_box(VFLIP, BBox(0.1, 0.5, 0.4, 0.8)) == BBox(0.1, 0.2, 0.4, 0.5)
    assert inverse_box(HFLIP, BBox(0.2, 0.1, 0.5, 0.3)) == BBox(0.5, 0.1, 0.8, 0.3)
    full = BBox(0.0, 0.0, 1.0, 1.0)
    assert forward_box(HFLIP, full) == full
    b = BBox(0.13, 0.27, 0.61, 0.99)
    assert forward_box(BRIGHT, b) == b
    assert inverse_box(IDENTITY, b) == b


@given(boxes(), st.sampled_from(ALL_VIEWS))
def test_box_round_trip_is_exact(b, view):
    assert inverse_box(view, forward_box(view, b)) == b
    assert inverse_box(view, forward_box(view, b)).as_tuple() == b.as_tuple()


def test_mask_flips():
    data = np.zeros((4, 4), dtype=bool)
    data[0] = True
    flipped = inverse_mask(VFLIP, BinaryMask(data))
    assert flipped.data[3].all() and flipped.area == 4
    m = BinaryMask(np.arange(12).reshape(3, 4) % 3 == 0)
    assert forward_mask(HFLIP, forward_mask(HFLIP, m)) == m
    assert inverse_mask(IDENTITY, m) == m
    assert inverse_mask(BRIGHT, m) == m


@given(masks(), st.sampled_from(ALL_VIEWS))
def test_mask_round_trip_preserves_pixels(m, view):
    f = forward_mask(view, m)
    assert f.area == m.area
    assert inverse_mask(view, f) == m


def test_mask_flip_agrees_with_box_flip():
    data = np.zeros((6, 8), dtype=bool)
    data[1:3, 2:7] = True
    from pseudolabel.geometry import mask_to_bbox

    m = BinaryMask(data)
    for view in (HFLIP, VFLIP):
        assert mask_to_bbox(forward_mask(view, m)) == forward_box(view, mask_to_bbox(m))


def test_flip_array_matches_mask_flip():
    img = np.arange(24).reshape(4, 6)
    assert np.array_equal(flip_array(VFLIP, img), img[::-1])
    assert np.array_equal(flip_array(HFLIP, img), img[:, ::-1])
    assert np.array_equal(flip_array(BRIGHT, img), img)


def test_tokens():
    assert serialize_spec(VFLIP) == "vflip"
    assert serialize_spec(BRIGHT) == "brightness:1.30"
    assert parse_spec("vflip") == VFLIP
    assert parse_spec("color-shift:0.10,-0.05,0.00").params == (0.1, -0.05, 0.0)
    for view in ALL_VIEWS:
        assert parse_spec(view.token) == view


@given(st.sampled_from(["brightness", "saturation"]), st.integers(-300, 300))
def test_token_round_trip_for_representable_params(kind, hundredths):
    spec = AugmentationSpec(kind, (hundredths / 100,))
    assert parse_spec(serialize_spec(spec)) == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        AugmentationSpec("rotate")
    with pytest.raises(ValueError):
        AugmentationSpec("brightness")
    with pytest.raises(ValueError):
        AugmentationSpec("vflip", (1.0,))
    with pytest.raises(ValueError):
        AugmentationSpec("brightness", (1.234,))
    with pytest.raises(ValueError):
        parse_spec("brightness:abc")


def test_geometric_flag():
    assert HFLIP.geometric and VFLIP.geometric
    assert not IDENTITY.geometric and not BRIGHT.geometric


def test_augmentation_set_rules():
    assert DEFAULT_AUGMENTATIONS.tokens == ["identity", "vflip"]
    assert AugmentationSet.from_tokens(["identity", "hflip", "brightness:1.10"]).K == 3
    with pytest.raises(ValueError):
        AugmentationSet(())
    with pytest.raises(ValueError):
        AugmentationSet((VFLIP,))
    with pytest.raises(ValueError):
        AugmentationSet((IDENTITY, IDENTITY))
    with pytest.raises(ValueError):
        AugmentationSet((IDENTITY, VFLIP, VFLIP))


def test_inverse_instance_uses_token():
    m = BinaryMask(np.triu(np.ones((4, 4))))
    inst = Instance(BBox(0.1, 0.5, 0.4, 0.8), 0.7, "spacecraft", m, "vflip")
    back = inverse_instance(inst)
    assert back.box == BBox(0.1, 0.2, 0.4, 0.5)
    assert back.mask == BinaryMask(m.data[::-1])
    assert back.score == 0.7 and back.view == "vflip"
    with pytest.raises(ValueError):
        inverse_instance(inst, HFLIP)
    with pytest.raises(ValueError):
        inverse_instance(Instance(BBox(0, 0, 1, 1)))
