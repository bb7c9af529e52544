import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosemetrics.bitmask import (
    BitMaskVolume,
    MaskAccounting,
    VoxelPermutation,
    apply_permutation,
    encode,
)
from dosemetrics.volumes import RoiMask, VolumeFormatError


def make_masks(rng, dims, count, density=0.3):
    nx, ny, nz = dims
    return [
        RoiMask(f"R{i:02d}", dims, rng.random((nz, ny, nx)) < density)
        for i in range(1, count + 1)
    ]


def test_overlapping_voxel_sets_multiple_bits():
    dims = (2, 1, 1)
    m1 = RoiMask("a", dims, np.array([[[True, False]]]))
    m2 = RoiMask("b", dims, np.array([[[False, False]]]))
    m3 = RoiMask("c", dims, np.array([[[True, True]]]))
    volume = encode([m1, m2, m3])
    assert volume.words[0, 0, 0] == 0b101 == 5
    assert volume.words[0, 0, 1] == 0b100


def test_voxel_in_no_roi_is_zero():
    dims = (2, 2, 2)
    volume = encode([RoiMask("a", dims, np.zeros((2, 2, 2), dtype=bool))])
    assert not volume.words.any()


def test_decode_bit_arithmetic():
    dims = (1, 1, 1)
    masks = [RoiMask(n, dims, np.array([[[v]]])) for n, v in
             [("a", True), ("b", False), ("c", True)]]
    volume = encode(masks)
    assert volume.words[0, 0, 0] == 5
    assert not volume.decode(2).occupancy[0, 0, 0]
    assert volume.decode(3).occupancy[0, 0, 0]
    assert volume.decode("b").name == "b"


def test_encode_errors():
    dims = (2, 2, 2)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="at least one"):
        encode([])
    masks = make_masks(rng, dims, 33)
    with pytest.raises(ValueError, match="33 masks"):
        encode(masks)
    a = RoiMask("a", dims, np.zeros((2, 2, 2), dtype=bool))
    with pytest.raises(ValueError, match="duplicate"):
        encode([a, a])
    b = RoiMask("b", (4, 4, 4), np.zeros((4, 4, 4), dtype=bool))
    with pytest.raises(ValueError, match="dims"):
        encode([a, b])


def test_decode_unknown_roi():
    volume = encode([RoiMask("a", (2, 2, 2), np.ones((2, 2, 2), dtype=bool))])
    with pytest.raises(KeyError, match="unknown ROI name 'x'"):
        volume.decode("x")
    with pytest.raises(IndexError, match="out of range"):
        volume.decode(2)


def test_roundtrip_30_random_overlapping_masks(rng):
    dims = (9, 7, 5)
    masks = make_masks(rng, dims, 30)
    volume = encode(masks)
    decoded = volume.decode_all()
    assert [m.name for m in decoded] == [m.name for m in masks]
    for original, back in zip(masks, decoded):
        assert np.array_equal(original.occupancy, back.occupancy)


def test_bit_hygiene_enforced():
    words = np.zeros((2, 2, 2), dtype=np.uint32)
    words[0, 0, 0] = 0b100  # bit 3 set with only 2 ROIs
    with pytest.raises(VolumeFormatError, match="bits above position 2"):
        BitMaskVolume((2, 2, 2), (1, 1, 1), words, {"a": 1, "b": 2})


def test_roi_table_indices_must_be_contiguous():
    words = np.zeros((2, 2, 2), dtype=np.uint32)
    with pytest.raises(VolumeFormatError, match="contiguous"):
        BitMaskVolume((2, 2, 2), (1, 1, 1), words, {"a": 1, "b": 3})


def test_roi_voxel_count_matches_bruteforce(rng):
    dims = (6, 5, 4)
    masks = make_masks(rng, dims, 8)
    volume = encode(masks)
    for m in masks:
        assert volume.roi_voxel_count(m.name) == int(m.occupancy.sum())
    empty = encode([RoiMask("e", dims, np.zeros((4, 5, 6), dtype=bool))])
    assert empty.roi_voxel_count("e") == 0
    single = np.zeros((4, 5, 6), dtype=bool)
    single[2, 3, 1] = True
    assert encode([RoiMask("s", dims, single)]).roi_voxel_count("s") == 1


def test_identity_and_flip_involution(rng):
    dims = (5, 6, 7)
    volume = encode(make_masks(rng, dims, 5))
    same = apply_permutation(volume, VoxelPermutation.identity())
    assert np.array_equal(same.words, volume.words)
    for axis in "xyz":
        t = VoxelPermutation.flip(axis)
        twice = t.apply(t.apply(volume))
        assert np.array_equal(twice.words, volume.words)


def test_rotation_requires_square_plane(rng):
    volume = encode(make_masks(rng, (4, 6, 4), 2))
    with pytest.raises(ValueError, match="equal axis lengths"):
        VoxelPermutation.rotate("z").apply(volume)  # nx=4, ny=6
    VoxelPermutation.rotate("y").apply(volume)  # nx == nz, allowed
    VoxelPermutation.rotate("z", turns=2).apply(volume)  # half turns always fine


def test_translation_zero_fill(rng):
    dims = (4, 4, 4)
    volume = encode(make_masks(rng, dims, 3))
    shifted = VoxelPermutation.translate(2, 0, -1).apply(volume)
    assert not shifted.words[:, :, :2].any()  # entering face zero-filled
    assert not shifted.words[-1:, :, :].any()
    gone = VoxelPermutation.translate(4, 0, 0).apply(volume)
    assert not gone.words.any()


PERMUTATIONS = [
    VoxelPermutation.identity(),
    VoxelPermutation.flip("x"),
    VoxelPermutation.flip("y"),
    VoxelPermutation.flip("z"),
    VoxelPermutation.rotate("z", 1),
    VoxelPermutation.rotate("x", 3),
    VoxelPermutation.rotate("y", 2),
    VoxelPermutation.translate(1, -2, 3),
    VoxelPermutation.compose(
        VoxelPermutation.flip("x"),
        VoxelPermutation.rotate("z", 1),
        VoxelPermutation.translate(0, 1, 0),
    ),
]


@pytest.mark.parametrize("transform", PERMUTATIONS)
def test_transform_commutes_with_decode(transform, rng):
    dims = (6, 6, 6)
    masks = make_masks(rng, dims, 7)
    volume = encode(masks)
    moved = transform.apply(volume)
    for m in masks:
        direct = transform.apply_to_mask(m)
        via_packed = moved.decode(m.name)
        assert np.array_equal(direct.occupancy, via_packed.occupancy)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), count=st.integers(1, 32))
def test_roundtrip_property(seed, count):
    rng = np.random.default_rng(seed)
    dims = (5, 4, 3)
    masks = make_masks(rng, dims, count, density=0.4)
    volume = encode(masks)
    for i, m in enumerate(masks, start=1):
        assert np.array_equal(volume.decode(i).occupancy, m.occupancy)


def test_mask_accounting_counts_live_masks():
    volume = encode([RoiMask("a", (2, 2, 2), np.ones((2, 2, 2), dtype=bool)),
                     RoiMask("b", (2, 2, 2), np.zeros((2, 2, 2), dtype=bool))])
    acc = MaskAccounting()
    volume.decode("a", acc)
    volume.decode("b", acc)
    assert (acc.live, acc.peak) == (2, 2)
    acc.note_release()
    acc.note_release()
    assert acc.live == 0
    with pytest.raises(RuntimeError):
        acc.note_release()
