import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hfshield.freq_mask import build_mask, laplacian_edge, mask_count, threshold_for_ratio
from hfshield.image import (
    ImageError,
    generate_dataset,
    load_mask_png,
    load_png,
    save_mask_png,
    save_png,
    to_luminance,
    write_dataset,
)


@pytest.fixture(scope="module")
def faces():
    return generate_dataset(3, seed=11)


# ---- image_core ----------------------------------------------------------

def test_dataset_is_deterministic():
    a = generate_dataset(1, seed=7)
    b = generate_dataset(1, seed=7)
    assert a[0].spec == b[0].spec
    assert a[0].images.tobytes() == b[0].images.tobytes()


def test_dataset_differs_across_seeds():
    assert not np.array_equal(generate_dataset(1, 7)[0].images, generate_dataset(1, 8)[0].images)


def test_dataset_shape_split_and_range(faces):
    for ident in faces:
        assert ident.images.shape == (8, 32, 32, 3)
        assert ident.originals.shape == ident.references.shape == (4, 32, 32, 3)
        assert ident.images.min() >= 0.0 and ident.images.max() <= 1.0
        # jittered, not duplicated
        assert len({img.tobytes() for img in ident.images}) == 8


def test_dataset_has_genuine_edges(faces):
    for ident in faces:
        for img in ident.images:
            edges = laplacian_edge(to_luminance(img))
            assert np.mean(edges > 0.05) >= 0.05


def test_dataset_rejects_zero_identities():
    with pytest.raises(ValueError):
        generate_dataset(0, seed=1)


@pytest.mark.parametrize(
    "rgb, expected", [((1.0, 1.0, 1.0), 1.0), ((1.0, 0.0, 0.0), 0.299), ((0.4, 0.4, 0.4), 0.4)]
)
def test_luminance_values(rgb, expected):
    img = np.broadcast_to(np.array(rgb), (2, 2, 3))
    np.testing.assert_allclose(to_luminance(img), expected, rtol=0, atol=1e-15)


def test_luminance_rejects_single_channel():
    with pytest.raises(ImageError):
        to_luminance(np.zeros((4, 4, 1)))


def test_png_roundtrip_within_quantization(tmp_path, rng):
    img = rng.uniform(size=(9, 7, 3))
    save_png(img, tmp_path / "a.png")
    back = load_png(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_png_endpoints_and_rounding(tmp_path):
    img = np.zeros((1, 3, 3))
    img[0, 0] = 1.0
    img[0, 1] = 0.5
    save_png(img, tmp_path / "e.png")
    back = load_png(tmp_path / "e.png")
    assert back[0, 0, 0] == 1.0
    assert back[0, 2, 0] == 0.0
    assert back[0, 1, 0] == 128 / 255
    assert abs(back[0, 1, 0] - 0.50196) < 1e-5


def test_png_bytes_reproducible(tmp_path, rng):
    img = rng.uniform(size=(8, 8, 3))
    save_png(img, tmp_path / "1.png")
    save_png(img, tmp_path / "2.png")
    assert (tmp_path / "1.png").read_bytes() == (tmp_path / "2.png").read_bytes()


def test_png_load_invalid_file(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"definitely not a png")
    with pytest.raises(ImageError, match="cannot read"):
        load_png(p)


def test_mask_png_roundtrip(tmp_path):
    m = np.zeros((5, 5), dtype=np.uint8)
    m[1, 2] = m[3, 3] = 1
    save_mask_png(m, tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), m)


def test_write_dataset_manifest(tmp_path, faces):
    manifest = write_dataset(faces[:1], tmp_path)
    on_disk = json.loads((tmp_path / "dataset.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    files = on_disk["identities"][0]["files"]
    assert len(files) == 8
    np.testing.assert_allclose(load_png(tmp_path / files[0]), faces[0].images[0], atol=0.5 / 255 + 1e-12)


# ---- freq_mask -----------------------------------------------------------

def test_laplacian_constant_is_zero():
    assert np.all(laplacian_edge(np.full((6, 6, 1), 0.7)) == 0.0)


def test_laplacian_impulse():
    img = np.zeros((7, 7, 1))
    img[3, 3] = 1.0
    e = laplacian_edge(img)
    # oracle: direct evaluation of the 4-neighbour stencil
    assert e[3, 3] == 4.0
    for (i, j) in [(2, 3), (4, 3), (3, 2), (3, 4)]:
        assert e[i, j] == 1.0
    assert np.count_nonzero(e) == 5


def test_laplacian_ramp_interior_is_zero():
    ramp = np.tile(np.linspace(0.0, 1.0, 10), (10, 1))[..., None]
    e = laplacian_edge(ramp)
    np.testing.assert_allclose(e[1:-1, 1:-1], 0.0, atol=1e-14)


def test_laplacian_rejects_rgb():
    with pytest.raises(ValueError):
        laplacian_edge(np.zeros((4, 4, 3)))


def test_mask_count_arithmetic():
    assert mask_count(0.03, 32, 32) == 31
    assert mask_count(0.05, 32, 32) == 52


def test_threshold_exact_count(rng):
    m = threshold_for_ratio(rng.uniform(size=(32, 32)), 0.03)
    assert m.sum() == 31 and m.dtype == np.uint8


def test_threshold_ties_break_row_major():
    m = threshold_for_ratio(np.ones((32, 32)), 0.03)
    assert m.ravel()[:31].all() and not m.ravel()[31:].any()


def test_threshold_impulse_selected():
    e = np.zeros((32, 32))
    e[20, 9] = 3.0
    m = threshold_for_ratio(e, 0.003)  # k = ceil(3.072) = 4 < 5
    assert m.sum() == 4
    assert m[20, 9] == 1


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
def test_threshold_rejects_bad_ratio(ratio):
    with pytest.raises(ValueError):
        threshold_for_ratio(np.zeros((4, 4)), ratio)


def test_build_mask_on_face(faces):
    img = faces[0].images[0]
    m3 = build_mask(img, 0.03)
    m5 = build_mask(img, 0.05)
    assert m3.sum() == 31 and m5.sum() == 52
    np.testing.assert_array_equal(build_mask(img, 0.03), m3)
    assert np.all(m5[m3 == 1] == 1)


def test_build_mask_8_neighbour_variant(faces):
    m = build_mask(faces[0].images[0], 0.03, neighbors=8)
    assert m.sum() == 31


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
           elements=st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0])),
    st.floats(0.01, 0.98),
    st.floats(0.01, 0.98),
)
def test_mask_properties(edges, r1, r2):
    lo, hi = sorted((r1, r2))
    h, w = edges.shape
    m_lo = threshold_for_ratio(edges, lo)
    m_hi = threshold_for_ratio(edges, hi)
    assert m_lo.sum() == mask_count(lo, h, w)
    assert m_hi.sum() == mask_count(hi, h, w)
    # nesting
    assert np.all(m_hi[m_lo == 1] == 1)
    # dominance: every selected magnitude >= every unselected one
    if 0 < m_lo.sum() < m_lo.size:
        assert edges[m_lo == 1].min() >= edges[m_lo == 0].max()


def test_degenerate_constant_image_mask_is_total():
    m = build_mask(np.full((32, 32, 3), 0.5), 0.05)
    assert m.sum() == 52
