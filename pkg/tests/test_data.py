import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from algnet.data import (BlurSpec, DatasetManifest, DecodeError, apply_blur, augment_flips, convolve_image,
                         decode_ppm, encode_ppm, generate_dataset, load_image, make_blur_kernel, sample_patch,
                         save_image, synthetic_scene, validated_pair)


def sliding_conv(image, kernel):
    """Direct true convolution with numpy 'reflect' padding."""
    kh, kw = kernel.shape
    padded = np.pad(image, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)), mode="reflect")
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return np.einsum("chwij,ij->chw", windows, kernel[::-1, ::-1])


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_gaussian_kernel_normalised(sigma):
    k = make_blur_kernel(BlurSpec("gaussian", sigma=sigma))
    assert abs(k.sum() - 1.0) < 1e-7
    assert k.shape[0] == 2 * int(np.ceil(3 * sigma)) + 1


def test_gaussian_narrow_limit():
    k = make_blur_kernel(BlurSpec("gaussian", sigma=1e-3))
    assert k[k.shape[0] // 2, k.shape[1] // 2] == pytest.approx(1.0)


def test_motion_kernels():
    delta = make_blur_kernel(BlurSpec("linear_motion", length=1))
    assert delta.shape == (1, 1) and delta[0, 0] == 1.0
    for angle in (0, 30, 90, 135):
        k = make_blur_kernel(BlurSpec("linear_motion", length=7, angle=angle))
        assert abs(k.sum() - 1.0) < 1e-7 and k.min() >= 0
    horizontal = make_blur_kernel(BlurSpec("linear_motion", length=5, angle=0))
    np.testing.assert_allclose(horizontal[2], 0.2)


def test_degenerate_specs_rejected():
    with pytest.raises(ValueError):
        make_blur_kernel(BlurSpec("gaussian", sigma=0.0))
    with pytest.raises(ValueError):
        make_blur_kernel(BlurSpec("linear_motion", length=0))
    with pytest.raises(ValueError):
        make_blur_kernel(BlurSpec("disk"))


def test_blur_identity_and_constants(rng):
    image = rng.random((3, 16, 16)).astype(np.float32)
    out = apply_blur(image, BlurSpec("linear_motion", length=1, noise_sigma=0.0))
    np.testing.assert_array_equal(out, image)
    const = np.full((3, 16, 16), 0.37, dtype=np.float32)
    for spec in (BlurSpec("gaussian", sigma=1.2, noise_sigma=0.0), BlurSpec("linear_motion", length=6, angle=40,
                                                                            noise_sigma=0.0)):
        np.testing.assert_allclose(apply_blur(const, spec), const, atol=1e-7)


@pytest.mark.parametrize("spec", [BlurSpec("gaussian", sigma=1.3), BlurSpec("linear_motion", length=7, angle=25)])
def test_blur_matches_sliding_window_oracle(rng, spec):
    image = rng.random((3, 20, 17))
    k = make_blur_kernel(spec)
    assert np.max(np.abs(convolve_image(image, k) - sliding_conv(image, k))) < 1e-6


def test_blur_determinism_and_noise(rng):
    image = synthetic_scene(32, 32, rng)
    spec = BlurSpec("gaussian", sigma=1.0, noise_sigma=0.01, seed=3)
    a = apply_blur(image, spec, index=5)
    np.testing.assert_array_equal(a, apply_blur(image, spec, index=5))
    assert not np.array_equal(a, apply_blur(image, spec, index=6))
    assert a.min() >= 0 and a.max() <= 1


def test_sample_patch(rng):
    sharp = rng.random((3, 32, 40)).astype(np.float32)
    blurred = sharp + 1.0
    s, b = sample_patch((sharp, blurred), 16, rng)
    np.testing.assert_array_equal(b, s + 1.0)  # shared window
    full = sample_patch((sharp[:, :32, :32], blurred[:, :32, :32]), 32, rng)
    np.testing.assert_array_equal(full[0], sharp[:, :32, :32])
    with pytest.raises(ValueError):
        sample_patch((sharp, blurred), 12, rng)
    with pytest.raises(ValueError):
        sample_patch((sharp, blurred), 48, rng)


def test_patch_sequence_replays_under_seed():
    sharp = np.random.default_rng(0).random((3, 64, 64))
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        runs.append([sample_patch((sharp, sharp), 16, rng)[0] for _ in range(5)])
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_flips(rng):
    sharp = rng.random((3, 8, 6))
    blurred = rng.random((3, 8, 6))
    seen = set()
    for seed in range(40):
        s, b = augment_flips((sharp, blurred), np.random.default_rng(seed))
        r = np.random.default_rng(seed)
        h, v = r.random() < 0.5, r.random() < 0.5
        seen.add((h, v))
        # explicit index permutation oracle
        rows = np.arange(8)[::-1] if v else np.arange(8)
        cols = np.arange(6)[::-1] if h else np.arange(6)
        np.testing.assert_array_equal(s, sharp[:, rows][:, :, cols])
        np.testing.assert_array_equal(b, blurred[:, rows][:, :, cols])
    assert len(seen) == 4
    const = np.full((3, 4, 4), 0.5)
    np.testing.assert_array_equal(augment_flips((const, const), rng)[0], const)
    twice = sharp[:, :, ::-1][:, :, ::-1]
    np.testing.assert_array_equal(twice, sharp)


def test_ppm_header_example():
    raw = b"P6\n4 2\n255\n" + bytes(range(24))
    img = decode_ppm(raw)
    assert img.shape == (3, 2, 4)
    assert img[0, 0, 0] == 0.0 and img[2, 1, 3] == 23 / 255
    assert decode_ppm(b"P6\n1 1\n255\n" + bytes([255, 255, 255]))[0, 0, 0] == 1.0


def test_ppm_comments_and_errors():
    assert decode_ppm(b"P6\n# note\n2 1\n255\n" + bytes(6)).shape == (3, 1, 2)
    with pytest.raises(DecodeError) as info:
        decode_ppm(b"P6\n4 2\n255\n" + bytes(10))
    assert "byte offset" in str(info.value)
    with pytest.raises(DecodeError) as info:
        decode_ppm(b"P5\n1 1\n255\n\x00")
    assert info.value.offset == 0
    with pytest.raises(DecodeError):
        decode_ppm(b"P6\n2 x\n255\n")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 16))
def test_ppm_roundtrip_bit_exact(h, w, seed):
    data = np.random.default_rng(seed).integers(0, 256, (3, h, w)).astype(np.float32) / 255
    back = decode_ppm(encode_ppm(data))
    np.testing.assert_array_equal(back, data)
    assert encode_ppm(back) == encode_ppm(data)


@pytest.mark.parametrize("suffix", [".ppm", ".png"])
def test_file_roundtrip(tmp_path, rng, suffix):
    data = rng.integers(0, 256, (3, 5, 7)).astype(np.float32) / 255
    path = tmp_path / f"img{suffix}"
    save_image(path, data)
    np.testing.assert_array_equal(load_image(path), data)


def test_unknown_format(tmp_path):
    p = tmp_path / "x.bmp"
    p.write_bytes(b"BM....")
    with pytest.raises(DecodeError):
        load_image(p)


def test_generate_dataset_is_deterministic(tmp_path):
    m1 = generate_dataset(tmp_path / "a", 3, "motion", seed=7)
    m2 = generate_dataset(tmp_path / "b", 3, "motion", seed=7)
    for (s1, b1), (s2, b2) in zip(m1.pairs, m2.pairs):
        assert s1.read_bytes() == s2.read_bytes() and b1.read_bytes() == b2.read_bytes()
    manifest = DatasetManifest.read(tmp_path / "a" / "manifest.tsv")
    assert manifest.seed == 7 and manifest.patch_size == 64 and len(manifest.pairs) == 3
    for sharp, blurred in manifest.load_pairs():
        assert sharp.shape == blurred.shape == (3, 64, 64)


def test_manifest_validation(tmp_path, rng):
    save_image(tmp_path / "s.ppm", rng.random((3, 8, 8)))
    save_image(tmp_path / "b.ppm", rng.random((3, 8, 16)))
    with pytest.raises(ValueError, match="differ"):
        validated_pair(tmp_path / "s.ppm", tmp_path / "b.ppm")
    (tmp_path / "m.tsv").write_text("only-one-column\n")
    with pytest.raises(ValueError):
        DatasetManifest.read(tmp_path / "m.tsv")
    (tmp_path / "m2.tsv").write_text("s.ppm\tmissing.ppm\n")
    with pytest.raises(FileNotFoundError):
        DatasetManifest.read(tmp_path / "m2.tsv").load_pairs()
