"""Detector/descriptor behavior on rendered fixtures, and matching strategies."""

import numpy as np
import pytest

from gpgmaps.features import (
    FeatureOptions,
    Keypoint,
    compute_descriptors,
    detect_keypoints,
    match_features,
)


def gaussian_blob(shape, cu, cv, sigma, amp=1.0):
    vv, uu = np.mgrid[0 : shape[0], 0 : shape[1]]
    return amp * np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2 * sigma**2))


def blob_field(shape, blobs, seed=None):
    img = np.zeros(shape)
    for cu, cv, s, a in blobs:
        img += gaussian_blob(shape, cu, cv, s, a)
    return img


def test_constant_image_no_keypoints():
    assert detect_keypoints(np.full((64, 64), 3.0)) == []


def test_single_blob_detected_at_center():
    img = gaussian_blob((96, 96), 48.0, 48.0, 4.0)
    kps = detect_keypoints(img)
    assert len(kps) >= 1
    best = kps[0]
    assert abs(best.u - 48.0) <= 1.0
    assert abs(best.v - 48.0) <= 1.0
    # detected scale within a factor 1.6 of the blob sigma
    assert 4.0 / 1.6 <= best.scale <= 4.0 * 1.6


def test_detection_shift_equivariant():
    rng = np.random.default_rng(0)
    blobs = [(20 + 60 * rng.random(), 20 + 60 * rng.random(), 2 + 3 * rng.random(), 0.5 + rng.random())
             for _ in range(6)]
    a = blob_field((128, 128), blobs)
    shift = 8  # multiple of the coarsest sampling stride
    b = np.zeros_like(a)
    b[shift:, shift:] = a[:-shift, :-shift]
    kps_a = detect_keypoints(a)
    kps_b = detect_keypoints(b)
    margin = 30
    inner_a = [k for k in kps_a if margin < k.u < 128 - margin - shift and margin < k.v < 128 - margin - shift]
    assert inner_a
    for ka in inner_a:
        match = [kb for kb in kps_b if abs(kb.u - ka.u - shift) < 0.25 and abs(kb.v - ka.v - shift) < 0.25]
        assert match, f"keypoint at ({ka.u:.1f},{ka.v:.1f}) lost under translation"


def test_mask_restricts_keypoints():
    img = gaussian_blob((96, 96), 30.0, 30.0, 3.0) + gaussian_blob((96, 96), 70.0, 70.0, 3.0)
    mask = np.zeros((96, 96), dtype=bool)
    mask[:48, :48] = True
    kps = detect_keypoints(img, mask)
    assert kps
    for kp in kps:
        assert mask[int(round(kp.v)), int(round(kp.u))]


def test_determinism():
    rng = np.random.default_rng(1)
    img = rng.random((80, 80))
    k1 = detect_keypoints(img)
    k2 = detect_keypoints(img)
    assert [(a.u, a.v, a.scale, a.orientation) for a in k1] == [
        (b.u, b.v, b.scale, b.orientation) for b in k2
    ]
    d1, _ = compute_descriptors(img, k1)
    d2, _ = compute_descriptors(img, k2)
    assert np.array_equal(d1, d2)


def test_descriptors_unit_norm_and_identical_patches():
    rng = np.random.default_rng(2)
    patch = rng.random((40, 40))
    img = np.zeros((128, 128))
    img[10:50, 10:50] = patch
    img[70:110, 70:110] = patch
    kps = [
        Keypoint(u=30.0, v=30.0, scale=2.0, orientation=0.3, response=1.0),
        Keypoint(u=90.0, v=90.0, scale=2.0, orientation=0.3, response=1.0),
    ]
    desc, kept = compute_descriptors(img, kps)
    assert len(kept) == 2
    assert np.allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-6)
    assert np.allclose(desc[0], desc[1], atol=1e-12)


def test_descriptor_rotation_invariance():
    # same structure rendered at 0 and rotated 90 degrees about the keypoint
    def render(theta):
        img = np.zeros((128, 128))
        c, s = np.cos(theta), np.sin(theta)
        for du, dv, sig, amp in [(10, 0, 2.5, 1.0), (-6, 7, 2.0, 0.7), (0, -9, 3.0, 0.5)]:
            ru, rv = c * du - s * dv, s * du + c * dv
            img += gaussian_blob((128, 128), 64 + ru, 64 + rv, sig, amp)
        return img

    img0 = render(0.0)
    img90 = render(np.pi / 2)
    kp0 = detect_keypoints(img0)
    kp90 = detect_keypoints(img90)
    # pick the keypoint nearest the render center in each image
    k0 = min(kp0, key=lambda k: (k.u - 64) ** 2 + (k.v - 64) ** 2)
    k90 = min(kp90, key=lambda k: (k.u - 64) ** 2 + (k.v - 64) ** 2)
    d0, _ = compute_descriptors(img0, [k0])
    d90, _ = compute_descriptors(img90, [k90])
    rng = np.random.default_rng(3)
    rand_pairs = np.abs(rng.random((200, 128)) - rng.random((200, 128))).sum(axis=1).mean()
    dist = np.abs(d0[0] - d90[0]).sum()
    assert dist < 0.2 * rand_pairs


def test_descriptor_window_exit_drops_keypoint():
    img = np.random.default_rng(4).random((64, 64))
    kps = [Keypoint(u=2.0, v=2.0, scale=3.0, orientation=0.0, response=1.0)]
    desc, kept = compute_descriptors(img, kps)
    assert len(kept) == 0 and desc.shape == (0, 128)


def test_match_identity():
    rng = np.random.default_rng(5)
    f = rng.random((20, 128))
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    for strat in ("bidirectional", "ratio"):
        pairs = match_features(f, f, strat)
        assert pairs == [(i, i) for i in range(20)]


def test_match_empty_sides():
    f = np.random.default_rng(6).random((5, 128))
    assert match_features(f, np.zeros((0, 128))) == []
    assert match_features(np.zeros((0, 128)), f) == []


def test_ratio_rejects_ambiguous_bruteforce_accepts():
    rng = np.random.default_rng(7)
    q = rng.random((1, 128))
    twin = q[0] + rng.normal(0, 1e-4, 128)
    far = rng.random(128) * 3
    f2 = np.vstack([q[0] + rng.normal(0, 1e-4, 128), twin, far])
    bf = match_features(q, f2, "bidirectional")
    rt = match_features(q, f2, "ratio")
    assert len(bf) == 1
    assert rt == []


def test_match_equals_exhaustive_scan():
    rng = np.random.default_rng(8)
    f1 = rng.random((30, 128))
    f2 = rng.random((40, 128))
    pairs = match_features(f1, f2, "bidirectional")
    d = np.abs(f1[:, None, :] - f2[None, :, :]).sum(axis=2)
    expect = []
    for i in range(30):
        j = int(np.argmin(d[i]))
        if int(np.argmin(d[:, j])) == i:
            expect.append((i, j))
    assert pairs == expect


def test_match_unknown_strategy():
    f = np.ones((2, 128))
    with pytest.raises(ValueError):
        match_features(f, f, "hough")
