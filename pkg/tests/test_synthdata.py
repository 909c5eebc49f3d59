import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartseg.core import seeded_rng
from smartseg.flow import warp
from smartseg.metrics import dsc
from smartseg.synthdata import (BACKGROUND_LEVEL, VESSEL_DEPTH, DegradationSpec, MotionSpec, VesselTreeSpec,
                                build_tree, contrast_ramp, dataset_checksum, default_peak_frame, generate_clip,
                                make_dataset, pose_flow, random_specs, signed_tube_field)

# measured once on the generated fixtures, frozen here
SEED7_FOREGROUND = 0.077178955078125
SMALL_DATASET_SHA = "d55a3157433617da3b5465d8270aeb3011709f84c3d8316d3dbf8a6cc0c4f299"


def test_zero_motion_gives_identical_frames_and_zero_flow():
    c = generate_clip(VesselTreeSpec(seed=1), MotionSpec(0.0, 0.0),
                      DegradationSpec(noise_sigma=0.0, ramp_floor=1.0))
    for f in c.frames[1:]:
        assert np.array_equal(f.pixels, c.frames[0].pixels)
    for fw, bw in c.flows:
        assert not fw.u.any() and not fw.v.any() and not bw.u.any() and not bw.v.any()


def test_constant_translation_flow_is_uniform():
    m = MotionSpec(0.0, 0.0, drift_px=(1.0, 0.0))
    c = generate_clip(VesselTreeSpec(seed=2), m, DegradationSpec())
    for fw, bw in c.flows:
        np.testing.assert_allclose(fw.u, 1.0, atol=1e-6)
        np.testing.assert_allclose(fw.v, 0.0, atol=1e-6)
        np.testing.assert_allclose(bw.u, -1.0, atol=1e-6)


def test_default_seed7_foreground_fraction():
    c = generate_clip(VesselTreeSpec(seed=7), MotionSpec(), DegradationSpec())
    frac = np.mean([m.values.mean() for _, m in c.masks])
    assert 0.01 <= frac <= 0.15
    assert frac == pytest.approx(SEED7_FOREGROUND, abs=1e-12)


def test_clip_structure():
    c = generate_clip(VesselTreeSpec(seed=3), MotionSpec(), DegradationSpec(), n_frames=6, H=40, W=48)
    assert len(c) == 6 and c.shape == (40, 48)
    assert len(c.masks) == 6 and len(c.flows) == 5
    # 8-bit quantised intensities
    px = np.stack([f.pixels for f in c.frames])
    np.testing.assert_array_equal(np.rint(px * 255) / 255, px)


@pytest.mark.parametrize("kw", [dict(n_frames=1), dict(H=16), dict(peak_frame=9)])
def test_generate_rejects_bad_arguments(kw):
    with pytest.raises(ValueError):
        generate_clip(VesselTreeSpec(), MotionSpec(), DegradationSpec(), **kw)


def test_spec_validation():
    with pytest.raises(ValueError):
        VesselTreeSpec(branch_width_px=(1.0, 3.0))
    with pytest.raises(ValueError):
        VesselTreeSpec(n_branches=0)
    with pytest.raises(ValueError):
        MotionSpec(rotation_amp_deg=-1.0)
    with pytest.raises(ValueError):
        DegradationSpec(contrast_level=0.0)


def test_degenerate_tree_raises(monkeypatch):
    # force every branch endpoint onto its start point
    import smartseg.synthdata as sd

    def flat_rng(seed, *stream):
        class R:
            def uniform(self, lo, hi, size=None):
                return np.zeros(size) if size is not None else 0.0

            def integers(self, n):
                return 0

            def choice(self, a):
                return a[0]

        return R()

    monkeypatch.setattr(sd, "seeded_rng", flat_rng)
    with pytest.raises(ValueError, match="zero-length"):
        build_tree(VesselTreeSpec(n_branches=2), 64, 64)


def test_contrast_ramp_has_unique_peak():
    for n in range(2, 12):
        for peak in range(n):
            r = contrast_ramp(n, peak, 0.3)
            assert np.argmax(r) == peak and np.sum(r == r.max()) == 1


def test_peak_frame_is_most_prominent():
    c = generate_clip(VesselTreeSpec(seed=4), MotionSpec(0.0, 0.0), DegradationSpec(noise_sigma=0.0))
    peak = default_peak_frame(8, 4)
    depth = [BACKGROUND_LEVEL - f.pixels[m.values.astype(bool)].mean() for f, (_, m) in zip(c.frames, c.masks)]
    assert int(np.argmax(depth)) == peak


def test_clean_full_contrast_threshold_recovers_masks():
    clean = DegradationSpec(1.0, 0.0, 0.0, background_amp=0.0, ramp_floor=1.0)
    cut = BACKGROUND_LEVEL - VESSEL_DEPTH / 2
    for seed in range(5):
        c = generate_clip(VesselTreeSpec(seed=seed), MotionSpec(), clean)
        for f, (_, m) in zip(c.frames, c.masks):
            assert dsc(f.pixels < cut, m.values) >= 0.99


def test_ground_truth_flow_transports_the_tube_field():
    # continuous tube field: the rasterisation-free form of the mask
    for seed in range(6):
        tree, motion = VesselTreeSpec(seed=seed), MotionSpec()
        for t in range(7):
            g0, g1 = signed_tube_field(tree, motion, t), signed_tube_field(tree, motion, t + 1)
            bwd = np.stack(pose_flow(motion, t + 1, t, 64, 64))
            assert dsc(warp(g0, bwd) > 0, g1 > 0) >= 0.98


def test_ground_truth_flow_transports_binary_masks():
    # binary masks lose up to a pixel of boundary to resampling; bound measured on random specs
    rng = seeded_rng(0)
    scores = []
    for _ in range(8):
        tree, motion, _ = random_specs(rng, 8)
        c = generate_clip(tree, motion, DegradationSpec())
        for t in range(7):
            bw = c.flows[t][1]
            m0 = c.masks[t][1].values.astype(float)
            scores.append(dsc(warp(m0, bw) >= 0.5, c.masks[t + 1][1].values))
    assert np.mean(scores) >= 0.90


@given(st.integers(0, 2 ** 20), st.integers(0, 6))
@settings(max_examples=15, deadline=None)
def test_forward_and_backward_flows_invert_each_other(seed, t):
    motion = random_specs(seeded_rng(seed), 8)[1]
    fu, fv = pose_flow(motion, t, t + 1, 48, 48)
    bu, bv = pose_flow(motion, t + 1, t, 48, 48)
    # x + F_fwd(x) lands at y; y + F_bwd(y) must return to x (sampled bilinearly)
    back_u = warp(bu.astype(np.float64), np.stack([fu, fv]))
    back_v = warp(bv.astype(np.float64), np.stack([fu, fv]))
    inner = (slice(8, -8), slice(8, -8))
    assert np.abs(fu + back_u)[inner].max() < 1e-3
    assert np.abs(fv + back_v)[inner].max() < 1e-3


def test_dataset_split_counts_and_protocol():
    lab, unl, test = make_dataset(16, 95, 1, seed=0, H=32, W=32, n_frames=4)
    assert len(lab) + len(unl) == 111 and len(test) == 28
    ids = [c.clip_id for c in lab + unl + test]
    assert len(set(ids)) == len(ids)
    assert all(len(c.masks) == 1 for c in lab)
    assert all(c.masks is None for c in unl)
    assert all(len(c.masks) == len(c) for c in test)


def test_two_annotated_frames_are_neighbours():
    lab, _, _ = make_dataset(4, 0, 2, seed=1)
    for c in lab:
        (a, _), (b, _) = c.masks
        assert b - a == 1


def test_minimal_dataset():
    lab, unl, test = make_dataset(1, 0, 1, seed=3)
    assert len(lab) == 1 and unl == [] and len(test) == 1


def test_dataset_checksum_is_stable_and_worker_independent():
    assert dataset_checksum(*make_dataset(2, 1, 1, seed=5)) == SMALL_DATASET_SHA
    assert dataset_checksum(*make_dataset(2, 1, 1, seed=5, workers=2)) == SMALL_DATASET_SHA
    assert dataset_checksum(*make_dataset(2, 1, 1, seed=6)) != SMALL_DATASET_SHA
