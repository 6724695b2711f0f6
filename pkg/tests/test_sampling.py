import numpy as np
import pytest
from scipy import stats

from clseg import sampling
from clseg.sampling import (PatchSampler, SamplerConfig, TrainingSubject,
                            build_lesion_index, choose_icd, draw_rng)

from brute_force import flood_fill_components


def _subject(cl=None, side=32, subject_id="s0", seed=0):
    r = np.random.default_rng(seed)
    tissue = np.zeros((side,) * 3, np.uint8)
    tissue[4:side - 4, 4:side - 4, 4:side - 4] = 1
    cl_arr = cl if cl is not None else np.zeros((side,) * 3, np.uint8)
    return TrainingSubject(
        subject_id=subject_id,
        contrasts=r.standard_normal((3, side, side, side)).astype(np.float32),
        cl_labels=cl_arr,
        tissue_labels=tissue,
        wml_labels=np.zeros((side,) * 3, np.uint8),
    )


def _lesion_at(side, voxels, cls=1):
    cl = np.zeros((side,) * 3, np.uint8)
    for v in voxels:
        cl[v] = cls
    return cl


# --- lesion index --------------------------------------------------------------


def test_lesion_index_matches_flood_fill():
    r = np.random.default_rng(5)
    cl = np.zeros((16, 16, 16), np.uint8)
    mask = r.random(cl.shape) < 0.1
    cl[mask] = r.choice([1, 2], size=int(mask.sum()))
    idx = build_lesion_index([_subject(cl=cl, side=16)])
    oracle = flood_fill_components(cl)
    assert len(idx.per_subject[0]) == len(oracle)
    for comp, (cls, voxels) in zip(idx.per_subject[0], oracle):
        assert comp.cl_class == cls
        assert set(map(tuple, comp.voxels)) == voxels


def test_empty_subject_still_sampled_for_background():
    subj = _subject()
    idx = build_lesion_index([subj])
    assert idx.n_lesions == 0
    sampler = PatchSampler(SamplerConfig(lesion_fraction=0.0, seed=1), 44, [subj])
    p = sampler.draw(0)
    assert p.input.shape == (3, 44, 44, 44)
    with pytest.raises(ValueError, match="no lesions"):
        PatchSampler(SamplerConfig(lesion_fraction=0.5, seed=1), 44, [subj])


def test_face_touching_blobs_merge():
    cl = _lesion_at(16, [(5, 5, 5), (5, 5, 6)])
    idx = build_lesion_index([_subject(cl=cl, side=16)])
    assert idx.n_lesions == 1


# --- center selection -----------------------------------------------------------


def test_lesion_fraction_one_centers_near_lesion():
    target = (10, 12, 14)
    subj = _subject(cl=_lesion_at(32, [target]))
    cfg = SamplerConfig(lesion_fraction=1.0, jitter_voxels=8, seed=3)
    sampler = PatchSampler(cfg, 44, [subj])
    for i in range(50):
        _, center, pick = sampler.choose_center(draw_rng(cfg.seed, 0, i))
        assert pick is not None
        assert np.abs(center - np.array(target)).max() <= 8


def test_size_unbiased_lesion_choice():
    # one 6-voxel and one 600-voxel lesion: equal pick probability
    cl = np.zeros((32, 32, 32), np.uint8)
    cl[2, 2, 2:8] = 1
    cl[16:26, 16:26, 16:22] = 2
    assert (cl == 2).sum() == 600
    subj = _subject(cl=cl)
    cfg = SamplerConfig(lesion_fraction=1.0, seed=5)
    sampler = PatchSampler(cfg, 44, [subj])
    assert sampler.index.n_lesions == 2
    picks = np.array([sampler.choose_center(draw_rng(cfg.seed, 0, i))[2]
                      for i in range(10_000)])
    frac_small = float((picks == 0).mean())
    assert abs(frac_small - 0.5) <= 0.03
    chi = stats.chisquare([int((picks == 0).sum()), int((picks == 1).sum())])
    assert chi.pvalue > 0.01


def test_pick_uniformity_chi_square_many_lesions():
    r = np.random.default_rng(9)
    cl = np.zeros((32, 32, 32), np.uint8)
    centers = [(4 + 6 * i % 24, 4 + (7 * i) % 24, 4 + (11 * i) % 24) for i in range(10)]
    for j, c in enumerate(centers):
        size = int(r.integers(1, 30))
        z, y, x = c
        cl[z, y, x:min(32, x + size)] = 1 + (j % 2)
    subj = _subject(cl=cl)
    sampler = PatchSampler(SamplerConfig(lesion_fraction=1.0, seed=6), 44, [subj])
    n = sampler.index.n_lesions
    picks = np.array([sampler.choose_center(draw_rng(6, 0, i))[2] for i in range(10_000)])
    counts = np.bincount(picks, minlength=n)
    assert stats.chisquare(counts).pvalue > 0.01


def test_background_centers_inside_brain_mask():
    subj = _subject()
    sampler = PatchSampler(SamplerConfig(lesion_fraction=0.0, seed=2), 44, [subj])
    for i in range(30):
        si, center, pick = sampler.choose_center(draw_rng(2, 0, i))
        assert pick is None
        assert subj.tissue_labels[tuple(center)] != 0


# --- patch geometry --------------------------------------------------------------


def test_label_crop_is_window_center():
    subj = _subject(cl=_lesion_at(64, [(32, 30, 34)]), side=64, seed=4)
    cfg = SamplerConfig(lesion_fraction=1.0, jitter_voxels=0, rotation_max_deg=0.0,
                        flip_probability=0.0, icd_probability=0.0, seed=7)
    sampler = PatchSampler(cfg, 44, [subj])
    p = sampler.draw(0)
    c = p.provenance["center"]
    # interior center: crops are plain numpy windows
    lo = [c[a] - 2 for a in range(3)]
    want = subj.cl_labels[lo[0]:lo[0] + 4, lo[1]:lo[1] + 4, lo[2]:lo[2] + 4]
    assert np.array_equal(p.cl_labels, want)
    lo_in = [c[a] - 22 for a in range(3)]
    for ch in range(3):
        want_in = subj.contrasts[ch][lo_in[0]:lo_in[0] + 44,
                                     lo_in[1]:lo_in[1] + 44,
                                     lo_in[2]:lo_in[2] + 44]
        assert np.array_equal(p.input[ch], want_in)


def test_zero_angles_no_flips_is_identity():
    subj = _subject(cl=_lesion_at(32, [(16, 16, 16)]))
    cfg = SamplerConfig(lesion_fraction=1.0, jitter_voxels=0, rotation_max_deg=0.0,
                        flip_probability=0.0, icd_probability=0.0, seed=8)
    sampler = PatchSampler(cfg, 44, [subj])
    rng = draw_rng(8, 0, 0)
    raw = sampler.sample_patch(rng)
    before = raw.input.copy()
    out = sampler.augment_rotate_flip(raw, rng)
    assert np.array_equal(out.input, before)
    assert out.provenance["angles_deg"] == [0.0, 0.0, 0.0]
    assert out.provenance["flips"] == [False, False, False]


def test_180_rotation_equals_double_flip():
    subj = _subject(seed=11)
    from clseg.sampling import _extract, _rotate_window
    center = np.array([16, 16, 16])
    for axis, flips in [(0, (1, 2)), (1, (0, 2)), (2, (0, 1))]:
        angles = [0.0, 0.0, 0.0]
        angles[axis] = 180.0
        got = _rotate_window(subj.contrasts[0], center, angles, 12, order=1)
        want = _extract(subj.contrasts[0], center, 12)
        for f in flips:
            want = np.flip(want, axis=f)
        assert np.array_equal(got, want), axis


def test_rotation_preserves_label_codes():
    r = np.random.default_rng(13)
    cl = np.zeros((32, 32, 32), np.uint8)
    cl[10:20, 10:20, 10:20] = r.choice([0, 1, 2], (10, 10, 10))
    subj = _subject(cl=cl)
    cfg = SamplerConfig(lesion_fraction=1.0, rotation_max_deg=180.0,
                        flip_probability=0.5, icd_probability=0.0, seed=12)
    sampler = PatchSampler(cfg, 44, [subj])
    for i in range(10):
        p = sampler.draw(i)
        assert set(np.unique(p.cl_labels)) <= {0, 1, 2}
        assert set(np.unique(p.tissue_labels)) <= {0, 1, 2}
        assert set(np.unique(p.wml_labels)) <= {0, 1}
        assert p.input.dtype == np.float32


def test_flips_preserve_lesion_voxel_count():
    subj = _subject(cl=_lesion_at(32, [(16, 16, 16), (16, 16, 17), (16, 17, 16)]))
    cfg = SamplerConfig(lesion_fraction=1.0, jitter_voxels=0, rotation_max_deg=0.0,
                        flip_probability=1.0, icd_probability=0.0, seed=14)
    sampler = PatchSampler(cfg, 44, [subj])
    rng = draw_rng(14, 0, 0)
    raw = sampler.sample_patch(rng)
    count_before = int((raw.cl_labels != 0).sum())
    out = sampler.augment_rotate_flip(raw, rng)
    assert out.provenance["flips"] == [True, True, True]
    assert int((out.cl_labels != 0).sum()) == count_before


# --- input channel dropout --------------------------------------------------------


def test_icd_probability_zero_is_identity():
    for i in range(200):
        assert choose_icd(draw_rng(0, 0, i), 0.0) is None


def test_icd_statistics_at_probability_one():
    counts = {"t2s_epi": 0, "t2s_gre": 0}
    for i in range(10_000):
        ch = choose_icd(draw_rng(1, 0, i), 1.0)
        assert ch in counts  # never None, never mp2rage
        counts[ch] += 1
    assert counts["t2s_epi"] + counts["t2s_gre"] == 10_000
    assert abs(counts["t2s_epi"] - 5000) <= 150
    assert abs(counts["t2s_gre"] - 5000) <= 150


def test_icd_zeroes_exactly_one_channel():
    subj = _subject(cl=_lesion_at(32, [(16, 16, 16)]))
    cfg = SamplerConfig(lesion_fraction=1.0, rotation_max_deg=0.0,
                        flip_probability=0.0, icd_probability=1.0, seed=15)
    sampler = PatchSampler(cfg, 44, [subj])
    rng = draw_rng(15, 0, 0)
    raw = sampler.sample_patch(rng)
    before = raw.input.copy()
    out = sampler.augment_rotate_flip(raw, rng)
    out = sampler.input_channel_dropout(out, rng)
    dropped = out.provenance["dropped_channel"]
    assert dropped in ("t2s_epi", "t2s_gre")
    di = {"t2s_epi": 1, "t2s_gre": 2}[dropped]
    assert not out.input[di].any()
    for ch in range(3):
        if ch != di:
            assert np.array_equal(out.input[ch], before[ch])


# --- stream reproducibility --------------------------------------------------------


def test_fixed_seed_stream_is_bit_reproducible():
    subj = _subject(cl=_lesion_at(32, [(16, 16, 16)]), seed=21)
    cfg = SamplerConfig(seed=99)
    s1 = PatchSampler(cfg, 44, [subj])
    s2 = PatchSampler(cfg, 44, [subj])
    for i in (0, 1, 5):
        a = s1.draw(i)
        b = s2.draw(i)
        assert np.array_equal(a.input, b.input)
        assert np.array_equal(a.cl_labels, b.cl_labels)
        assert a.provenance == b.provenance
    # worker id participates in the stream identity
    c = s1.draw(0, worker_id=1)
    assert not np.array_equal(c.input, s1.draw(0, worker_id=0).input)
