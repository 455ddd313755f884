import math

import numpy as np
import pytest

from lesionprior.prior import (
    DEFAULT_PERCENTILES,
    ThresholdTriple,
    accumulate_heatmaps,
    build_voi,
    compute_thresholds,
    label_distribution,
    split_lesion_mask,
    split_voi_channels,
    write_distribution_csv,
)
from lesionprior.volume import EmptySupportError, GeometryError, LabelVolume


def lab(data, **kw):
    return LabelVolume(np.asarray(data, dtype=np.int32), **kw)


# --- independent oracles -----------------------------------------------------

def percentile_oracle(values, p):
    """Nearest-rank percentile from an explicit sorted list."""
    v = sorted(x for x in values if x > 0)
    return v[max(math.ceil(p / 100 * len(v)), 1) - 1]


def voi_oracle(h_ed, h_ncr, h_et, percentiles=DEFAULT_PERCENTILES):
    """Per-voxel nested-if transcription of the label cascade."""
    a, b, c = percentiles
    t = {}
    for name, h in (("ed", h_ed), ("ncr", h_ncr), ("et", h_et)):
        nz = h[h > 0]
        if nz.size == 0:
            t[name] = (np.inf, np.inf, np.inf)
        else:
            t[name] = tuple(percentile_oracle(nz, p) for p in (a, b, c))
    out = np.zeros(h_ed.shape, dtype=np.uint8)
    for i in range(h_ed.shape[0]):
        for j in range(h_ed.shape[1]):
            for k in range(h_ed.shape[2]):
                if h_et[i, j, k] >= t["et"][2]:
                    out[i, j, k] = 9
                elif h_ncr[i, j, k] >= t["ncr"][2]:
                    out[i, j, k] = 8
                elif h_ed[i, j, k] >= t["ed"][2]:
                    out[i, j, k] = 7
                elif h_et[i, j, k] >= t["et"][1]:
                    out[i, j, k] = 6
                elif h_ncr[i, j, k] >= t["ncr"][1]:
                    out[i, j, k] = 5
                elif h_ed[i, j, k] >= t["ed"][1]:
                    out[i, j, k] = 4
                elif h_et[i, j, k] >= t["et"][0]:
                    out[i, j, k] = 3
                elif h_ncr[i, j, k] >= t["ncr"][0]:
                    out[i, j, k] = 2
                elif h_ed[i, j, k] >= t["ed"][0]:
                    out[i, j, k] = 1
    return out


def random_heatmap_triple(rng, shape=(8, 8, 8)):
    """Random triple including sparse, constant, and empty variants."""
    style = rng.integers(0, 4)
    maps = []
    for _ in range(3):
        if style == 0:
            h = rng.integers(0, 20, size=shape)
        elif style == 1:  # sparse
            h = np.where(rng.random(shape) < 0.05,
                         rng.integers(1, 30, size=shape), 0)
        elif style == 2:  # constant plateau
            h = np.where(rng.random(shape) < 0.5, int(rng.integers(1, 9)), 0)
        else:  # one lesion type may be absent entirely
            h = (rng.integers(0, 10, size=shape)
                 if rng.random() < 0.7 else np.zeros(shape, int))
        maps.append(h.astype(np.int32))
    return maps


class TestSplitLesionMask:
    def test_per_label_indicators(self):
        gt = lab([[[0, 1, 2, 4]]], alphabet={0, 1, 2, 4})
        ed, ncr, et = split_lesion_mask(gt)
        assert ed.data.ravel().tolist() == [0, 0, 1, 0]
        assert ncr.data.ravel().tolist() == [0, 1, 0, 0]
        assert et.data.ravel().tolist() == [0, 0, 0, 1]

    def test_all_zero(self):
        gt = lab(np.zeros((2, 2, 2), int))
        for m in split_lesion_mask(gt):
            assert not m.data.any()

    def test_unexpected_label(self):
        with pytest.raises(ValueError, match="unexpected"):
            split_lesion_mask(lab([[[3]]]))

    def test_masks_partition_foreground(self, rng):
        gt = lab(rng.choice([0, 1, 2, 4], size=(6, 6, 6)))
        ed, ncr, et = split_lesion_mask(gt)
        total = ed.data + ncr.data + et.data
        assert total.max() <= 1  # pairwise disjoint
        assert np.array_equal(total > 0, gt.data > 0)


class TestAccumulate:
    def test_counts_overlap(self):
        a = lab([[[0, 1, 1]]])
        b = lab([[[0, 0, 1]]])
        zero = lab([[[0, 0, 0]]])
        h_ed, h_ncr, h_et = accumulate_heatmaps([(a, zero, zero), (b, zero, zero)])
        assert h_ed.data.ravel().tolist() == [0, 1, 2]
        assert not h_ncr.data.any() and not h_et.data.any()

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            accumulate_heatmaps([])

    def test_n_identical_masks(self, rng):
        m = lab((rng.random((4, 4, 4)) < 0.3).astype(np.int32))
        z = lab(np.zeros((4, 4, 4), np.int32))
        h_ed, _, _ = accumulate_heatmaps([(m, z, z)] * 5)
        assert np.array_equal(h_ed.data, 5 * m.data)

    def test_shape_mismatch(self):
        a = lab(np.zeros((2, 2, 2), int))
        b = lab(np.zeros((3, 2, 2), int))
        with pytest.raises(GeometryError):
            accumulate_heatmaps([(a, a, a), (b, b, b)])


class TestThresholds:
    def test_one_to_ten(self):
        h = lab(np.arange(1, 11).reshape(1, 2, 5))
        assert compute_thresholds(h) == ThresholdTriple(5, 7, 8)

    def test_constant(self):
        h = lab(np.full((3, 3, 3), 4))
        assert compute_thresholds(h) == ThresholdTriple(4, 4, 4)

    def test_all_max(self):
        h = lab(np.arange(27).reshape(3, 3, 3))
        t = compute_thresholds(h, (100, 100, 100))
        assert t == ThresholdTriple(26, 26, 26)

    def test_empty_heatmap(self):
        with pytest.raises(EmptySupportError, match="empty heatmap"):
            compute_thresholds(lab(np.zeros((2, 2, 2), int)))

    def test_invalid_percentiles(self):
        h = lab(np.ones((2, 2, 2), int))
        with pytest.raises(ValueError):
            compute_thresholds(h, (80, 65, 50))

    def test_monotone_triple(self, rng):
        for _ in range(20):
            h = lab(rng.integers(0, 40, size=(5, 5, 5)))
            if not (h.data > 0).any():
                continue
            t = compute_thresholds(h)
            assert t.h1 <= t.h2 <= t.h3


class TestBuildVoi:
    def test_hand_traced_cascade(self):
        h_et = lab([[[0, 0, 0, 10]]])
        h_ncr = lab([[[0, 0, 10, 0]]])
        h_ed = lab([[[0, 10, 0, 0]]])
        voi = build_voi(h_ed, h_ncr, h_et)
        assert voi.data.ravel().tolist() == [0, 7, 8, 9]

    def test_zero_everywhere_gets_zero(self, rng):
        h = [lab(rng.integers(0, 5, size=(4, 4, 4))) for _ in range(3)]
        for m in h:
            m.data[0, 0, 0] = 0
        voi = build_voi(*h, skip_empty=True)
        assert voi.data[0, 0, 0] == 0

    def test_matches_oracle_on_random_instances(self, rng):
        for _ in range(60):
            h_ed, h_ncr, h_et = random_heatmap_triple(rng)
            expected = voi_oracle(h_ed, h_ncr, h_et)
            voi = build_voi(lab(h_ed), lab(h_ncr), lab(h_et), skip_empty=True)
            assert np.array_equal(voi.data, expected)

    def test_empty_support_raises_without_flag(self):
        z = lab(np.zeros((2, 2, 2), int))
        one = lab(np.ones((2, 2, 2), int))
        with pytest.raises(EmptySupportError):
            build_voi(z, one, one)
        # constant ET heatmap: every voxel reaches the top ET band
        voi = build_voi(z, one, one, skip_empty=True)
        assert set(np.unique(voi.data)) == {9}
        # with ET empty too, the NCR cascade takes over
        voi = build_voi(z, one, z, skip_empty=True)
        assert set(np.unique(voi.data)) == {8}

    def test_priority_dominance(self, rng):
        h_ed, h_ncr, h_et = (lab(rng.integers(0, 20, size=(6, 6, 6)))
                             for _ in range(3))
        voi = build_voi(h_ed, h_ncr, h_et, skip_empty=True)
        t_et = compute_thresholds(h_et)
        assert np.all(voi.data[h_et.data >= t_et.h3] == 9)

    def test_scaling_invariance(self, rng):
        h = random_heatmap_triple(rng)
        v1 = build_voi(*(lab(x) for x in h), skip_empty=True)
        v2 = build_voi(*(lab(3 * x) for x in h), skip_empty=True)
        assert np.array_equal(v1.data, v2.data)

    def test_band_containment(self, rng):
        for _ in range(20):
            h_ed, h_ncr, h_et = random_heatmap_triple(rng)
            voi = build_voi(lab(h_ed), lab(h_ncr), lab(h_et), skip_empty=True).data
            t = {}
            for name, h in (("ed", h_ed), ("ncr", h_ncr), ("et", h_et)):
                nz = h[h > 0]
                t[name] = ((np.inf,) * 3 if nz.size == 0 else
                           tuple(percentile_oracle(nz, p)
                                 for p in DEFAULT_PERCENTILES))
            sel = voi == 6
            assert np.all(h_et[sel] >= t["et"][1])
            assert np.all(h_et[sel] < t["et"][2])
            assert np.all(h_ncr[sel] < t["ncr"][2])
            assert np.all(h_ed[sel] < t["ed"][2])
            sel = voi == 3
            assert np.all(h_et[sel] >= t["et"][0])
            assert np.all(h_et[sel] < t["et"][1])


class TestSplitVoiChannels:
    def test_indicators(self):
        voi = lab([[[0, 7, 8, 9]]], alphabet=set(range(10)))
        chans = split_voi_channels(voi)
        assert len(chans) == 9
        assert chans[6].data.ravel().tolist() == [0, 1, 0, 0]  # label 7
        assert chans[7].data.ravel().tolist() == [0, 0, 1, 0]  # label 8
        assert chans[8].data.ravel().tolist() == [0, 0, 0, 1]  # label 9
        for c in chans[:6]:
            assert not c.data.any()

    def test_all_zero(self):
        chans = split_voi_channels(lab(np.zeros((2, 2, 2), int)))
        assert all(not c.data.any() for c in chans)

    def test_channel_sum_is_foreground(self, rng):
        voi = lab(rng.integers(0, 10, size=(5, 5, 5)))
        chans = split_voi_channels(voi)
        total = sum(c.data for c in chans)
        assert np.array_equal(total, (voi.data != 0).astype(total.dtype))

    def test_foreign_label(self):
        with pytest.raises(ValueError):
            split_voi_channels(lab([[[12]]]))


class TestLabelDistribution:
    def test_all_zero(self):
        z = lab(np.zeros((2, 2, 2), int))
        table, voxels = label_distribution(z, z, z, z, n_subjects=3)
        assert table[0].tolist() == [0, 0, 0]
        assert voxels[0] == 8
        assert np.all(np.isnan(table[1:]))

    def test_single_voxel_full_probability(self):
        voi = lab([[[9, 0]]])
        h_et = lab([[[6, 0]]])
        z = lab([[[0, 0]]])
        table, voxels = label_distribution(voi, z, z, h_et, n_subjects=6)
        assert table[9, 2] == pytest.approx(1.0)
        assert voxels[9] == 1

    def test_matches_two_pass_oracle(self, rng):
        voi = lab(rng.integers(0, 10, size=(8, 8, 8)))
        maps = [lab(rng.integers(0, 7, size=(8, 8, 8))) for _ in range(3)]
        n = 6
        table, voxels = label_distribution(voi, *maps, n_subjects=n)
        for label in range(10):
            sel = voi.data == label
            count = sel.sum()
            assert voxels[label] == count
            for t in range(3):
                if count == 0:
                    assert np.isnan(table[label, t])
                else:
                    total = 0.0
                    for idx in np.argwhere(sel):
                        total += maps[t].data[tuple(idx)]
                    assert abs(table[label, t] - total / (n * count)) < 1e-12

    def test_csv_export(self, tmp_path, rng):
        voi = lab(rng.integers(0, 3, size=(4, 4, 4)))
        maps = [lab(rng.integers(0, 5, size=(4, 4, 4))) for _ in range(3)]
        table, voxels = label_distribution(voi, *maps, n_subjects=4)
        out = tmp_path / "dist.csv"
        write_distribution_csv(table, voxels, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "label,ed,ncr,et,voxels"
        assert len(lines) == 11
