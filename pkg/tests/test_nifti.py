import gzip

import numpy as np
import pytest

from lesionprior.nifti import NiftiError, _HEADER_DTYPE, read_nifti, write_nifti
from lesionprior.volume import LabelVolume, ScalarVolume


def make_affine():
    aff = np.diag((1.0, 1.25, 2.0, 1.0))
    aff[:3, 3] = (-4.0, 8.5, 3.0)
    return aff


class TestRoundTrip:
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_float32_scalar(self, tmp_path, rng, suffix):
        data = rng.normal(size=(4, 5, 6)).astype(np.float32)
        vol = ScalarVolume(data, spacing=(1.0, 1.25, 2.0), affine=make_affine())
        path = tmp_path / f"vol{suffix}"
        write_nifti(vol, path)
        back = read_nifti(path)
        assert isinstance(back, ScalarVolume)
        assert np.array_equal(back.data, data)
        assert back.spacing == vol.spacing
        assert np.abs(back.affine - vol.affine).max() < 1e-6

    def test_float64_preserved(self, tmp_path, rng):
        data = rng.normal(size=(3, 3, 3))
        vol = ScalarVolume(data)
        path = tmp_path / "vol.nii"
        write_nifti(vol, path, dtype=np.float64)
        back = read_nifti(path)
        assert back.data.dtype == np.float64
        assert np.array_equal(back.data, data)

    def test_uint8_labels_bit_exact(self, tmp_path, rng):
        data = rng.integers(0, 10, size=(5, 4, 3)).astype(np.uint8)
        vol = LabelVolume(data, spacing=(2, 2, 2))
        path = tmp_path / "labels.nii.gz"
        write_nifti(vol, path)
        back = read_nifti(path)
        assert isinstance(back, LabelVolume)
        assert back.data.dtype == np.uint8
        assert np.array_equal(back.data, data)

    def test_int32_counts_round_trip(self, tmp_path):
        data = np.arange(60, dtype=np.int32).reshape(3, 4, 5) * 100
        vol = LabelVolume(data)
        path = tmp_path / "counts.nii.gz"
        write_nifti(vol, path, dtype=np.int32)
        back = read_nifti(path, kind="label")
        assert back.data.dtype == np.int32
        assert np.array_equal(back.data, data)

    def test_int16_scalar(self, tmp_path, rng):
        data = rng.integers(-500, 3000, size=(4, 4, 4)).astype(np.int16)
        vol = ScalarVolume(data.astype(np.float32))
        path = tmp_path / "t1.nii"
        write_nifti(vol, path, dtype=np.int16)
        back = read_nifti(path)
        assert isinstance(back, ScalarVolume)
        assert np.array_equal(back.data, data.astype(np.float32))

    def test_brats_shape_and_spacing(self, tmp_path):
        vol = ScalarVolume(np.zeros((240, 240, 155), np.float32))
        path = tmp_path / "brats.nii.gz"
        write_nifti(vol, path)
        back = read_nifti(path)
        assert back.shape == (240, 240, 155)
        assert back.spacing == (1.0, 1.0, 1.0)


class TestHeaderHandling:
    def _raw_header(self, shape=(4, 4, 4), datatype=16):
        hdr = np.zeros((), dtype=_HEADER_DTYPE.newbyteorder("<"))
        hdr["sizeof_hdr"] = 348
        hdr["dim"] = (3, *shape, 1, 1, 1, 1)
        hdr["datatype"] = datatype
        hdr["bitpix"] = 32
        hdr["pixdim"] = (1, 1, 1, 1, 0, 0, 0, 0)
        hdr["vox_offset"] = 352
        hdr["magic"] = b"n+1"
        return hdr

    def _write(self, path, hdr, data):
        path.write_bytes(hdr.tobytes() + b"\x00" * 4 + data.tobytes(order="F"))

    def test_bad_magic(self, tmp_path):
        hdr = self._raw_header()
        hdr["magic"] = b"xxx"
        path = tmp_path / "bad.nii"
        self._write(path, hdr, np.zeros((4, 4, 4), "<f4"))
        with pytest.raises(NiftiError, match="magic"):
            read_nifti(path)

    def test_not_nifti(self, tmp_path):
        path = tmp_path / "junk.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(NiftiError):
            read_nifti(path)

    def test_4d_rejected(self, tmp_path):
        hdr = self._raw_header()
        hdr["dim"] = (4, 4, 4, 4, 2, 1, 1, 1)
        path = tmp_path / "4d.nii"
        self._write(path, hdr, np.zeros((4, 4, 4, 2), "<f4"))
        with pytest.raises(NiftiError, match="3-D"):
            read_nifti(path)

    def test_unsupported_datatype(self, tmp_path):
        hdr = self._raw_header(datatype=256)  # int8, unsupported
        path = tmp_path / "odd.nii"
        self._write(path, hdr, np.zeros((4, 4, 4), "<i1"))
        with pytest.raises(NiftiError, match="datatype"):
            read_nifti(path)

    def test_truncated_data(self, tmp_path):
        hdr = self._raw_header()
        path = tmp_path / "trunc.nii"
        path.write_bytes(hdr.tobytes() + b"\x00" * 16)
        with pytest.raises(NiftiError, match="truncated"):
            read_nifti(path)

    def test_scl_slope_applied(self, tmp_path):
        hdr = self._raw_header(datatype=4)
        hdr["bitpix"] = 16
        hdr["scl_slope"] = 2.0
        hdr["scl_inter"] = 10.0
        data = np.arange(64, dtype="<i2").reshape(4, 4, 4)
        path = tmp_path / "scaled.nii"
        self._write(path, hdr, data)
        vol = read_nifti(path)
        assert isinstance(vol, ScalarVolume)
        assert np.allclose(vol.data, data.astype(np.float32) * 2 + 10)

    def test_qform_fallback(self, tmp_path):
        # no sform; quaternion (a=w, d=sin 45) rotates 90 degrees about z
        hdr = self._raw_header()
        hdr["qform_code"] = 1
        hdr["quatern_d"] = np.sqrt(0.5)
        hdr["qoffset_x"] = 3.0
        path = tmp_path / "qform.nii"
        self._write(path, hdr, np.zeros((4, 4, 4), "<f4"))
        vol = read_nifti(path)
        expected = np.array([
            [0.0, -1.0, 0.0, 3.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        assert np.abs(vol.affine - expected).max() < 1e-6

    def test_diag_spacing_fallback(self, tmp_path):
        hdr = self._raw_header()
        hdr["pixdim"] = (1, 2, 3, 4, 0, 0, 0, 0)
        path = tmp_path / "plain.nii"
        self._write(path, hdr, np.zeros((4, 4, 4), "<f4"))
        vol = read_nifti(path)
        assert np.allclose(vol.affine, np.diag((2, 3, 4, 1)))

    def test_big_endian_read(self, tmp_path):
        hdr = np.zeros((), dtype=_HEADER_DTYPE.newbyteorder(">"))
        hdr["sizeof_hdr"] = 348
        hdr["dim"] = (3, 2, 2, 2, 1, 1, 1, 1)
        hdr["datatype"] = 16
        hdr["bitpix"] = 32
        hdr["pixdim"] = (1, 1, 1, 1, 0, 0, 0, 0)
        hdr["vox_offset"] = 352
        hdr["magic"] = b"n+1"
        data = np.arange(8, dtype=">f4").reshape(2, 2, 2)
        path = tmp_path / "be.nii"
        path.write_bytes(hdr.tobytes() + b"\x00" * 4 + data.tobytes(order="F"))
        vol = read_nifti(path)
        assert np.array_equal(vol.data, data.astype(np.float32))

    def test_gzip_detected_by_suffix(self, tmp_path, rng):
        vol = ScalarVolume(rng.normal(size=(3, 3, 3)).astype(np.float32))
        path = tmp_path / "z.nii.gz"
        write_nifti(vol, path)
        with gzip.open(path, "rb") as fh:
            assert fh.read(4)  # really gzip-compressed

    def test_label_overflow_rejected(self, tmp_path):
        vol = LabelVolume(np.full((2, 2, 2), 300, np.int32))
        with pytest.raises(NiftiError, match="fit"):
            write_nifti(vol, tmp_path / "big.nii")

    def test_kind_label_on_scaled_file_rejected(self, tmp_path):
        hdr = self._raw_header(datatype=2)
        hdr["bitpix"] = 8
        hdr["scl_slope"] = 3.0
        path = tmp_path / "scaledlabel.nii"
        self._write(path, hdr, np.zeros((4, 4, 4), "u1"))
        with pytest.raises(NiftiError, match="scl_slope"):
            read_nifti(path, kind="label")
