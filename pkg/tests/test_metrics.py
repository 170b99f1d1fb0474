import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsrdiff.metrics import (MetricReport, band_mse, ergas, evaluate, gaussian_window, mean_report, psnr, sam,
                             ssim, ssim_band)


@pytest.fixture
def ref(nprng):
    return 0.2 + 0.6 * nprng.random((3, 16, 14))


def ssim_loops(a, b):
    """Every fully contained 11x11 window, weighted statistics summed explicitly."""
    g = gaussian_window()
    w = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestClosedForms:
    def test_identical(self, ref):
        rep = evaluate(ref, ref, 4)
        assert (rep.psnr_db, rep.ssim, rep.sam_deg, rep.ergas) == (99.0, 1.0, 0.0, 0.0)

    def test_constant_offset(self, ref):
        est = ref + 0.1
        assert psnr(ref, est) == pytest.approx(20.0, abs=1e-9)
        mu = ref.mean(axis=(1, 2))
        assert ergas(ref, est, 4) == pytest.approx(25.0 * math.sqrt(np.mean(0.01 / mu ** 2)), rel=1e-10)

    def test_scaled_spectra_have_zero_angle(self, ref):
        assert sam(ref, 1.7 * ref) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_spectra(self):
        a = np.zeros((2, 4, 4))
        b = np.zeros((2, 4, 4))
        a[0], b[1] = 1.0, 1.0
        assert sam(a, b) == pytest.approx(90.0)

    def test_psnr_cap_per_band(self, ref):
        est = ref.copy()
        est[0] += 0.1
        assert psnr(ref, est) == pytest.approx((20.0 + 99.0 + 99.0) / 3)

    def test_tiny_error_is_capped(self, ref):
        assert psnr(ref, ref + 1e-8) == 99.0


class TestOracles:
    def test_ssim(self, ref, nprng):
        est = np.clip(ref + 0.05 * nprng.standard_normal(ref.shape), 0, 1)
        want = np.mean([ssim_loops(a, b) for a, b in zip(ref, est)])
        assert ssim(ref, est) == pytest.approx(want, abs=1e-12)

    def test_sam(self, ref, nprng):
        est = ref + 0.05 * nprng.standard_normal(ref.shape)
        angles = []
        for i in range(ref.shape[1]):
            for j in range(ref.shape[2]):
                u, v = ref[:, i, j], est[:, i, j]
                angles.append(math.degrees(math.acos(min(1.0, u @ v / (np.linalg.norm(u) * np.linalg.norm(v))))))
        assert sam(ref, est) == pytest.approx(np.mean(angles), abs=1e-10)

    def test_psnr_and_ergas(self, ref, nprng):
        est = ref + 0.03 * nprng.standard_normal(ref.shape)
        mse = [np.mean((ref[b] - est[b]) ** 2) for b in range(3)]
        assert psnr(ref, est) == pytest.approx(np.mean([10 * math.log10(1 / m) for m in mse]), abs=1e-10)
        rel = [m / ref[b].mean() ** 2 for b, m in enumerate(mse)]
        assert ergas(ref, est, 8) == pytest.approx(100 / 8 * math.sqrt(np.mean(rel)), rel=1e-12)
        np.testing.assert_allclose(band_mse(ref, est), mse, rtol=1e-12)

    def test_gaussian_window(self):
        g = gaussian_window()
        assert len(g) == 11 and g.sum() == pytest.approx(1.0)
        assert g[5] / g[6] == pytest.approx(math.exp(0.5 / 1.5 ** 2))


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((2, 12, 12)) + 0.1, r.random((2, 12, 12)) + 0.1
        assert psnr(a, b) == pytest.approx(psnr(b, a))
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert sam(a, b) == pytest.approx(sam(b, a))
        assert -1 <= ssim(a, b) <= 1

    def test_noise_ramp_is_monotone(self, ref, nprng):
        noise = nprng.standard_normal(ref.shape)
        reps = [evaluate(ref, ref + s * noise, 4) for s in (0.001, 0.01, 0.05, 0.2)]
        assert all(a.psnr_db > b.psnr_db for a, b in zip(reps, reps[1:]))
        assert all(a.ssim > b.ssim for a, b in zip(reps, reps[1:]))
        assert all(a.sam_deg < b.sam_deg for a, b in zip(reps, reps[1:]))
        assert all(a.ergas < b.ergas for a, b in zip(reps, reps[1:]))


class TestErrors:
    def test_shape_mismatch(self, ref):
        with pytest.raises(ValueError):
            psnr(ref, ref[:, :8])

    def test_needs_cubes(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 4)))

    def test_small_image_ssim(self):
        with pytest.raises(ValueError):
            ssim_band(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_zero_mean_band_ergas(self):
        with pytest.raises(ValueError):
            ergas(np.zeros((1, 4, 4)), np.ones((1, 4, 4)), 4)

    def test_all_zero_sam(self):
        with pytest.raises(ValueError):
            sam(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)))


def test_report_row_and_mean():
    a, b = MetricReport(30.0, 0.9, 2.0, 1.0), MetricReport(40.0, 1.0, 4.0, 3.0)
    assert a.row("x") == "x\t30.00\t0.9000\t2.00\t1.000"
    m = mean_report([a, b])
    assert (m.psnr_db, m.ssim, m.sam_deg, m.ergas) == (35.0, 0.95, 3.0, 2.0)
