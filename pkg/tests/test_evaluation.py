import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nlsfcnn.cnn import CnnModel
from nlsfcnn.evaluation import BenchReport, BenchRow, bench, patch_size_sweep, psnr, psnr_from_mse, switching_median
from nlsfcnn.image import from_uint8
from nlsfcnn.noise import NoiseSpec, detect, inject

bytes_img = arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 255))


def mse_oracle(a, b):
    flat = [(int(x) - int(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())]
    return sum(flat) / len(flat)


def test_psnr_oracles():
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))).psnr_db == 0.0
    m = psnr(np.full((3, 3), 0.5), np.full((3, 3), 0.5))
    assert m.mse == 0 and m.is_infinite and math.isinf(m.psnr_db)
    assert psnr_from_mse(1.0).psnr_db == pytest.approx(20 * math.log10(255), abs=1e-12)
    assert psnr_from_mse(1.0).psnr_db == pytest.approx(48.1308, abs=1e-3)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        psnr_from_mse(-1.0)


def test_psnr_quantizes_before_comparing():
    a = np.full((2, 2), 100 / 255)
    assert psnr(a, a + 0.4 / 255).is_infinite
    assert psnr(a, a + 0.6 / 255).mse == 1.0


@given(bytes_img, st.data())
def test_psnr_matches_loop_oracle_and_is_symmetric(a, data):
    b = data.draw(arrays(np.int64, a.shape, elements=st.integers(0, 255)))
    fa, fb = from_uint8(a), from_uint8(b)
    m = psnr(fa, fb)
    assert m.mse == pytest.approx(mse_oracle(a, b), rel=1e-12)
    assert m.psnr_db == psnr(fb, fa).psnr_db


@given(bytes_img, st.data(), st.integers(0, 100))
def test_psnr_offset_invariant(a, data, k):
    b = data.draw(arrays(np.int64, a.shape, elements=st.integers(0, 255)))
    a, b = a % 150, b % 150
    assert psnr(from_uint8(a), from_uint8(b)).psnr_db == psnr(from_uint8(a + k), from_uint8(b + k)).psnr_db


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32))
def test_psnr_decreases_with_density(seed):
    clean = from_uint8(np.random.default_rng(seed).integers(20, 236, (64, 64)))
    scores = [psnr(clean, inject(clean, NoiseSpec(d, seed=seed))).psnr_db for d in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_switching_median_keeps_clean_pixels(rng):
    img = from_uint8(rng.integers(1, 255, (30, 30)))
    noisy = inject(img, NoiseSpec(0.4, seed=1))
    mask = detect(noisy)
    out = switching_median(noisy, mask)
    np.testing.assert_array_equal(out[~mask], noisy[~mask])
    assert psnr(img, out).psnr_db > psnr(img, noisy).psnr_db


def small_testset(lena, camera):
    return {"lena": lena[:96, :96], "camera": camera[:80, :112]}


def test_bench_rows_and_averages(lena, camera):
    report = bench(small_testset(lena, camera), [0.3, 0.5], ["noisy", "median", "nlsf"], seed=3)
    assert len(report.rows) == 2 * 2 * 3
    for (d, m), v in report.aggregates().items():
        vals = [r.psnr_db for r in report.rows if r.density == d and r.method == m]
        assert v == sum(vals) / len(vals)
    for img in ("lena", "camera"):
        for d in (0.3, 0.5):
            row = {r.method: r.psnr_db for r in report.rows if r.image == img and r.density == d}
            assert row["nlsf"] > row["noisy"]


def test_bench_zero_density_is_infinite(lena, camera):
    model = CnnModel.identity(0)
    report = bench(small_testset(lena, camera), [0.0], ["noisy", "median", "nlsf", "nlsf-cnn"],
                   models={0.0: model})
    assert all(math.isinf(r.psnr_db) for r in report.rows)


def test_bench_rerun_is_byte_identical(lena, camera):
    ts = small_testset(lena, camera)
    model = CnnModel.identity(0, std=0.01)
    a = bench(ts, [0.5], ["nlsf", "nlsf-cnn"], seed=5, models={0.5: model}, threads=1).to_csv()
    b = bench(ts, [0.5], ["nlsf", "nlsf-cnn"], seed=5, models={0.5: model}, threads=8).to_csv()
    assert a == b


def test_bench_adding_an_image_keeps_rows(lena, camera):
    ts = small_testset(lena, camera)
    one = bench({"lena": ts["lena"]}, [0.5], ["nlsf"], seed=2)
    two = bench(ts, [0.5], ["nlsf"], seed=2)
    assert one.rows[0].psnr_db == next(r.psnr_db for r in two.rows if r.image == "lena")


def test_bench_errors(tmp_path, lena):
    with pytest.raises(ValueError, match="no test images"):
        bench(tmp_path, [0.5])
    with pytest.raises(ValueError, match="no nlsf-cnn model"):
        bench({"x": lena[:70, :70]}, [0.5], ["nlsf-cnn"])
    with pytest.raises(ValueError, match="unknown method"):
        bench({"x": lena[:70, :70]}, [0.5], ["bm3d"])


def test_bench_reads_a_directory(data_dir):
    report = bench(data_dir, [0.3], ["noisy"], seed=1)
    assert {r.image for r in report.rows} == {"lena", "camera", "ascent"}


def test_report_formats():
    report = BenchReport([BenchRow("b", 0.5, "nlsf", 30.0, 1.5), BenchRow("a", 0.5, "nlsf", 32.0, 1.0),
                          BenchRow("a", 0.5, "noisy", math.inf, 0.0)])
    csv_text = report.to_csv()
    assert csv_text.splitlines() == [
        "image,density,method,psnr_db", "a,0.5,nlsf,32.0000", "a,0.5,noisy,inf", "b,0.5,nlsf,30.0000",
        "AVERAGE,0.5,nlsf,31.0000", "AVERAGE,0.5,noisy,inf",
    ]
    assert "seconds" in report.to_csv(timings=True)
    table = report.to_table()
    assert "Average" in table and "31.00" in table


def test_sweep_shape(lena):
    report = patch_size_sweep(lena[:64, :64], sizes=[3], densities=[0.5], seed=1, name="lena")
    assert len(report.rows) == 1 and report.rows[0].method == "nlsf-L3"
    full = patch_size_sweep(lena[:64, :64], sizes=[3, 5], densities=[0.1, 0.5], seed=1)
    assert len(full.rows) == 4
