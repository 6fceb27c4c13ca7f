import math

import numpy as np
import pytest
from scipy import stats

import oracles
from qnerf.eval import (
    MetricReport,
    ViewMetrics,
    evaluate_views,
    format_hsv_report,
    format_ks,
    format_table,
    hsv_compare,
    hsv_histograms,
    hsv_to_rgb,
    ks_two_sample,
    psnr,
    rgb_to_hsv,
    ssim,
    write_report_csv,
)


def _textured(h=36, w=64):
    yy, xx = np.mgrid[0:h, 0:w] / 8.0
    return np.stack([0.5 + 0.4 * np.sin(xx + yy), 0.5 + 0.4 * np.cos(2 * xx), 0.5 + 0.4 * np.sin(3 * yy)], -1)


def test_psnr_cases(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    b = np.zeros(10)
    c = np.full(10, math.sqrt(0.1))
    assert math.isclose(psnr(b, c), 10.0, rel_tol=1e-12)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_brute_force(rng):
    for _ in range(10):
        a, b = rng.uniform(0, 1, (2, 12, 20, 3))
        assert abs(psnr(a, b) - oracles.psnr_ref(a, b)) < 1e-9


def test_ssim_brute_force(rng):
    for _ in range(10):
        a = rng.uniform(0, 1, (16, 18, 3))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        assert abs(ssim(a, b) - oracles.ssim_loop(a, b)) < 1e-6


def test_ssim_matches_skimage(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = _textured()
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = metrics.structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=-1
    )
    assert abs(ssim(a, b) - ref) < 1e-6


def test_ssim_properties(rng):
    a = _textured()
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert math.isclose(ssim(a, a), 1.0, abs_tol=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert ssim(a, 1 - a) < 0.5
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_hsv_known_values():
    assert np.allclose(rgb_to_hsv([1.0, 0.0, 0.0]), [0, 255, 255])
    assert rgb_to_hsv([0.5, 0.5, 0.5])[1] == 0
    assert np.allclose(rgb_to_hsv([0.0, 1.0, 0.0]), [255 / 3, 255, 255])


def test_hsv_matches_matplotlib(rng):
    colors = pytest.importorskip("matplotlib.colors")
    rgb = rng.uniform(0, 1, (500, 3))
    rgb[:20] = rgb[:20, :1]  # some grays
    assert np.allclose(rgb_to_hsv(rgb), colors.rgb_to_hsv(rgb) * 255, atol=1e-9)


def test_hsv_round_trip(rng):
    rgb = rng.uniform(0, 1, (1000, 3))
    assert np.max(np.abs(hsv_to_rgb(rgb_to_hsv(rgb)) - rgb)) < 1e-6


def test_histograms_count_pixels(rng):
    img = rng.uniform(0, 1, (9, 7, 3))
    h = hsv_histograms(img)
    assert h.shape == (3, 256) and np.all(h.sum(1) == 63)


def test_ks_matches_scipy(rng):
    for n, m in ((200, 300), (1000, 1000), (50, 4000)):
        a, b = rng.normal(0, 1, n), rng.normal(0.2, 1.1, m)
        d, p = ks_two_sample(a, b)
        assert abs(d - stats.ks_2samp(a, b).statistic) < 1e-12
        # limiting distribution of sqrt(nm / (n + m)) * D
        assert abs(p - stats.kstwobign.sf(math.sqrt(n * m / (n + m)) * d)) < 1e-12


def test_ks_edge_cases(rng):
    a = rng.normal(size=50)
    assert ks_two_sample(a, a) == (0.0, 1.0)
    assert ks_two_sample(np.zeros(10), np.ones(12))[0] == 1.0
    b = rng.normal(size=70)
    assert ks_two_sample(a, b)[0] == ks_two_sample(b, a)[0]
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])


def test_report_format():
    a = _textured()
    stats_ = hsv_compare(a, np.clip(a * 0.6, 0, 1), "GT", "classical")
    line = format_ks(stats_, "H")
    import re

    assert re.fullmatch(r"GT vs\. classical \(KS = \d\.\d{4}, p (< 10\^-5|= \S+)\)", line)
    assert format_ks(stats_, "V").endswith("p < 10^-5)")
    report = format_hsv_report([stats_])
    assert report.splitlines()[0] == "Hue:" and "Value:" in report


def test_reports(tmp_path, rng):
    imgs = {i: rng.uniform(0, 1, (16, 16, 3)) for i in (3, 7)}
    preds = {i: np.clip(v + 0.05, 0, 1) for i, v in imgs.items()}
    rep = evaluate_views(preds, imgs, plugins={"l1": lambda p, g: np.abs(p - g).mean()}, external={"lpips": {3: 0.2, 7: 0.4}}, config="C1")
    assert [v.view for v in rep.views] == [3, 7]
    assert math.isclose(rep.mean("psnr"), np.mean([psnr(preds[i], imgs[i]) for i in (3, 7)]))
    assert math.isclose(rep.mean("lpips"), 0.3)
    write_report_csv(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "view,psnr,ssim,l1,lpips" and lines[-1].startswith("mean,") and len(lines) == 4
    table = format_table([rep, MetricReport([ViewMetrics(0, 20.0, 0.5)], "C2", "2L", "256", 1234)])
    assert table.split()[:6] == ["Config", "Layers", "Width", "Params", "PSNR", "SSIM"]
    assert "1,234" in table
