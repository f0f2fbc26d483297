import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidatlas.media import Frame
from vidatlas.metrics import (
    CacheSim,
    ScalingPoint,
    TokenModel,
    captioner_tokens,
    count_tokens,
    fit_scaling,
    write_scaling_csv,
)
from vidatlas.policy import PolicyRequest


def image(edge: int, fill: int = 50, extra=0) -> Frame:
    pixels = np.full((edge, edge, 3), fill, dtype=np.uint8)
    if extra:
        pixels[0, 0, 0] = extra
    return Frame(pixels, 0.0)


class TestTokenModel:
    def test_empty_request(self):
        assert count_tokens(PolicyRequest("probe", "")) == 0

    def test_single_320_frame(self):
        # ceil(320/28) = 12 -> 144 tokens
        assert count_tokens(PolicyRequest("probe", "", images=[image(320)])) == 144

    def test_full_grid_2560(self):
        # ceil(2560/28) = 92 -> 8464 tokens
        assert TokenModel().image_tokens(2560, 2560) == 8464

    def test_text_bytes_over_four(self):
        assert count_tokens(PolicyRequest("probe", "abcd" * 5)) == 5
        assert count_tokens(PolicyRequest("probe", "abcde")) == 2

    def test_deterministic(self):
        req = PolicyRequest("probe", "hello", images=[image(64)])
        assert count_tokens(req) == count_tokens(req)


class TestCacheSim:
    def test_identical_request_twice_fully_hits(self):
        sim = CacheSim()
        req = PolicyRequest("probe", "same text", images=[image(320)])
        hit1, miss1 = sim.cache_step(req)
        assert hit1 == 0
        total = count_tokens(req)
        assert miss1 == total
        hit2, miss2 = sim.cache_step(
            PolicyRequest("probe", "same text", images=[image(320)]))
        assert (hit2, miss2) == (total, 0)
        assert sim.hit_rate() == pytest.approx(0.5)

    def test_shared_image_prefix_hits_image_blocks(self):
        sim = CacheSim()
        img_tokens = TokenModel().image_tokens(320, 320)
        sim.cache_step(PolicyRequest("w", "first step text", images=[image(320)]))
        hit, miss = sim.cache_step(
            PolicyRequest("w", "different trailing text", images=[image(320)]))
        assert hit == img_tokens
        assert miss == TokenModel().text_tokens("different trailing text")

    def test_fresh_request_no_hits(self):
        sim = CacheSim()
        hit, _ = sim.cache_step(PolicyRequest("w", "x", images=[image(128, 9)]))
        assert hit == 0

    def test_divergence_breaks_the_chain(self):
        sim = CacheSim()
        sim.cache_step(PolicyRequest("w", "tail a", images=[image(320)]))
        # same trailing text but a different image prefix: no hits at all
        hit, _ = sim.cache_step(
            PolicyRequest("w", "tail a", images=[image(320, extra=200)]))
        assert hit == 0

    def test_three_steps_on_one_grid_reuse(self):
        # a worker re-examining one grid across non-navigation steps
        sim = CacheSim()
        img_tokens = TokenModel().image_tokens(640, 640)
        texts = ["step one", "step two differs", "step three differs more"]
        hits = 0
        total = 0
        for text in texts:
            h, m = sim.cache_step(PolicyRequest("w", text, images=[image(640)]))
            hits += h
            total += h + m
        assert hits == 2 * img_tokens
        assert hits / total >= 2 / 3 * (img_tokens / (img_tokens + 8))

    @given(st.lists(st.tuples(st.integers(32, 96), st.text(max_size=40)),
                    min_size=1, max_size=6))
    @settings(max_examples=40)
    def test_conservation(self, parts):
        sim = CacheSim()
        for edge, text in parts:
            req = PolicyRequest("w", text, images=[image(edge)])
            hit, miss = sim.cache_step(req)
            assert hit + miss == count_tokens(req)
        assert sim.hits <= sim.total

    def test_warm_pass_rate_at_least_cold(self):
        requests = [PolicyRequest("w", f"text {i}", images=[image(160, fill=i)])
                    for i in range(5)]
        sim = CacheSim()
        cold_hits = cold_total = 0
        for req in requests:
            h, m = sim.cache_step(req)
            cold_hits, cold_total = cold_hits + h, cold_total + h + m
        warm_hits = warm_total = 0
        for req in requests:
            h, m = sim.cache_step(req)
            warm_hits, warm_total = warm_hits + h, warm_total + h + m
        assert warm_hits / warm_total >= cold_hits / cold_total

    def test_hit_rate_requires_traffic(self):
        with pytest.raises(ValueError):
            CacheSim().hit_rate()

    def test_signature_cache_matches_fresh_hash(self):
        sim = CacheSim()
        frame = image(128)
        first = sim.request_blocks(PolicyRequest("w", "", images=[frame]))
        again = sim.request_blocks(PolicyRequest("w", "", images=[frame]))
        assert first == again
        bare = sim.request_blocks(PolicyRequest("w", "", images=[image(128)]))
        assert first == bare  # same bytes, fresh object, same blocks


class TestScalingFit:
    def test_exact_log_data(self):
        points = [ScalingPoint(d, 100 + 50 * math.log(d), 100 + 50 * math.log(d))
                  for d in (60, 600, 3600, 36000)]
        fit = fit_scaling(points)
        assert fit.r2_log == pytest.approx(1.0, abs=1e-9)
        assert fit.r2_log > fit.r2_linear
        assert fit.tokens_at(600) == pytest.approx(100 + 50 * math.log(600))

    def test_exact_linear_data(self):
        points = [ScalingPoint(d, 10 + 2 * d, 10 + 2 * d)
                  for d in (60, 600, 3600, 36000)]
        fit = fit_scaling(points)
        assert fit.r2_linear == pytest.approx(1.0, abs=1e-9)
        assert fit.r2_linear > fit.r2_log

    def test_too_few_points(self):
        points = [ScalingPoint(d, d, d) for d in (60, 600, 3600)]
        with pytest.raises(ValueError):
            fit_scaling(points)

    def test_degenerate_durations(self):
        points = [ScalingPoint(60, i, i) for i in range(5)]
        with pytest.raises(ValueError):
            fit_scaling(points)

    def test_effective_capped_by_total(self):
        with pytest.raises(ValueError):
            ScalingPoint(60, 100, 150)


class TestCaptionerModel:
    def test_ten_hours_is_about_1p4m(self):
        assert captioner_tokens(36000) == pytest.approx(1_404_000)

    def test_linear_in_duration(self):
        assert captioner_tokens(7200) == 2 * captioner_tokens(3600)


class TestCsvExport:
    def test_round_trip(self, tmp_path):
        points = [ScalingPoint(60, 1000, 800, 0.2),
                  ScalingPoint(600, 1200, 700, 0.41667)]
        path = tmp_path / "scaling.csv"
        write_scaling_csv(points, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "duration_s,total_tokens,effective_tokens,hit_rate"
        assert lines[1].startswith("60,1000,800,0.2")
        assert len(lines) == 3
