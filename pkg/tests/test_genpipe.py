"""Generation chain contracts: free-label soundness, determinism, chained
extents, and the latency benchmark. Quality properties of trained models
live in the acceptance suite."""

import csv

import numpy as np
import pytest

from polypsynth.data import MaskSpec, make_fixtures, read_image, read_mask
from polypsynth.errors import ConfigError, DataError
from polypsynth.generate import (
    GenerationRequest,
    bench_generator,
    generate_corpus,
    negative_to_polyp,
    polyp_to_negative,
    to_uint8,
)
from polypsynth.models import NetConfig, build_generator


@pytest.fixture(scope="module")
def gen32():
    cfg = NetConfig(image_size=32, base_width=8, width_cap=32, critic_norm="none")
    return build_generator(cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def fixtures32():
    return make_fixtures(4, 32, 2, seed=1)


class TestToUint8:
    def test_round_half_even_endpoints(self):
        x = np.array([[[-1.0, 1.0, 0.0]]]).transpose(2, 0, 1)
        out = to_uint8(x)
        assert out.flatten().tolist() == [0, 255, 128]  # 127.5 rounds to even

    def test_clips_overflow(self):
        x = np.array([[[-2.0, 2.0]]]).transpose(2, 0, 1)
        assert to_uint8(x).flatten().tolist() == [0, 255]


class TestPolypToNegative:
    def test_output_shape_and_determinism(self, gen32, fixtures32):
        neg1 = polyp_to_negative(gen32, fixtures32[0])
        neg2 = polyp_to_negative(gen32, fixtures32[0])
        assert neg1.shape == fixtures32[0].image.shape
        assert neg1.dtype == np.uint8
        assert np.array_equal(neg1, neg2)

    def test_dilate_radius_pass_through(self, gen32, fixtures32):
        a = polyp_to_negative(gen32, fixtures32[0], dilate_radius=0)
        b = polyp_to_negative(gen32, fixtures32[0], dilate_radius=10)
        assert a.shape == b.shape  # both succeed; radius only changes the condition

    def test_wrong_size_rejected(self, gen32):
        s = make_fixtures(1, 64, 1, seed=0)[0]
        with pytest.raises(ConfigError, match="image_size"):
            polyp_to_negative(gen32, s)


class TestNegativeToPolyp:
    def test_label_contract(self, gen32, fixtures32):
        s = fixtures32[0]
        neg = polyp_to_negative(gen32, s)
        spec = MaskSpec(shape=s.mask[8:20, 8:20], value=131, placement=(8, 8))
        out = negative_to_polyp(gen32, neg, spec) if spec.shape.any() else None
        if out is None:
            spec = MaskSpec(shape=s.mask, value=131, placement=(0, 0))
            out = negative_to_polyp(gen32, neg, spec)
        assert np.array_equal(out.mask, spec.full_frame(neg.shape[:2]))

    def test_identical_request_identical_output(self, gen32, fixtures32):
        s = fixtures32[0]
        neg = polyp_to_negative(gen32, s)
        spec = MaskSpec(shape=s.mask, value=200, placement=(0, 0))
        a = negative_to_polyp(gen32, neg, spec)
        b = negative_to_polyp(gen32, neg, spec)
        assert np.array_equal(a.image, b.image)

    def test_empty_shape_rejected(self, gen32, fixtures32):
        neg = polyp_to_negative(gen32, fixtures32[0])
        with pytest.raises(DataError, match="no set pixels"):
            negative_to_polyp(gen32, neg, MaskSpec(shape=np.zeros((4, 4), dtype=bool)))

    def test_chain_keeps_extents(self, gen32, fixtures32):
        s = fixtures32[0]
        neg = polyp_to_negative(gen32, s)
        out = negative_to_polyp(gen32, neg, MaskSpec(shape=s.mask, value=50))
        assert out.image.shape == s.image.shape


class TestGenerateCorpus:
    def make_requests(self, fixtures, n):
        reqs = []
        for i in range(n):
            s = fixtures[i % len(fixtures)]
            reqs.append(
                GenerationRequest(
                    source=s, mask_spec=MaskSpec(shape=s.mask, value=(i * 37) % 256), seed=i
                )
            )
        return reqs

    def test_corpus_counts_and_manifest(self, gen32, fixtures32, tmp_path):
        reqs = self.make_requests(fixtures32, 6)
        rows = generate_corpus(reqs, gen32, gen32, tmp_path / "corpus")
        assert len(rows) == 6
        with open(tmp_path / "corpus" / "manifest.csv", newline="") as fh:
            recs = list(csv.DictReader(fh))
        assert len(recs) == 6
        assert set(recs[0]) == {"filename", "mask_filename", "value", "x1", "y1", "x2", "y2", "seed"}

    def test_free_label_soundness(self, gen32, fixtures32, tmp_path):
        # exported mask must equal the request's mask bit for bit, and the
        # bbox its tight extent; never a function of model output
        reqs = self.make_requests(fixtures32, 4)
        rows = generate_corpus(reqs, gen32, gen32, tmp_path / "corpus")
        for req, row in zip(reqs, rows):
            saved = read_mask(tmp_path / "corpus" / row["mask_filename"])
            want = req.mask_spec.full_frame(saved.shape)
            assert np.array_equal(saved, want)
            ys, xs = np.nonzero(want)
            assert (row["x1"], row["y1"], row["x2"], row["y2"]) == (
                xs.min(), ys.min(), xs.max() + 1, ys.max() + 1,
            )

    def test_zero_requests_header_only(self, gen32, tmp_path):
        rows = generate_corpus([], gen32, None, tmp_path / "corpus")
        assert rows == []
        text = (tmp_path / "corpus" / "manifest.csv").read_text().strip()
        assert text == "filename,mask_filename,value,x1,y1,x2,y2,seed"

    def test_polyp_source_needs_p2n(self, gen32, fixtures32, tmp_path):
        reqs = self.make_requests(fixtures32, 1)
        with pytest.raises(ConfigError, match="p2n"):
            generate_corpus(reqs, gen32, None, tmp_path / "corpus")

    def test_negative_raster_source(self, gen32, fixtures32, tmp_path):
        s = fixtures32[0]
        req = GenerationRequest(
            source=s.image, mask_spec=MaskSpec(shape=s.mask, value=99), seed=0
        )
        rows = generate_corpus([req], gen32, None, tmp_path / "corpus")
        assert len(rows) == 1
        img = read_image(tmp_path / "corpus" / rows[0]["filename"])
        assert img.shape == s.image.shape

    def test_deterministic_outputs(self, gen32, fixtures32, tmp_path):
        reqs = self.make_requests(fixtures32, 3)
        generate_corpus(reqs, gen32, gen32, tmp_path / "a")
        generate_corpus(reqs, gen32, gen32, tmp_path / "b")
        for name in ("manifest.csv", "gen_00000.png", "gen_00001_mask.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_350_requests_350_outputs(self, gen32, fixtures32, tmp_path):
        # the published augmentation size: 350 labeled pairs per corpus
        reqs = [
            GenerationRequest(
                source=fixtures32[i % len(fixtures32)].image,  # negatives: n2p only
                mask_spec=MaskSpec(shape=fixtures32[i % len(fixtures32)].mask, value=i % 256),
                seed=i,
            )
            for i in range(350)
        ]
        rows = generate_corpus(reqs, gen32, None, tmp_path / "corpus")
        assert len(rows) == 350
        images = list((tmp_path / "corpus").glob("gen_*[0-9].png"))
        masks = list((tmp_path / "corpus").glob("gen_*_mask.png"))
        assert len(images) == 350 and len(masks) == 350
        with open(tmp_path / "corpus" / "manifest.csv", newline="") as fh:
            assert sum(1 for _ in csv.DictReader(fh)) == 350


class TestBench:
    def test_basic_stats(self, gen32):
        stats = bench_generator(gen32, 32, n_runs=10, warmup=2)
        assert stats.n_runs == 10
        assert len(stats.samples_ms) == 10  # warm-up runs excluded
        assert stats.mean_ms > 0
        assert stats.p95_ms >= stats.median_ms > 0

    def test_too_few_runs_rejected(self, gen32):
        with pytest.raises(ConfigError, match="n_runs"):
            bench_generator(gen32, 32, n_runs=5)

    def test_size_mismatch_rejected(self, gen32):
        with pytest.raises(ConfigError, match="image_size"):
            bench_generator(gen32, 64, n_runs=10)
