"""Adam update against the hand-computed first step, plus bit-exact
checkpoint round trips."""

import numpy as np
import pytest

from polypsynth import tensor as T
from polypsynth.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from polypsynth.errors import DataError, ShapeError
from polypsynth.optim import ParamSet, adam_step


class TestParamSet:
    def test_duplicate_path_rejected(self):
        p = ParamSet()
        p.add("w", np.zeros(3))
        with pytest.raises(ShapeError, match="duplicate"):
            p.add("w", np.zeros(3))

    def test_requires_grad_toggle(self):
        p = ParamSet()
        t = p.add("w", np.zeros(3))
        assert t.requires_grad
        p.set_requires_grad(False)
        assert not t.requires_grad


class TestAdam:
    def test_first_step_hand_computed(self):
        # theta=0, g=1, lr=2e-4, b1=.5, b2=.999: bias correction makes the
        # first update exactly -lr * 1/(1 + eps)
        p = ParamSet()
        p.add("w", np.zeros(1, dtype=np.float64))
        adam_step(p, {"w": np.ones(1)}, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8)
        assert abs(p["w"].numpy()[0] - (-2e-4)) < 1e-9

    def test_zero_grad_leaves_params(self):
        p = ParamSet()
        p.add("w", np.full(4, 1.5))
        adam_step(p, {"w": np.zeros(4)}, lr=1e-3)
        assert np.array_equal(p["w"].numpy(), np.full(4, 1.5))

    def test_two_identical_runs_bitwise(self):
        def run():
            rng = np.random.default_rng(3)
            p = ParamSet()
            p.add("w", rng.normal(size=(4, 4)).astype(np.float32))
            for _ in range(5):
                g = rng.normal(size=(4, 4)).astype(np.float32)
                adam_step(p, {"w": g}, lr=2e-4)
            return p["w"].numpy().tobytes()

        assert run() == run()

    def test_shape_mismatch_rejected(self):
        p = ParamSet()
        p.add("w", np.zeros(3))
        with pytest.raises(ShapeError, match="shape"):
            adam_step(p, {"w": np.zeros(4)}, lr=1e-3)

    def test_step_counts_advance(self):
        p = ParamSet()
        p.add("w", np.zeros(2))
        adam_step(p, {"w": np.ones(2)}, lr=1e-3)
        adam_step(p, {"w": np.ones(2)}, lr=1e-3)
        assert p._t["w"] == 2


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        records = {
            "gen/enc0/kernel": rng.normal(size=(4, 3, 4, 4)).astype(np.float32),
            "gen/opt/enc0/kernel/m": rng.normal(size=(4, 3, 4, 4)).astype(np.float32),
            "gen/opt/enc0/kernel/t": np.asarray(17, dtype=np.int64),
            "wide": rng.normal(size=(2, 2)).astype(np.float64),
        }
        header = {"config": {"image_size": 64}, "task": "p2n"}
        path = tmp_path / "ck.psyn"
        save_checkpoint(path, records, header)
        got_header, got = load_checkpoint(path)
        assert got_header == header
        assert set(got) == set(records)
        for name in records:
            assert got[name].dtype == records[name].dtype
            assert got[name].shape == records[name].shape
            assert got[name].tobytes() == records[name].tobytes()

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "ck.psyn"
        save_checkpoint(path, {"x": np.zeros(1, dtype=np.float32)}, {})
        assert path.read_bytes()[:4] == MAGIC == b"PSYN"

    def test_same_content_same_bytes(self, tmp_path, rng):
        records = {"a": rng.normal(size=(3, 3)).astype(np.float32)}
        p1, p2 = tmp_path / "a.psyn", tmp_path / "b.psyn"
        save_checkpoint(p1, records, {"k": 1})
        save_checkpoint(p2, records, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.psyn"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError, match="not a PSYN"):
            load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(tmp_path / "absent.psyn")

    def test_paramset_state_round_trip(self, tmp_path, rng):
        p = ParamSet()
        p.add("layer/kernel", rng.normal(size=(2, 2)).astype(np.float32))
        adam_step(p, {"layer/kernel": rng.normal(size=(2, 2)).astype(np.float32)}, lr=1e-3)
        rec = p.state_records("net/")
        path = tmp_path / "ck.psyn"
        save_checkpoint(path, rec, {})
        _, got = load_checkpoint(path)

        q = ParamSet()
        q.add("layer/kernel", np.zeros((2, 2), dtype=np.float32))
        q.load_state_records(got, "net/")
        assert q["layer/kernel"].numpy().tobytes() == p["layer/kernel"].numpy().tobytes()
        assert q._m["layer/kernel"].tobytes() == p._m["layer/kernel"].tobytes()
        assert q._t["layer/kernel"] == 1
