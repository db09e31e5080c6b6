import json
import struct

import numpy as np
import pytest

from helpers import random_stack
from mcdal import io as mcio
from mcdal.metrics import Measure
from mcdal.pool import ScoreRecord, seed_initial, scan_and_select, compute_thresholds, SPLITS


def make_manifest_dict(with_stacks=False):
    def entry(i, split):
        e = {"id": f"{split}-{i}", "label_path": f"labels/{split}-{i}.mcds"}
        if with_stacks:
            e["stack_path"] = f"stacks/{split}-{i}.mcds"
        return e

    return {
        "schema_version": 1,
        "splits": {
            "train": [entry(i, "train") for i in range(3)],
            "val": [entry(i, "val") for i in range(2)],
            "test": [entry(i, "test") for i in range(2)],
        },
    }


class TestTensorRoundTrip:
    def test_stack_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for k in range(20):
            stack = random_stack(rng, image_id=f"img-{k}")
            path = tmp_path / f"s{k}.mcds"
            mcio.write_stack(stack, path)
            back = mcio.read_stack(path, image_id=stack.image_id)
            assert back.passes.tobytes() == stack.passes.tobytes()

    def test_label_map_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 11, (7, 9)).astype(np.uint8)
        mcio.write_label_map(labels, tmp_path / "l.mcds")
        assert np.array_equal(mcio.read_label_map(tmp_path / "l.mcds"), labels)

    def test_image_id_defaults_to_stem(self, tmp_path):
        rng = np.random.default_rng(2)
        mcio.write_stack(random_stack(rng), tmp_path / "frame-007.mcds")
        assert mcio.read_stack(tmp_path / "frame-007.mcds").image_id == "frame-007"


class TestTensorErrors:
    def write_valid(self, tmp_path):
        rng = np.random.default_rng(3)
        stack = random_stack(rng, t=2, c=2, h=2, w=2)
        path = tmp_path / "x.mcds"
        mcio.write_stack(stack, path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self.write_valid(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(mcio.BadMagicError):
            mcio.read_tensor(path)

    def test_version_mismatch(self, tmp_path):
        path = self.write_valid(tmp_path)
        data = bytearray(path.read_bytes())
        data[4:6] = struct.pack("<H", 9)
        path.write_bytes(bytes(data))
        with pytest.raises(mcio.VersionMismatchError):
            mcio.read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = self.write_valid(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(mcio.TruncatedPayloadError):
            mcio.read_tensor(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = self.write_valid(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(mcio.TensorFileError, match="trailing"):
            mcio.read_tensor(path)

    def test_probability_sum_violation_names_coordinates(self, tmp_path):
        arr = np.full((2, 2, 2, 2), 0.5, dtype=np.float32)
        arr[1, :, 0, 1] = 0.45  # sums to 0.90
        path = tmp_path / "bad.mcds"
        mcio.write_tensor(arr, path)
        with pytest.raises(mcio.ProbabilitySumError, match=r"t=1, h=0, w=1"):
            mcio.read_stack(path)

    def test_renormalize_option_recovers_bad_sums(self, tmp_path):
        arr = np.full((2, 2, 2, 2), 0.45, dtype=np.float32)
        path = tmp_path / "bad.mcds"
        mcio.write_tensor(arr, path)
        stack = mcio.read_stack(path, renormalize=True)
        sums = stack.passes.sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_wrong_rank_rejected(self, tmp_path):
        mcio.write_tensor(np.zeros((2, 2), dtype=np.float32), tmp_path / "2d.mcds")
        with pytest.raises(mcio.TensorFileError, match="T, C, H, W"):
            mcio.read_stack(tmp_path / "2d.mcds")


class TestManifest:
    def test_roundtrip_preserves_unknown_fields(self, tmp_path):
        doc = make_manifest_dict()
        doc["pipeline_version"] = "2024-06"
        doc["splits"]["train"][0]["camera"] = "sled-2"
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc))
        manifest = mcio.load_manifest(path)
        out = tmp_path / "copy.json"
        mcio.save_manifest(manifest, out)
        saved = json.loads(out.read_text())
        assert saved["pipeline_version"] == "2024-06"
        assert saved["splits"]["train"][0]["camera"] == "sled-2"

    def test_duplicate_id_names_the_id(self, tmp_path):
        doc = make_manifest_dict()
        doc["splits"]["val"][0]["id"] = "train-0"
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(mcio.ManifestError, match="train-0"):
            mcio.load_manifest(path)

    def test_empty_train_split_rejected(self, tmp_path):
        doc = make_manifest_dict()
        doc["splits"]["train"] = []
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(mcio.ManifestError, match="train split is empty"):
            mcio.load_manifest(path)

    def test_test_entry_requires_label_path(self, tmp_path):
        doc = make_manifest_dict()
        del doc["splits"]["test"][0]["label_path"]
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(mcio.ManifestError, match="label_path"):
            mcio.load_manifest(path)

    def test_unsupported_schema_version(self, tmp_path):
        doc = make_manifest_dict()
        doc["schema_version"] = 99
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(mcio.ManifestError, match="schema_version"):
            mcio.load_manifest(path)


class TestPoolStatePersistence:
    def test_save_load_roundtrip(self, tmp_path):
        manifest = {
            "train": [f"t{i}" for i in range(12)],
            "val": [f"v{i}" for i in range(6)],
        }
        state = seed_initial(manifest, 25.0, rng_seed=3)
        scores = {i: 0.1 * (k % 7) for k, i in enumerate(manifest["train"] + manifest["val"])}
        specs = {
            split: compute_thresholds(
                [
                    ScoreRecord(i, split, scores[i], Measure.MUTUAL_INFORMATION)
                    for i in state.splits[split].labeled
                ],
                0.5,
            )
            for split in SPLITS
        }
        scan_and_select(state, specs, scores.__getitem__, rng_seed=3)
        path = tmp_path / "state.json"
        mcio.save_pool_state(state, path)
        back = mcio.load_pool_state(path)
        assert back.to_dict() == state.to_dict()

    def test_resume_equivalence(self, tmp_path):
        # Interrupt at a round boundary and resume: identical trajectory.
        manifest = {
            "train": [f"t{i}" for i in range(20)],
            "val": [f"v{i}" for i in range(8)],
        }
        rng = np.random.default_rng(8)
        scores_by_round = [
            {i: float(rng.uniform(0, 1)) for i in manifest["train"] + manifest["val"]}
            for _ in range(4)
        ]

        def play(state, start, stop):
            for r in range(start, stop):
                scores = scores_by_round[r]
                specs = {
                    split: compute_thresholds(
                        [
                            ScoreRecord(i, split, scores[i], Measure.MUTUAL_INFORMATION)
                            for i in state.splits[split].labeled
                        ],
                        1.0,
                    )
                    for split in SPLITS
                }
                scan_and_select(state, specs, scores.__getitem__, rng_seed=99)
            return state

        straight = play(seed_initial(manifest, 20.0, rng_seed=99), 0, 4)
        interrupted = play(seed_initial(manifest, 20.0, rng_seed=99), 0, 2)
        mcio.save_pool_state(interrupted, tmp_path / "mid.json")
        resumed = play(mcio.load_pool_state(tmp_path / "mid.json"), 2, 4)
        assert resumed.to_dict() == straight.to_dict()


class TestScoresAndRunlog:
    def test_scores_roundtrip_sorted_with_errors(self, tmp_path):
        records = [
            ScoreRecord("b", "train", 0.25, Measure.MUTUAL_INFORMATION, 2),
            ScoreRecord("a", "val", 0.5, Measure.MARGIN, 2),
        ]
        path = tmp_path / "scores.csv"
        mcio.write_scores(records, path, errors=[("c", "train", "missing stack file")])
        text = path.read_text().splitlines()
        assert text[0] == ",".join(mcio.SCORE_COLUMNS)
        assert [line.split(",")[0] for line in text[1:]] == ["a", "b", "c"]
        back, errors = mcio.read_scores(path)
        assert [r.image_id for r in back] == ["a", "b"]
        assert back[0].measure is Measure.MARGIN
        assert errors == [("c", "train", "missing stack file")]

    def test_runlog_appends_with_nine_significant_digits(self, tmp_path):
        path = tmp_path / "runlog.csv"
        row = {col: None for col in mcio.RUNLOG_COLUMNS}
        row.update(
            iteration=1,
            mode="uncertainty",
            pct_train=12.3456789123,
            pct_val=50.0,
            selected_train=3,
            selected_val=1,
            discarded_train=0,
            discarded_val=0,
            tr_train=0.123456789123,
            test_mean_iou=0.5,
        )
        mcio.append_runlog(path, row)
        mcio.append_runlog(path, {**row, "iteration": 2, "mode": "random"})
        rows = mcio.read_runlog(path)
        assert len(rows) == 2
        assert rows[0]["pct_train"] == "12.3456789"
        assert rows[0]["tr_train"] == "0.123456789"
        assert rows[0]["eu_mean_train"] == "nan"
        assert rows[1]["iteration"] == "2"

    def test_error_messages_with_commas_survive_round_trip(self, tmp_path):
        path = tmp_path / "scores.csv"
        message = "stack for 'x': class probabilities at (t=1, h=0, w=1) sum to 0.9, not 1"
        mcio.write_scores([], path, errors=[("x", "train", message)])
        _, errors = mcio.read_scores(path)
        assert errors == [("x", "train", message)]

    def test_format_number(self):
        assert mcio.format_number(None) == "nan"
        assert mcio.format_number(3) == "3"
        assert mcio.format_number(0.25) == "0.25"
        assert mcio.format_number(1 / 3) == "0.333333333"


class TestAtomicity:
    def test_no_temp_files_left_behind(self, tmp_path):
        rng = np.random.default_rng(4)
        mcio.write_stack(random_stack(rng), tmp_path / "a.mcds")
        mcio.write_label_map(np.zeros((2, 2), dtype=np.uint8), tmp_path / "b.mcds")
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []
