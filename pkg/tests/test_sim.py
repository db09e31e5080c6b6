import math

import numpy as np
import pytest

from mcdal.metrics import Measure, mutual_information
from mcdal.pool import SPLITS
from mcdal.seeding import derive_rng
from mcdal.sim import (
    ExperimentConfig,
    MockPredictor,
    PatternFamily,
    SyntheticWorld,
    generate_dataset,
    run_experiment,
)


def small_world(seed=0, size=6):
    return SyntheticWorld(height=size, width=size, rng_seed=seed)


def two_family_world(seed=0):
    return SyntheticWorld(
        class_count=3,
        height=6,
        width=6,
        rng_seed=seed,
        families=(
            PatternFamily("common", "gradient", (0, 1)),
            PatternFamily("rare", "blobs", (0, 2)),
        ),
        frequencies=(0.9, 0.1),
    )


def binom_interval_99(n, p):
    # Exact binomial 99% central interval via log-pmf accumulation.
    logs = [
        math.lgamma(n + 1)
        - math.lgamma(k + 1)
        - math.lgamma(n - k + 1)
        + k * math.log(p)
        + (n - k) * math.log1p(-p)
        for k in range(n + 1)
    ]
    pmf = [math.exp(v) for v in logs]
    cdf = np.cumsum(pmf)
    lo = int(np.searchsorted(cdf, 0.005))
    hi = int(np.searchsorted(cdf, 0.995))
    return lo, hi


class TestWorldValidation:
    def test_frequencies_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            SyntheticWorld(
                class_count=3,
                families=(
                    PatternFamily("a", "gradient", (0, 1)),
                    PatternFamily("b", "blobs", (0, 2)),
                ),
                frequencies=(0.9, 0.2),
            )

    def test_every_class_must_be_reachable(self):
        with pytest.raises(ValueError, match="unreachable"):
            SyntheticWorld(
                class_count=4,
                families=(
                    PatternFamily("a", "gradient", (0, 1)),
                    PatternFamily("b", "blobs", (0, 2)),
                ),
                frequencies=(0.5, 0.5),
            )

    def test_default_world_is_unbalanced_and_valid(self):
        world = SyntheticWorld()
        assert world.class_count == 5
        assert len(world.families) == 5
        assert world.rare_families() == {"spotted-2", "spotted-3", "spotted-4"}


class TestGenerateDataset:
    def test_same_seed_gives_byte_identical_tree(self, tmp_path):
        for name in ("one", "two"):
            generate_dataset(small_world(3), 6, 3, 2, out_dir=tmp_path / name)
        a, b = tmp_path / "one", tmp_path / "two"
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_zero_test_split_rejected(self):
        with pytest.raises(ValueError, match="n_test"):
            generate_dataset(small_world(), 4, 2, 0)

    def test_family_counts_within_binomial_interval(self):
        ds = generate_dataset(two_family_world(11), 1000, 1, 1)
        rare_count = sum(
            1 for i in ds.split_ids("train") if ds.families[i] == "rare"
        )
        lo, hi = binom_interval_99(1000, 0.1)
        assert lo <= rare_count <= hi

    def test_labels_use_declared_classes_only(self):
        ds = generate_dataset(small_world(5), 20, 4, 2)
        for image_id, labels in ds.labels.items():
            family = ds.families[image_id]
            world = small_world(5)
            allowed = set(world.family(family).classes)
            assert set(np.unique(labels)) <= allowed


class TestMockForward:
    def test_noiseless_predictor_yields_zero_mi(self):
        world = small_world(1)
        ds = generate_dataset(world, 4, 2, 1)
        predictor = MockPredictor(world, noise_floor=0.0, noise_gain=0.0)
        for image_id in ds.split_ids("train"):
            stack = predictor.forward(
                image_id, ds.labels[image_id], ds.families[image_id], t=5
            )
            assert np.array_equal(stack.passes[0], stack.passes[1])
            assert mutual_information(stack).per_image == 0.0

    def test_output_passes_stack_validation(self):
        world = small_world(2)
        ds = generate_dataset(world, 2, 1, 1)
        predictor = MockPredictor(world, noise_floor=0.4, noise_gain=5.0)
        image_id = ds.split_ids("train")[0]
        stack = predictor.forward(image_id, ds.labels[image_id], ds.families[image_id], t=7)
        assert stack.num_passes == 7
        assert stack.num_classes == world.class_count

    def test_unfamiliar_family_has_higher_mean_mi(self):
        world = small_world(3)
        ds = generate_dataset(world, 2, 1, 1)
        image_id = ds.split_ids("train")[0]
        label = ds.labels[image_id]
        family = ds.families[image_id]
        naive = MockPredictor(world, rng_seed=0)
        expert = MockPredictor(world, rng_seed=0)
        expert.familiarity[family] = 100
        naive_mi, expert_mi = [], []
        for k in range(100):
            rng_n = derive_rng(10, "naive", k)
            rng_e = derive_rng(10, "expert", k)
            naive_mi.append(
                mutual_information(
                    naive.forward(image_id, label, family, 10, rng_n)
                ).per_image
            )
            expert_mi.append(
                mutual_information(
                    expert.forward(image_id, label, family, 10, rng_e)
                ).per_image
            )
        assert np.mean(naive_mi) > np.mean(expert_mi)

    def test_rare_families_score_higher_for_a_fixed_pool(self):
        # Familiarity fixed to a pool histogram: rare-family images must carry
        # higher expected uncertainty than common-family ones.
        world = small_world(4)
        predictor = MockPredictor(world, rng_seed=0)
        predictor.familiarity.update(
            {"open-scene": 65, "striped": 33, "spotted-2": 14, "spotted-3": 10, "spotted-4": 8}
        )
        ds = generate_dataset(world, 300, 1, 1)
        by_family = {"open-scene": [], "spotted-4": []}
        for image_id in ds.split_ids("train"):
            family = ds.families[image_id]
            if family not in by_family or len(by_family[family]) >= 50:
                continue
            rng = derive_rng(77, image_id)
            mi = mutual_information(
                predictor.forward(image_id, ds.labels[image_id], family, 20, rng)
            ).per_image
            by_family[family].append(mi)
        assert np.mean(by_family["spotted-4"]) > np.mean(by_family["open-scene"])

    def test_rejects_zero_passes(self):
        world = small_world(1)
        ds = generate_dataset(world, 2, 1, 1)
        image_id = ds.split_ids("train")[0]
        with pytest.raises(ValueError, match="pass"):
            MockPredictor(world).forward(
                image_id, ds.labels[image_id], ds.families[image_id], t=0
            )


class TestRunExperiment:
    def small_config(self, seed=0, **overrides):
        defaults = dict(
            p_percent=10.0,
            t_passes=8,
            eval_passes=1,
            eval_repeats=1,
            max_rounds=2,
            seed=seed,
        )
        defaults.update(overrides)
        return ExperimentConfig(**defaults)

    def test_zero_noise_selects_nothing_from_round_one(self):
        world = small_world(6, size=4)
        config = self.small_config(noise_floor=0.0, noise_gain=0.0)
        result = run_experiment(world, config, n_train=30, n_val=10, n_test=4)
        assert result.summary["rounds"][0]["selected"] == 0
        assert result.summary["stop_reason"] == "few_uncertain"

    def test_paired_trajectories_share_initial_pools(self):
        world = small_world(7, size=4)
        config = self.small_config(max_rounds=0)
        result = run_experiment(world, config, n_train=30, n_val=10, n_test=4)
        a = result.state_uncertainty.to_dict()["splits"]
        b = result.state_random.to_dict()["splits"]
        assert a == b

    def test_baseline_counts_match_every_round(self):
        world = small_world(8, size=4)
        config = self.small_config(seed=4, noise_floor=0.3, noise_gain=8.0)
        result = run_experiment(world, config, n_train=40, n_val=12, n_test=4)
        history_a = result.state_uncertainty.history
        history_b = result.state_random.history
        assert len(history_a) == len(history_b)
        for ra, rb in zip(history_a, history_b):
            assert ra.selected_counts() == rb.selected_counts()

    def test_bit_reproducible_from_seed(self):
        world = small_world(9, size=4)
        runs = [
            run_experiment(
                world, self.small_config(seed=5), n_train=24, n_val=8, n_test=4
            )
            for _ in range(2)
        ]
        assert runs[0].rows == runs[1].rows
        assert runs[0].summary == runs[1].summary

    def test_output_tree_when_out_dir_given(self, tmp_path):
        world = small_world(10, size=4)
        config = self.small_config(seed=6)
        run_experiment(
            world, config, n_train=20, n_val=8, n_test=4, out_dir=tmp_path / "run"
        )
        root = tmp_path / "run"
        assert (root / "runlog.csv").exists()
        assert (root / "summary.json").exists()
        assert (root / "state_uncertainty.json").exists()
        assert (root / "state_random.json").exists()
        assert (root / "dataset" / "manifest.json").exists()
        audits = list((root / "audit").glob("round_*.json"))
        assert audits
