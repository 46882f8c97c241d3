import math
from collections import Counter

import numpy as np
import pytest
import torch

from sfxembed import training
from sfxembed.ingest import ManifestEntry, parse_manifest
from sfxembed.losses import LossConfig
from sfxembed.model import clone_state, freeze_encoder, state_equal
from sfxembed.testkit import simple_spec, synth_corpus
from sfxembed.training import (Batch, ConfigError, EarlyStopping, RunRecord, TrainConfig,
                               TrainingDiverged, class_balanced_batches, eval_patches,
                               fdr_weights, prepare_data, record_convergence, schedule_epoch,
                               shuffled_batches, train, transfer_head_finetune)

TINY_CHANNELS = (4, 8, 8, 16)


def entries(n_classes, per_class, ds="A"):
    return [ManifestEntry(ds, f"c{c}_{i}.wav", f"c{c}") for c in range(n_classes)
            for i in range(per_class)]


class TestClassBalanced:
    def test_twenty_classes(self):
        plan = class_balanced_batches(entries(20, 10), seed=0, n_batches=5)
        label = {e.file_path: e.class_label for e in entries(20, 10)}
        for b in plan:
            assert len(b) == 64
            counts = Counter(label[fp] for fp, _ in b.items)
            assert len(counts) == 16 and set(counts.values()) == {4}
            # 4 distinct entries per class (without replacement)
            assert len({fp for fp, _ in b.items}) == 64

    def test_few_classes_with_replacement(self):
        plan = class_balanced_batches(entries(8, 10), seed=1, n_batches=3)
        for b in plan:
            assert len(b) == 64
            assert len({fp.split("_")[0] for fp, _ in b.items}) <= 8

    def test_small_class_pigeonhole(self):
        es = entries(20, 10) + [ManifestEntry("A", f"tiny_{i}.wav", "tiny") for i in range(2)]
        seen = 0
        for b in class_balanced_batches(es, seed=2, n_batches=40):
            tiny = [fp for fp, _ in b.items if fp.startswith("tiny")]
            assert len(tiny) % 4 == 0
            for k in range(0, len(tiny), 4):
                assert set(tiny[k:k + 4]) == {"tiny_0.wav", "tiny_1.wav"}
                seen += 1
        assert seen > 0

    def test_fresh_draws_per_seed(self):
        a = class_balanced_batches(entries(20, 10), seed=[0, 1])
        b = class_balanced_batches(entries(20, 10), seed=[0, 2])
        assert a != b
        assert a == class_balanced_batches(entries(20, 10), seed=[0, 1])

    def test_default_batch_count(self):
        assert len(class_balanced_batches(entries(20, 10), seed=0)) == 200 // 64
        assert len(class_balanced_batches(entries(2, 3), seed=0)) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            class_balanced_batches([], seed=0)


class TestShuffled:
    def test_exact(self):
        plan = shuffled_batches(entries(4, 32), seed=0)
        assert len(plan) == 2
        assert Counter(fp for b in plan for fp, _ in b.items) == Counter(
            e.file_path for e in entries(4, 32))

    def test_drop_last(self):
        es = entries(2, 65)
        plan = shuffled_batches(es, seed=3)
        used = [fp for b in plan for fp, _ in b.items]
        assert len(plan) == 2 and len(used) == 128 == len(set(used))

    def test_deterministic(self):
        assert shuffled_batches(entries(3, 50), seed=7) == shuffled_batches(entries(3, 50), seed=7)
        assert shuffled_batches(entries(3, 50), seed=7) != shuffled_batches(entries(3, 50), seed=8)


class TestSchedule:
    def plans(self):
        return {"A": [Batch("A", (("a1", 0),)), Batch("A", (("a2", 0),))],
                "B": [Batch("B", (("b1", 0),))]}

    def test_sequential(self):
        assert [b.items[0][0] for b in schedule_epoch(self.plans())] == ["a1", "a2", "b1"]

    def test_joint_order_and_multiset(self):
        orders = set()
        for seed in range(30):
            out = schedule_epoch(self.plans(), "joint", seed)
            names = [b.items[0][0] for b in out]
            assert sorted(names) == ["a1", "a2", "b1"]
            assert names.index("a1") < names.index("a2")
            orders.add(tuple(names))
        assert len(orders) == 3

    def test_single_dataset(self):
        plans = {"A": self.plans()["A"]}
        assert schedule_epoch(plans, "joint", 5) == schedule_epoch(plans, "sequential")

    def test_multiset_on_real_plans(self):
        plans = {ds: shuffled_batches(entries(3, 70, ds), [1, i], 16, ds)
                 for i, ds in enumerate("ABC")}
        seq = schedule_epoch(plans, "sequential")
        joint = schedule_epoch(plans, "joint", 9)
        assert Counter(seq) == Counter(joint)
        for b in joint:
            assert {fp for fp, _ in b.items} <= {e.file_path for e in entries(3, 70, b.dataset_id)}

    def test_bad_mixing(self):
        with pytest.raises(ValueError):
            schedule_epoch(self.plans(), "random")


class TestConvergenceAndFdr:
    def record(self, f1s, ds="A"):
        rec = RunRecord()
        for e, f in enumerate(f1s, start=1):
            rec.append(e, ds, "train", 1.0, f)
        return rec

    def test_first_crossing(self):
        assert record_convergence(self.record([0.5, 0.85, 0.93, 0.95])) == {"A": 3}
        assert record_convergence(self.record([0.91])) == {"A": 1}
        assert record_convergence(self.record([0.5] * 40)) == {"A": 40}

    def test_empty(self):
        with pytest.raises(ValueError):
            record_convergence(RunRecord())

    def test_raw_alpha(self):
        for beta in (0.1, 0.5, 0.999):
            assert fdr_weights({"A": 1}, beta).raw["A"] == 1.0
        assert fdr_weights({"A": 10}, 0.999).raw["A"] == pytest.approx(9.9552, abs=1e-3)

    def test_normalized_pair(self):
        w = fdr_weights({"E": 10, "H": 20}, 0.999)
        assert w.alpha["E"] == pytest.approx(0.6688, abs=1e-4)
        assert w.alpha["H"] == pytest.approx(1.3312, abs=1e-4)
        assert abs(sum(w.alpha.values()) - 2) <= 1e-9

    def test_neutral(self):
        w = fdr_weights({d: 7 for d in "ABCD"}, 0.99)
        assert all(a == pytest.approx(1.0, abs=1e-12) for a in w.alpha.values())

    def test_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n_e = {str(i): int(n) for i, n in enumerate(rng.integers(1, 60, 5))}
            w = fdr_weights(n_e, float(rng.uniform(0.5, 0.9999)))
            order = sorted(n_e, key=n_e.get)
            assert all(w.alpha[a] <= w.alpha[b] + 1e-12 for a, b in zip(order, order[1:]))
            assert abs(math.fsum(w.alpha.values()) - 5) <= 1e-9

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.5, 2.0])
    def test_bad_beta(self, beta):
        with pytest.raises(ValueError):
            fdr_weights({"A": 3}, beta)


class TestEarlyStopping:
    def test_trace(self):
        stopper = EarlyStopping(5)
        stopped_at = None
        for epoch, v in enumerate([1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99], start=1):
            stopper.update(epoch, v)
            if stopper.should_stop:
                stopped_at = epoch
                break
        assert stopped_at == 7 and stopper.best_epoch == 2


class TestRunRecord:
    def test_jsonl_roundtrip(self, tmp_path):
        rec = RunRecord()
        rec.append(1, "A", "train", 0.5, 0.4)
        rec.append(1, "A", "val", 0.6, 0.3)
        rec.append(2, "A", "val", 0.4, None)
        back = RunRecord.read_jsonl(rec.write_jsonl(tmp_path / "r.jsonl"))
        assert back.rows == rec.rows
        assert back.mean_val_losses() == {1: 0.6, 2: 0.4}

    def test_append_only_order(self):
        rec = RunRecord()
        rec.append(2, "A", "val", 1.0)
        with pytest.raises(ValueError):
            rec.append(1, "A", "val", 1.0)


class TestConfig:
    def test_yaml_roundtrip(self, tmp_path):
        cfg = TrainConfig(scenario="cross_dataset", datasets=["A", "B"], mixing="joint",
                          fdr={"beta": 0.999, "threshold": 0.9},
                          loss=LossConfig("ce+triplet", triplet_margin=0.1))
        back = TrainConfig.load(cfg.dump(tmp_path / "c.yaml"))
        assert back == cfg

    @pytest.mark.parametrize("kwargs,field", [
        ({"scenario": "meta"}, "scenario"),
        ({"scenario": "cross_dataset", "datasets": ["A"]}, "scenario"),
        ({"scenario": "transfer"}, "scenario"),
        ({"mixing": "zip"}, "mixing"),
        ({"fdr": {"beta": 1.5}}, "fdr"),
        ({"batch_size": 1}, "batch_size"),
        ({"lr": 0.0}, "lr"),
        ({"datasets": ["Z"]}, "datasets"),
    ])
    def test_validation_names_field(self, kwargs, field):
        cfg = TrainConfig(**{"datasets": ["A"], **kwargs})
        with pytest.raises(ConfigError) as info:
            cfg.validate(["A", "B"])
        assert info.value.field == field

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            TrainConfig.from_dict({"scenario": "within_dataset", "learning_rate": 0.1})
        assert info.value.field == "learning_rate"

    def test_transfer_base(self):
        cfg = TrainConfig(scenario="transfer", base_dataset="B").validate(["A", "B"])
        assert cfg.training_datasets(["A", "B"]) == ["B"]


# -- end-to-end on a tiny encoder --------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    manifest = synth_corpus(simple_spec(["A", "B"], n_classes=3, items_per_class=12,
                                        duration_s=1.5, seed=11), out)
    return parse_manifest(manifest)


def tiny_config(**kw):
    base = dict(channels=TINY_CHANNELS, batch_size=8, max_epochs=4, patience=2, seed=3, lr=3e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data(corpus):
    return prepare_data(corpus, tiny_config())


class TestTrain:
    def test_within_dataset(self, data):
        torch.set_num_threads(1)
        model, rec = train(tiny_config(datasets=["A"]), data)
        assert model.dataset_ids == ["A"]
        assert rec.mean_val_losses() == {e: rec.series("A", "val")[e - 1] for e in rec.epochs}
        # step count = batches in the plan
        n_train = len(data["A"].entries("train"))
        assert all(v == n_train // 8 for v in rec.steps.values())

    def test_cross_dataset_best_checkpoint(self, data):
        cfg = tiny_config(scenario="cross_dataset", datasets=["A", "B"], mixing="joint")
        model, rec = train(cfg, data)
        means = rec.mean_val_losses()
        assert rec.best_epoch == min(means, key=means.get)
        replay = np.mean([training._val_loss(model, ds, *eval_patches(data[ds], "val"), cfg)[0]
                          for ds in ("A", "B")])
        assert replay <= min(means.values()) + 1e-5
        assert model.metadata["epoch"] == rec.best_epoch
        assert set(model.metadata["val_losses"]) == {"A", "B"}

    def test_determinism(self, data):
        cfg = tiny_config(scenario="cross_dataset", datasets=["A", "B"], mixing="joint",
                          max_epochs=2)
        assert training.epoch_plan(cfg, data, 1) == training.epoch_plan(cfg, data, 1)
        m1, r1 = train(cfg, data)
        m2, r2 = train(cfg, data)
        np.testing.assert_allclose([r["loss"] for r in r1.rows], [r["loss"] for r in r2.rows],
                                   atol=1e-5)
        assert state_equal(clone_state(m1), clone_state(m2))

    def test_metric_run_uses_class_balanced(self, data):
        cfg = tiny_config(datasets=["A"], loss=LossConfig("ce+triplet"), max_epochs=1)
        plan = training.epoch_plan(cfg, data, 1)
        for b in plan:
            assert len(b) == 8  # 2 classes x 4
        model, rec = train(cfg, data)
        assert np.isfinite(rec.series("A", "val")).all()

    def test_fdr_given_n_e(self, data):
        cfg = tiny_config(scenario="cross_dataset", datasets=["A", "B"], max_epochs=1,
                          fdr={"beta": 0.999, "n_e": {"A": 2, "B": 6}})
        model, rec = train(cfg, data)
        alpha = rec.alpha_history[0]
        assert alpha["B"] > 1 > alpha["A"]
        assert model.metadata["alpha"] == alpha

    def test_calibration(self, data):
        cfg = tiny_config(scenario="cross_dataset", datasets=["A", "B"], max_epochs=1,
                          fdr={"beta": 0.999}, calibration_epochs=2)
        _, rec = train(cfg, data)
        assert sum(rec.alpha_history[0].values()) == pytest.approx(2.0)

    def test_divergence(self, data, monkeypatch):
        monkeypatch.setattr(training, "compute_loss",
                            lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
        with pytest.raises(TrainingDiverged):
            train(tiny_config(datasets=["A"], max_epochs=1), data)

    def test_divergence_from_component(self, data, monkeypatch):
        def boom(*a, **k):
            raise FloatingPointError("non-finite ce loss component: nan")
        monkeypatch.setattr(training, "compute_loss", boom)
        with pytest.raises(TrainingDiverged, match="ce"):
            train(tiny_config(datasets=["A"], max_epochs=1), data)

    def test_empty_val_split(self, data):
        dd = data["A"]
        split = training.SplitAssignment({k: ("train" if v == "val" else v)
                                          for k, v in dd.split.assignment.items()}, 0)
        broken = {"A": training.DatasetData(dd.dataset, split, dd.spectrograms)}
        with pytest.raises(ValueError, match="val"):
            train(tiny_config(datasets=["A"], max_epochs=1), broken)

    def test_collection_input(self, corpus):
        model, rec = train(tiny_config(datasets=["B"], max_epochs=1), corpus)
        assert model.dataset_ids == ["B"] and rec.epochs == [1]


@pytest.fixture(scope="module")
def pretrained(data):
    return train(tiny_config(datasets=["A"], max_epochs=3), data)


class TestTransfer:
    def test_encoder_untouched(self, pretrained, data):
        model, _ = pretrained
        frozen = freeze_encoder(model)
        before = clone_state(frozen._encoder)
        head, rec = transfer_head_finetune(frozen, data["B"], tiny_config(max_epochs=2))
        assert state_equal(before, clone_state(frozen._encoder))
        assert head.n_classes == 3 and rec.epochs == [1, 2]

    def test_refit_on_pretraining_dataset(self, pretrained, data):
        model, _ = pretrained
        cfg = tiny_config(max_epochs=15, patience=15, lr=1e-3)
        x, y = eval_patches(data["A"], "val")
        with torch.no_grad():
            pre = float(torch.nn.functional.cross_entropy(model(x, "A", "eval"), y))
        _, rec = transfer_head_finetune(freeze_encoder(model), data["A"], cfg)
        assert min(rec.series("A", "val")) <= pre + 0.05

    def test_constant_encoder_gives_prior(self, data):
        class Constant:
            embedding_dim = 16

            def __call__(self, x, dataset_id=None):
                return torch.ones(len(x), 16)

        _, rec = transfer_head_finetune(Constant(), data["A"], tiny_config(max_epochs=20, patience=20))
        n = 3
        # every prediction is one class: macro F-1 of a single-class predictor on balanced val
        best = rec.best_epoch
        f1 = rec.series("A", "val", "macro_f1")[best - 1]
        assert f1 == pytest.approx((2 * (1 / n) / (1 / n + 1)) / n, abs=1e-9)
        assert rec.series("A", "val")[best - 1] == pytest.approx(math.log(n), abs=0.05)
