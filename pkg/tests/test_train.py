import csv

import numpy as np
import pytest
from conftest import small_model_config

from dynfusion import train as tr
from dynfusion.checkpoint import Checkpoint
from dynfusion.data import Tokenizer
from dynfusion.errors import InvalidInputError, StageOrderError
from dynfusion.rng import PCG32
from dynfusion.tensor import Parameter


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook Adam, one float at a time."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (v_hat ** 0.5 + eps)
    return theta


class TestAdam:
    def test_matches_scalar_reference(self):
        rng = PCG32(0, 7)
        init = rng.normal(6)
        grads = rng.normal(6 * 25).reshape(25, 6)
        p = Parameter(init.copy())
        opt = tr.Adam()
        for g in grads:
            p.grad = g.copy()
            opt.step([p], 1e-3)
        want = [reference_adam(float(init[i]), grads[:, i], 1e-3) for i in range(6)]
        assert np.abs(p.data - want).max() <= 1e-12

    def test_first_step_is_lr_sized(self):
        p = Parameter(np.array([0.0, 0.0]))
        p.grad = np.array([0.3, -40.0])
        tr.Adam().step([p], 5e-5)
        assert np.allclose(p.data, [-5e-5, 5e-5], rtol=1e-6)

    def test_zero_gradient_leaves_parameter(self):
        p = Parameter(np.array([1.25]))
        p.grad = np.zeros(1)
        tr.Adam().step([p], 1e-2)
        assert p.data[0] == 1.25

    def test_frozen_parameter_unchanged(self):
        p = Parameter(np.array([1.25]))
        p.grad = np.ones(1)
        p.frozen = True
        tr.Adam().step([p], 1e-2)
        assert p.data[0] == 1.25


class TestPlan:
    def test_defaults(self):
        plan = tr.TrainPlan()
        assert plan.learning_rate(3, 0) == 1e-5 and plan.learning_rate(3, 2) == 4e-5
        assert plan.learning_rate(2, 2) == 5e-4
        assert plan.batch_size == {1: 8, 2: 16, 3: 8}
        assert plan.max_epochs == 200 and plan.patience == 20

    @pytest.mark.parametrize("kwargs", [dict(max_epochs=201), dict(max_epochs=0), dict(patience=0),
                                        dict(lr={1: (1e-5, 0.0, 1e-5), 2: (1, 1, 1), 3: (1, 1, 1)}),
                                        dict(batch_size={1: 0, 2: 1, 3: 1})])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidInputError):
            tr.TrainPlan(**kwargs)


class TestEarlyStopping:
    def test_stops_after_patience_and_restores_best(self):
        p = Parameter(np.array([0.0]))
        stopper = tr.EarlyStopping(patience=2)
        losses = [1.0, 0.5, 0.7, 0.6, 0.4]
        stops = []
        for epoch, loss in enumerate(losses, start=1):
            p.data = np.array([float(epoch)])
            stops.append(stopper.update(epoch, loss, [p]))
        assert stops == [False, False, False, True, False]
        stopper.restore([p])
        assert p.data[0] == 5.0 and stopper.best_epoch == 5

    def test_restore_returns_best_epoch_values(self):
        p = Parameter(np.array([0.0]))
        stopper = tr.EarlyStopping(patience=5)
        for epoch, loss in enumerate([0.9, 0.2, 0.3], start=1):
            p.data = np.array([10.0 * epoch])
            stopper.update(epoch, loss, [p])
        stopper.restore([p])
        assert p.data[0] == 20.0


class TestEnsembleAndMetrics:
    def test_ensemble_mean(self):
        out = tr.ensemble_predict([[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]])
        assert out.tolist() == [0.5, 0.5]

    def test_identical_systems(self):
        assert tr.ensemble_predict([[0.3, 0.7]] * 3).tolist() == [0.3, 0.7]

    def test_missing_task(self):
        with pytest.raises(InvalidInputError):
            tr.ensemble_predict([[0.8, 0.2], [0.6, 0.4]])

    def test_confusion_fixture(self):
        labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 1]
        pred = [1, 1, 0, 1, 0, 1, 0, 0, 1, 1]
        probs = [[1 - k, k] for k in pred]
        m = tr.evaluate([str(i) for i in range(10)], probs, labels)
        assert m.accuracy == 0.7 and m.correct == 7
        assert m.confusion == {"tp": 4, "tn": 3, "fp": 2, "fn": 1}
        assert m.per_class() == {0: {"total": 5, "correct": 3}, 1: {"total": 5, "correct": 4}}

    def test_all_correct_and_constant(self):
        labels = [0, 1, 0, 1]
        assert tr.evaluate("abcd", [[0.9, 0.1], [0.2, 0.8]] * 2, labels).accuracy == 1.0
        assert tr.evaluate("abcd", [[0.9, 0.1]] * 4, labels).accuracy == 0.5

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            tr.evaluate([], np.zeros((0, 2)), [])


@pytest.fixture(scope="module")
def prepared(small_corpus):
    _, manifest = small_corpus
    tok = Tokenizer.from_manifest(manifest)
    cfg = small_model_config(tok)
    examples = tr.prepare_task_examples(manifest, 0, tok, "mel")
    return manifest, tok, cfg, examples


def quick_plan(**kw):
    return tr.TrainPlan(max_epochs=kw.pop("max_epochs", 2), patience=kw.pop("patience", 2), seed=kw.pop("seed", 1),
                        batch_size={1: 4, 2: 4, 3: 4}, lr={1: (1e-3,) * 3, 2: (1e-3,) * 3, 3: (1e-2,) * 3})


class TestProtocol:
    def test_stage_order(self, prepared):
        manifest, tok, cfg, ex = prepared
        system = tr.new_system(0, cfg, 0, tok)
        with pytest.raises(StageOrderError):
            tr.run_stage(3, system, ex["train"], ex["internal_val"], quick_plan())
        tr.run_stage(1, system, ex["train"], ex["internal_val"], quick_plan(max_epochs=1))
        with pytest.raises(StageOrderError):
            tr.run_stage(3, system, ex["train"], ex["internal_val"], quick_plan())

    def test_freeze_contract(self, prepared):
        manifest, tok, cfg, ex = prepared
        system = tr.new_system(0, cfg, 0, tok)
        for stage in (1, 2):
            tr.run_stage(stage, system, ex["train"], ex["internal_val"], quick_plan())
        frozen = {n: a.tobytes() for n, a in system.model.state_dict().items()
                  if n.startswith(("time.", "semantic."))}
        tf_before = system.model.tf.state_dict()
        w_before = system.model.fusion.values()
        tr.run_stage(3, system, ex["train"], ex["internal_val"], quick_plan(max_epochs=3, patience=5))
        after = system.model.state_dict()
        assert all(after[n].tobytes() == b for n, b in frozen.items())
        changed = any(not np.array_equal(a, system.model.tf.state_dict()[n]) for n, a in tf_before.items())
        assert changed or system.model.fusion.values() != w_before
        assert system.completed == [1, 2, 3]

    def test_epoch_cap(self, prepared):
        manifest, tok, cfg, ex = prepared
        system = tr.new_system(0, cfg, 0, tok)
        rows = tr.run_stage(1, system, ex["train"], ex["internal_val"], quick_plan(max_epochs=3, patience=50))
        assert max(r["epoch"] for r in rows) == 3

    def test_best_epoch_restored(self, prepared):
        manifest, tok, cfg, ex = prepared
        system = tr.new_system(0, cfg, 0, tok)
        rows = tr.run_stage(1, system, ex["train"], ex["internal_val"], quick_plan(max_epochs=4, patience=50))
        best = min(r["loss"] for r in rows if r["split"] == "internal_val")
        loss, _ = tr._evaluate_stage(system, 1, ex["internal_val"], None, 16)
        assert loss == pytest.approx(best, rel=1e-12)

    def test_same_seed_same_bytes(self, prepared, tmp_path):
        manifest, tok, cfg, _ = prepared
        for run in ("a", "b"):
            tr.train_task(manifest, 1, quick_plan(), cfg, out_dir=tmp_path / run, tokenizer=tok)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "task1_stage3.ckpt" in names
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_checkpoint_restores_system(self, prepared, tmp_path):
        manifest, tok, cfg, ex = prepared
        system = tr.train_task(manifest, 0, quick_plan(max_epochs=1), cfg, out_dir=tmp_path, tokenizer=tok)
        back = tr.TaskSystem.from_checkpoint(Checkpoint.load(tmp_path / "task0_stage3.ckpt"))
        assert back.completed == [1, 2, 3]
        assert np.array_equal(tr.predict_proba(back, ex["dev"]), tr.predict_proba(system, ex["dev"]))
        assert all(p.frozen for p in back.model.time.parameters())

    def test_history_csv(self, prepared, tmp_path):
        manifest, tok, cfg, _ = prepared
        tr.train_task(manifest, 2, quick_plan(max_epochs=2, patience=5), cfg, out_dir=tmp_path,
                      stages=(1,), tokenizer=tok)
        with open(tmp_path / "task2_stage1_history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["epoch"], r["split"]) for r in rows] == [
            ("1", "train"), ("1", "internal_val"), ("2", "train"), ("2", "internal_val")]
        assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)

    def test_ensemble_over_subjects(self, prepared):
        manifest, tok, cfg, _ = prepared
        systems, by_task = {}, {}
        for task in (0, 1, 2):
            systems[task] = tr.new_system(task, cfg, 0, tok)
            systems[task].completed = [1, 2, 3]
            by_task[task] = tr.prepare_task_examples(manifest, task, tok)["dev"]
        m = tr.evaluate_ensemble(systems, by_task)
        assert m.n == len({e.subject_id for e in by_task[0]})
