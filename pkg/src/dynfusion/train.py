"""Three-stage training, Adam, early stopping, ensembling and evaluation.

Stage 1 fine-tunes the time branch through a temporary two-class head,
stage 2 does the same for the semantic branch, and stage 3 freezes both
and trains the TF branch, the fusion weights and the final classifier.
One system is trained per elicitation task; predictions are averaged.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import dsp
from . import nn
from . import tensor as T
from .branches import SemanticBranchConfig, TFBranchConfig
from .checkpoint import Checkpoint
from .data import TASKS, Manifest, Tokenizer, encode_transcript, read_wav
from .errors import CheckpointError, InvalidInputError, StageOrderError
from .fusion import Batch, FusionModel, ModelConfig, build_model
from .rng import PCG32, stream_id
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

STAGES = (1, 2, 3)
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainPlan:
    """Per-stage learning rates indexed by task (ER, PR, ED)."""

    lr: dict = field(default_factory=lambda: {1: (5e-5, 5e-5, 5e-5),
                                              2: (5e-5, 5e-5, 5e-4),
                                              3: (1e-5, 3e-5, 4e-5)})
    batch_size: dict = field(default_factory=lambda: {1: 8, 2: 16, 3: 8})
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        self.lr = {int(k): tuple(float(x) for x in v) for k, v in self.lr.items()}
        self.batch_size = {int(k): int(v) for k, v in self.batch_size.items()}
        for stage in STAGES:
            if len(self.lr[stage]) != 3 or min(self.lr[stage]) <= 0:
                raise InvalidInputError(f"stage {stage} needs three positive learning rates")
            if self.batch_size[stage] <= 0:
                raise InvalidInputError(f"stage {stage} batch size must be positive")
        if not 1 <= self.max_epochs <= 200:
            raise InvalidInputError("max_epochs must lie in [1, 200]")
        if self.patience < 1:
            raise InvalidInputError("patience must be positive")

    def learning_rate(self, stage: int, task: int) -> float:
        return self.lr[stage][task]

    def to_dict(self) -> dict:
        return {"lr": {str(k): list(v) for k, v in self.lr.items()},
                "batch_size": {str(k): v for k, v in self.batch_size.items()},
                "max_epochs": self.max_epochs, "patience": self.patience, "seed": self.seed}


# ---------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.steps = 0

    def step(self, params, lr: float) -> None:
        adam_step(params, self, lr)


def adam_step(params, state: Adam, lr: float) -> None:
    """Bias-corrected Adam update of every trainable, unfrozen parameter with a gradient."""
    state.steps += 1
    t = state.steps
    for p in params:
        if not p.requires_grad or p.grad is None:
            continue
        key = id(p)
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


class EarlyStopping:
    """Tracks the lowest validation loss and snapshots the parameters that achieved it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = -1
        self.best_state: dict | None = None

    def update(self, epoch: int, val_loss: float, params) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch = val_loss, epoch
            self.best_state = {id(p): p.data.copy() for p in params}
            return False
        return epoch - self.best_epoch >= self.patience

    def restore(self, params) -> None:
        if self.best_state is None:
            return
        for p in params:
            p.data = self.best_state[id(p)].copy()


# ---------------------------------------------------------------- data preparation

@dataclass
class Example:
    id: str
    subject_id: str
    task: int
    audio: np.ndarray
    features: np.ndarray
    tokens: np.ndarray
    label: int


def prepare_examples(manifest: Manifest, records, tokenizer: Tokenizer, feature: str = "mel",
                     cfg: dsp.FeatureConfig = dsp.FeatureConfig()) -> list[Example]:
    out = []
    for rec in records:
        audio = read_wav(manifest.audio_file(rec))
        feats = dsp.extract(audio, feature, cfg).values
        out.append(Example(rec.id, rec.subject_id, rec.task, audio.samples, feats,
                           encode_transcript(tokenizer, rec.transcript), rec.label))
    return out


def _shape_key(ex: Example) -> tuple:
    return ex.audio.shape[0], ex.features.shape[0]


def group_batch(examples: list[Example]) -> list[Batch]:
    """Split a minibatch into stacks of identical audio/feature length (order-preserving)."""
    groups: dict = {}
    for ex in examples:
        groups.setdefault(_shape_key(ex), []).append(ex)
    return [Batch(np.stack([e.audio for e in grp]), np.stack([e.features for e in grp]),
                  np.stack([e.tokens for e in grp]), np.array([e.label for e in grp]))
            for grp in groups.values()]


def minibatches(n: int, batch_size: int, rng: PCG32 | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------- task systems

@dataclass
class TaskSystem:
    task: int
    model: FusionModel
    heads: dict = field(default_factory=dict)
    completed: list = field(default_factory=list)
    history: list = field(default_factory=list)   # dicts: stage, epoch, split, loss, accuracy
    tokenizer_chars: list = field(default_factory=list)
    seed: int = 0

    def stage_params(self, stage: int) -> list:
        if stage == 1:
            return self.model.time.parameters() + self.heads[1].parameters()
        if stage == 2:
            return self.model.semantic.parameters() + self.heads[2].parameters()
        return (self.model.tf.parameters() + self.model.fusion.parameters()
                + self.model.classifier.parameters())

    def named_state(self) -> dict:
        state = self.model.state_dict()
        for stage, head in sorted(self.heads.items()):
            state.update(head.state_dict(prefix=f"head{stage}."))
        return state

    def to_checkpoint(self, stage: int) -> Checkpoint:
        ckpt = Checkpoint(metadata={
            "format": "dynfusion-task-system",
            "task": self.task,
            "stage": stage,
            "completed_stages": list(self.completed),
            "seed": self.seed,
            "model_config": self.model.cfg.to_dict(),
            "tokenizer": list(self.tokenizer_chars),
        })
        for name, arr in self.named_state().items():
            ckpt.add(name, arr)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TaskSystem":
        meta = ckpt.metadata
        if meta.get("format") != "dynfusion-task-system":
            raise CheckpointError("checkpoint does not hold a task system")
        model = FusionModel(ModelConfig.from_dict(meta["model_config"]))
        model.initialize(meta["seed"])
        model.load_state_dict(ckpt.records)
        system = cls(task=meta["task"], model=model, completed=list(meta["completed_stages"]),
                     tokenizer_chars=list(meta["tokenizer"]), seed=meta["seed"])
        for stage in (1, 2):
            if f"head{stage}.weight" in ckpt:
                head = nn.Linear(model.cfg.d_embed, 2).initialize(meta["seed"], prefix=f"head{stage}.")
                head.load_state_dict(ckpt.records, prefix=f"head{stage}.")
                system.heads[stage] = head
        if 3 in system.completed:
            model.time.freeze()
            model.semantic.freeze()
        return system


def default_model_config(tokenizer: Tokenizer, feature: str = "mel") -> ModelConfig:
    """Desk-scale model sized to the tokenizer vocabulary and the chosen TF feature."""
    n_bins = dsp.FeatureConfig().n_mels if feature == "mel" else dsp.FeatureConfig().n_mfcc
    return ModelConfig(tf=TFBranchConfig(n_bins=n_bins),
                       semantic=SemanticBranchConfig(vocab_size=tokenizer.vocab_size), feature=feature)


def new_system(task: int, model_cfg: ModelConfig, seed: int, tokenizer: Tokenizer | None = None) -> TaskSystem:
    model = build_model(model_cfg, seed=seed + 1000 * task)
    return TaskSystem(task=task, model=model, seed=seed + 1000 * task,
                      tokenizer_chars=tokenizer.to_list() if tokenizer else [])


# ---------------------------------------------------------------- forward helpers per stage

def _stage_logits(system: TaskSystem, stage: int, batch: Batch, cache: dict | None) -> Tensor:
    if stage == 1:
        return system.heads[1](system.model.time(batch.audio))
    if stage == 2:
        return system.heads[2](system.model.semantic(batch.tokens))
    return system.model.logits(batch, cached=cache)


def _frozen_cache(system: TaskSystem, examples: list[Example]) -> dict:
    """Stage-3 branch outputs of the frozen time and semantic branches, per example id."""
    cache = {}
    with no_grad():
        for chunk in minibatches(len(examples), 16, None):
            exs = [examples[i] for i in chunk]
            for batch, grp in zip(group_batch(exs), _grouped(exs)):
                f_t = system.model.time(batch.audio).data
                f_s = system.model.semantic(batch.tokens).data
                for row, ex in enumerate(grp):
                    cache[ex.id] = (f_t[row], f_s[row])
    return cache


def _grouped(examples: list[Example]) -> list[list[Example]]:
    groups: dict = {}
    for ex in examples:
        groups.setdefault(_shape_key(ex), []).append(ex)
    return list(groups.values())


def _batch_cache(grp: list[Example], cache: dict | None) -> dict | None:
    if cache is None:
        return None
    return {"t": Tensor(np.stack([cache[e.id][0] for e in grp])),
            "s": Tensor(np.stack([cache[e.id][1] for e in grp]))}


def _evaluate_stage(system: TaskSystem, stage: int, examples: list[Example],
                    cache: dict | None, batch_size: int) -> tuple[float, float]:
    total_loss, correct = 0.0, 0
    with no_grad():
        for chunk in minibatches(len(examples), batch_size, None):
            exs = [examples[i] for i in chunk]
            for batch, grp in zip(group_batch(exs), _grouped(exs)):
                logits = _stage_logits(system, stage, batch, _batch_cache(grp, cache))
                total_loss += T.cross_entropy(logits, batch.labels).item() * len(grp)
                correct += int((logits.data.argmax(axis=-1) == batch.labels).sum())
    return total_loss / len(examples), correct / len(examples)


def run_stage(stage: int, system: TaskSystem, train: list[Example], val: list[Example],
              plan: TrainPlan, on_epoch=None) -> list[dict]:
    """Train one stage in place and return its history rows."""
    if stage not in STAGES:
        raise InvalidInputError(f"unknown stage {stage}")
    missing = [s for s in range(1, stage) if s not in system.completed]
    if missing:
        raise StageOrderError(f"stage {stage} for task {system.task} needs stage(s) {missing} first")
    if not train or not val:
        raise InvalidInputError("training and validation sets must be non-empty")
    model = system.model
    model.unfreeze()
    cache = None
    if stage in (1, 2):
        head = nn.Linear(model.cfg.d_embed, 2).initialize(system.seed, prefix=f"head{stage}.")
        system.heads[stage] = head
    else:
        system.heads.clear()
        model.time.freeze()
        model.semantic.freeze()
        cache = _frozen_cache(system, train + val)
    params = system.stage_params(stage)
    lr = plan.learning_rate(stage, system.task)
    bsz = plan.batch_size[stage]
    opt = Adam()
    stopper = EarlyStopping(plan.patience)
    rows = []
    for epoch in range(1, plan.max_epochs + 1):
        started = time.perf_counter()
        rng = PCG32(plan.seed, stream_id("shuffle", system.task, stage, epoch))
        train_loss, train_correct = 0.0, 0
        for chunk in minibatches(len(train), bsz, rng):
            exs = [train[i] for i in chunk]
            for p in params:
                p.grad = None
            for batch, grp in zip(group_batch(exs), _grouped(exs)):
                logits = _stage_logits(system, stage, batch, _batch_cache(grp, cache))
                loss = T.scalar_scale(T.cross_entropy(logits, batch.labels), len(grp) / len(exs))
                loss.backward()
                train_loss += loss.item() * len(exs)
                train_correct += int((logits.data.argmax(axis=-1) == batch.labels).sum())
            opt.step(params, lr)
        val_loss, val_acc = _evaluate_stage(system, stage, val, cache, max(bsz, 16))
        rows.append({"stage": stage, "epoch": epoch, "split": "train",
                     "loss": train_loss / len(train), "accuracy": train_correct / len(train)})
        rows.append({"stage": stage, "epoch": epoch, "split": "internal_val",
                     "loss": val_loss, "accuracy": val_acc})
        log.info("task %d stage %d epoch %d: train %.4f val %.4f acc %.3f (%.1fs)", system.task, stage,
                 epoch, rows[-2]["loss"], val_loss, val_acc, time.perf_counter() - started)
        if on_epoch is not None:
            on_epoch(rows[-2], rows[-1])
        if stopper.update(epoch, val_loss, params):
            break
    stopper.restore(params)
    if stage == 3:
        model.time.freeze()
        model.semantic.freeze()
    system.completed = sorted(set(system.completed) | {stage})
    system.history.extend(rows)
    return rows


def write_history(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for r in rows:
            writer.writerow([r["epoch"], r["split"], repr(r["loss"]), repr(r["accuracy"])])


def checkpoint_name(task: int, stage: int) -> str:
    return f"task{task}_stage{stage}.ckpt"


# ---------------------------------------------------------------- inference

def predict_proba(system: TaskSystem, examples: list[Example], drop: tuple = ()) -> np.ndarray:
    """(n, 2) class probabilities in example order."""
    out = np.zeros((len(examples), 2))
    index = {id(ex): i for i, ex in enumerate(examples)}
    for chunk in minibatches(len(examples), 16, None):
        exs = [examples[i] for i in chunk]
        for batch, grp in zip(group_batch(exs), _grouped(exs)):
            probs = system.model.predict_proba(batch, drop=drop)
            for row, ex in enumerate(grp):
                out[index[id(ex)]] = probs[row]
    return out


def branch_embeddings(system: TaskSystem, examples: list[Example]) -> dict:
    out = {"t": [], "tf": [], "s": []}
    with no_grad():
        for grp in _grouped(examples):
            batch = group_batch(grp)[0]
            emb = system.model.embeddings(batch)
            for m in out:
                out[m].append(emb[m].data)
    return {m: np.concatenate(v) for m, v in out.items()}


def ensemble_predict(probabilities) -> np.ndarray:
    """Arithmetic mean of one probability vector per task system."""
    probs = np.array([np.asarray(p, dtype=np.float64) for p in probabilities])
    if len(probs) != len(TASKS):
        raise InvalidInputError(f"need one prediction per task ({len(TASKS)}), got {len(probs)}")
    # exact rational mean, rounded once, so identical inputs come back unchanged
    flat = probs.reshape(len(probs), -1)
    out = [float(sum(Fraction(v) for v in col) / len(col)) for col in flat.T]
    return np.array(out).reshape(probs.shape[1:])


@dataclass
class Metrics:
    accuracy: float
    n: int
    correct: int
    confusion: dict
    predictions: list  # (id, p_at_risk, predicted, label)

    def per_class(self) -> dict:
        c = self.confusion
        return {0: {"total": c["tn"] + c["fp"], "correct": c["tn"]},
                1: {"total": c["tp"] + c["fn"], "correct": c["tp"]}}


def evaluate(ids, probabilities, labels) -> Metrics:
    """Accuracy and confusion counts of argmax predictions."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInputError("cannot evaluate an empty dataset")
    pred = probabilities.argmax(axis=-1)
    confusion = {"tp": int(((pred == 1) & (labels == 1)).sum()), "tn": int(((pred == 0) & (labels == 0)).sum()),
                 "fp": int(((pred == 1) & (labels == 0)).sum()), "fn": int(((pred == 0) & (labels == 1)).sum())}
    correct = confusion["tp"] + confusion["tn"]
    rows = [(i, float(p[1]), int(k), int(y)) for i, p, k, y in zip(ids, probabilities, pred, labels)]
    return Metrics(correct / labels.size, int(labels.size), correct, confusion, rows)


def evaluate_system(system: TaskSystem, examples: list[Example], drop: tuple = ()) -> Metrics:
    probs = predict_proba(system, examples, drop)
    return evaluate([e.id for e in examples], probs, [e.label for e in examples])


def evaluate_ensemble(systems: dict, examples_by_task: dict, drop: tuple = ()) -> Metrics:
    """Average the three task systems over subjects that have all three recordings."""
    per_subject = defaultdict(dict)
    labels = {}
    for task, examples in examples_by_task.items():
        probs = predict_proba(systems[task], examples, drop)
        for ex, p in zip(examples, probs):
            per_subject[ex.subject_id][task] = p
            labels[ex.subject_id] = ex.label
    subjects = sorted(s for s, d in per_subject.items() if len(d) == len(TASKS))
    if not subjects:
        raise InvalidInputError("no subject has recordings for all three tasks")
    probs = [ensemble_predict([per_subject[s][t] for t in TASKS]) for s in subjects]
    return evaluate(subjects, probs, [labels[s] for s in subjects])


# ---------------------------------------------------------------- pipeline

def train_task(manifest: Manifest, task: int, plan: TrainPlan, model_cfg: ModelConfig | None = None,
               out_dir=None, stages=STAGES, system: TaskSystem | None = None,
               examples: dict | None = None, tokenizer: Tokenizer | None = None) -> TaskSystem:
    """Run the requested stages for one task, writing checkpoints/histories when out_dir is set."""
    tokenizer = tokenizer or Tokenizer.from_manifest(manifest)
    if model_cfg is None:
        model_cfg = default_model_config(tokenizer)
    if examples is None:
        examples = prepare_task_examples(manifest, task, tokenizer, model_cfg.feature)
    if system is None:
        system = new_system(task, model_cfg, plan.seed, tokenizer)
    for stage in stages:
        rows = run_stage(stage, system, examples["train"], examples["internal_val"], plan)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            system.to_checkpoint(stage).save(out / checkpoint_name(task, stage))
            write_history(rows, out / f"task{task}_stage{stage}_history.csv")
    return system


def prepare_task_examples(manifest: Manifest, task: int, tokenizer: Tokenizer, feature: str = "mel") -> dict:
    return {split: prepare_examples(manifest, manifest.select(split=split, task=task), tokenizer, feature)
            for split in ("train", "internal_val", "dev")}
