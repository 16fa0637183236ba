"""Base/new class splits, accuracy metrics, and experiment drivers.

The core protocol: split the class list in two, train on a few-shot
episode of the first part only, then measure accuracy on held-out test
images of the base classes, the new (never-trained) classes, and the
full class set. The harmonic mean of base and new accuracy is the
headline generalization number.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterModel, MMAConfig, build_adapter, config_hash, parameter_count
from .errors import ConfigError, DataError, MetricError
from .store import EmbeddingStore
from .trainer import TrainConfig, predict, sample_few_shot, train


@dataclass(frozen=True)
class ClassSplit:
    base: list[int]
    new: list[int]
    base_share: float


def split_classes(store: EmbeddingStore, base_share: float = 0.5, ordering=None) -> ClassSplit:
    """Contiguous deterministic split: the first ceil(share * N) classes are base."""
    if store.n_classes < 2:
        raise DataError(f"store has {store.n_classes} classes; need at least 2 to split")
    if not 0.0 < base_share <= 1.0:
        raise ConfigError(f"base_share must lie in (0, 1], got {base_share}")
    order = list(ordering) if ordering is not None else list(range(store.n_classes))
    if sorted(order) != list(range(store.n_classes)):
        raise ConfigError("ordering must be a permutation of all class ids")
    n_base = math.ceil(base_share * store.n_classes)
    if base_share < 1.0 and n_base >= store.n_classes:
        raise ConfigError(
            f"base_share {base_share} leaves no new classes for {store.n_classes} classes"
        )
    return ClassSplit(base=order[:n_base], new=order[n_base:], base_share=base_share)


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    if base_acc + new_acc <= 0:
        raise MetricError("harmonic mean undefined when both accuracies are zero")
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def evaluate(
    model: AdapterModel,
    store: EmbeddingStore,
    classes,
    split: str = "test",
    prompt_classes=None,
) -> tuple[float, list[dict]]:
    """Accuracy (percent) over test images whose labels lie in ``classes``.

    The prompt set defaults to exactly ``classes``; predictions are
    argmax over it with ties to the lowest class index. Returns the
    accuracy and one record per image for exact post-hoc recomputation.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise ConfigError("evaluation needs a non-empty class set")
    prompt_classes = classes if prompt_classes is None else [int(c) for c in prompt_classes]
    labels = store.labels(split)
    keep = np.flatnonzero(np.isin(labels, classes))
    if keep.size == 0:
        raise DataError(f"no {split} images with labels in the requested class set")
    images = store.images(split, keep)
    text = store.text_for_classes(prompt_classes)
    preds = predict(model, text, images)
    predicted = np.array(prompt_classes)[preds]
    true = labels[keep]
    records = [
        {
            "split": split,
            "index": int(i),
            "true_class": int(t),
            "predicted_class": int(p),
            "correct": int(t == p),
        }
        for i, t, p in zip(keep, true, predicted)
    ]
    accuracy = 100.0 * int((true == predicted).sum()) / int(keep.size)
    return accuracy, records


@dataclass
class EvalReport:
    dataset_id: str
    adapter_kind: str
    seed: int
    base_share: float
    shots: int
    base_acc: float
    new_acc: float | None
    all_acc: float
    harmonic_mean: float | None
    diff_pct: float | None
    param_count: int
    config_hash: str
    noise_tag: str = ""

    def to_row(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentResult:
    report: EvalReport
    history: list[dict]
    predictions: dict[str, list[dict]] = field(default_factory=dict)
    model: AdapterModel | None = None


def run_base_new_experiment(
    store: EmbeddingStore,
    adapter_kind: str,
    adapter_config: MMAConfig,
    train_config: TrainConfig,
    base_share: float = 0.5,
    train_store: EmbeddingStore | None = None,
    noise_tag: str = "",
    new_against_full_prompts: bool = False,
) -> ExperimentResult:
    """Split, train a few-shot episode on the base classes, evaluate everywhere.

    ``train_store`` lets the episode come from a different (e.g. noised)
    store while the report is computed on ``store``'s test split; both
    must share the class list.
    """
    adapter_config.validate()
    train_config.validate()
    train_store = store if train_store is None else train_store
    if train_store.class_names != store.class_names:
        raise DataError("training store and evaluation store disagree on the class list")
    split = split_classes(store, base_share)
    model = build_adapter(adapter_kind, adapter_config, seed=train_config.seed)

    history: list[dict] = []
    if model.parameters():
        episode = sample_few_shot(
            train_store, split.base, train_config.shots, train_config.seed, train_config.val_shots
        )
        model, history = train(model, train_store, episode, train_config)

    base_acc, base_records = evaluate(model, store, split.base)
    predictions = {"base": base_records}
    new_acc = None
    if split.new:
        prompt_classes = list(range(store.n_classes)) if new_against_full_prompts else None
        new_acc, new_records = evaluate(model, store, split.new, prompt_classes=prompt_classes)
        predictions["new"] = new_records
    all_acc, all_records = evaluate(model, store, range(store.n_classes))
    predictions["all"] = all_records

    payload = {
        "adapter_kind": adapter_kind,
        "adapter": adapter_config.to_dict(),
        "train": train_config.to_dict(),
        "base_share": base_share,
        "dataset_id": store.dataset_id,
        "train_dataset_id": train_store.dataset_id,
        "new_against_full_prompts": new_against_full_prompts,
    }
    report = EvalReport(
        dataset_id=store.dataset_id,
        adapter_kind=adapter_kind,
        seed=train_config.seed,
        base_share=base_share,
        shots=train_config.shots,
        base_acc=base_acc,
        new_acc=new_acc,
        all_acc=all_acc,
        harmonic_mean=harmonic_mean(base_acc, new_acc) if new_acc is not None else None,
        diff_pct=(new_acc - base_acc) / base_acc * 100.0 if new_acc is not None and base_acc > 0 else None,
        param_count=parameter_count(model),
        config_hash=config_hash(payload),
        noise_tag=noise_tag,
    )
    return ExperimentResult(report=report, history=history, predictions=predictions, model=model)


def _experiment_task(args) -> ExperimentResult:
    return run_base_new_experiment(*args)


def _run_cells(tasks: list[tuple], jobs: int = 1) -> list[ExperimentResult]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_experiment_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_experiment_task, tasks))


def run_class_share_sweep(
    store: EmbeddingStore,
    adapter_kind: str,
    adapter_config: MMAConfig,
    train_config: TrainConfig,
    shares=(0.3, 0.5, 0.7, 0.9),
    jobs: int = 1,
) -> list[ExperimentResult]:
    """One base/new experiment per base-class share, in share order."""
    shares = [float(s) for s in shares]
    for s in shares:
        if not 0.0 < s < 1.0:
            raise ConfigError(f"sweep shares must lie in (0, 1), got {s}")
    tasks = [(store, adapter_kind, adapter_config, train_config, s) for s in shares]
    return _run_cells(tasks, jobs)


def run_noise_experiment(
    clean_store: EmbeddingStore,
    noisy_store: EmbeddingStore,
    adapter_kinds,
    adapter_config: MMAConfig,
    train_config: TrainConfig,
    base_share: float = 0.5,
    noise_tag: str = "",
    jobs: int = 1,
) -> list[tuple[str, ExperimentResult, ExperimentResult]]:
    """Paired clean-trained vs noisy-trained reports, evaluated on the clean test set."""
    if clean_store.class_names != noisy_store.class_names:
        raise DataError("clean and noisy stores disagree on the class list")
    if not np.array_equal(clean_store.labels("test"), noisy_store.labels("test")) or not np.array_equal(
        clean_store.images("test"), noisy_store.images("test")
    ):
        raise DataError("clean and noisy stores must share the test split")
    pairs = []
    for kind in adapter_kinds:
        clean_task = (clean_store, kind, adapter_config, train_config, base_share)
        noisy_task = (
            clean_store, kind, adapter_config, train_config, base_share,
            noisy_store, noise_tag or f"train:{noisy_store.dataset_id}",
        )
        clean_result, noisy_result = _run_cells([clean_task, noisy_task], jobs=min(jobs, 2))
        pairs.append((kind, clean_result, noisy_result))
    return pairs


def run_ablation_grid(
    store: EmbeddingStore,
    adapter_config: MMAConfig,
    train_config: TrainConfig,
    base_share: float = 0.5,
    jobs: int = 1,
) -> dict[str, list[tuple[str, ExperimentResult]]]:
    """Architecture grid plus baselines, plus the text-adaptation on/off pair.

    Returns {"architecture": [...], "text_adaptation": [...]} with rows
    in a fixed presentation order.
    """
    arch_rows: list[tuple[str, tuple]] = [
        ("zero-shot baseline", (store, "identity_clip", adapter_config, train_config, base_share)),
        ("per-modality bottleneck baseline", (store, "clip_adapter", adapter_config, train_config, base_share)),
    ]
    for attention in ("mha", "transformer_block"):
        for updown in ("linear", "mlp"):
            cfg = dataclasses.replace(
                adapter_config, variant_attention=attention, variant_updown=updown, adapt_text=True
            )
            label = f"cross-modal {attention}, {updown} up/down"
            arch_rows.append((label, (store, "mma", cfg, train_config, base_share)))

    text_rows: list[tuple[str, tuple]] = []
    for adapt_text in (True, False):
        cfg = dataclasses.replace(adapter_config, adapt_text=adapt_text)
        label = "with text adaptation" if adapt_text else "without text adaptation"
        text_rows.append((label, (store, "mma", cfg, train_config, base_share)))

    labels = [label for label, _ in arch_rows + text_rows]
    results = _run_cells([task for _, task in arch_rows + text_rows], jobs)
    tagged = list(zip(labels, results))
    return {"architecture": tagged[: len(arch_rows)], "text_adaptation": tagged[len(arch_rows) :]}
