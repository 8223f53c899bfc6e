"""
Merger training and adapter merging.

Each shared layer gets its own pair of mergers, trained independently with a
seed derived from the run seed and the layer name, so the worker count never
changes the result.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InventoryMismatchError, ManifestError, NumericError
from .layer_prior import LayerClass, classify_from_manifest, init_masks, layer_seed, ones_masks, rank_histogram
from .lora import (
    AdapterRole, AdapterSet, LoraLayer, MaskPair, _check_pair, fold_output_masks, fold_rank_masks,
    mask_rank, naive_merge,
)
from .objectives import BaseMaskObjective, get_objective, make_probes
from .schemas import LayerManifest, LayerReport, MaskMode, MergeConfig, MergeReport

logger = logging.getLogger(__name__)


class AdamBacktracking:
    """
    Adam with a descent guard: a step that would raise the loss is retried at
    half the step size up to ``max_backtracks`` times, then skipped. Iterates
    are clamped to ``mask_clamp`` after every step. A candidate must also not
    raise the objective's ``violation``.
    """
    def __init__(self, config: MergeConfig, name: str = "layer"):
        self.config = config
        self.name = name
        self.lo, self.hi = config.mask_clamp
        self.accepted = 0
        self.skipped = 0

    def _evaluate(self, objective: BaseMaskObjective, x: np.ndarray, step: int):
        loss, grad = objective(x)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericError(f"{self.name}: non-finite loss or gradient at step {step}")
        return loss, grad

    def run(self, objective: BaseMaskObjective, x0: np.ndarray) -> Tuple[np.ndarray, float, float]:
        cfg = self.config
        x = np.clip(np.asarray(x0, dtype=np.float64), self.lo, self.hi)
        loss, grad = self._evaluate(objective, x, 0)
        initial = loss
        violation = objective.violation(x)

        m = np.zeros_like(x)
        v = np.zeros_like(x)
        for t in range(1, cfg.steps + 1):
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            direction = m_hat / (np.sqrt(v_hat) + cfg.epsilon)

            lr = cfg.learning_rate
            for attempt in range(cfg.max_backtracks + 1):
                candidate = np.clip(x - lr * direction, self.lo, self.hi)
                cand_loss, cand_grad = self._evaluate(objective, candidate, t)
                cand_violation = objective.violation(candidate)
                if cand_loss <= loss and cand_violation <= violation:
                    x, loss, grad, violation = candidate, cand_loss, cand_grad, cand_violation
                    self.accepted += 1
                    break
                lr *= 0.5
            else:
                self.skipped += 1
                logger.debug(f"{self.name}: step {t} skipped after {cfg.max_backtracks} backtracks")
        return x, initial, loss


def _initial_vector(content: LoraLayer, style: LoraLayer, layer_class: LayerClass, config: MergeConfig) -> np.ndarray:
    if config.init_strategy == 'ones':
        pair = ones_masks(content.rank, style.rank)
    else:
        pair = init_masks(layer_class, content.rank, config.thresholds, config.seed, style_rank=style.rank)
    return np.concatenate([pair.content, pair.style])


def _train(mode: MaskMode, content: LoraLayer, style: LoraLayer, layer_class: LayerClass,
           config: MergeConfig) -> Tuple[MaskPair, LayerReport]:
    _check_pair(content, style)
    layer_class = LayerClass(layer_class)
    probes = make_probes(content.d_in, config.probe_count, config.seed)
    objective = get_objective(mode, content, style, probes, layer_class, config)

    if mode == 'rank-mask':
        x0 = _initial_vector(content, style, layer_class, config)
    else:
        x0 = np.ones(content.d_out + style.d_out)

    optimizer = AdamBacktracking(config, name=content.name)
    x, initial, final = optimizer.run(objective, x0)
    m_c, m_s = objective.split(x)
    masks = MaskPair(content=m_c, style=m_s)
    alignment, penalty = objective.parts(x)

    report = LayerReport(
        name=content.name,
        layer_class=layer_class.value,
        status='trained',
        source='both',
        initial_loss=initial,
        final_loss=final,
        alignment_loss=alignment,
        penalty_loss=penalty,
        rank_content=mask_rank(m_c, config.binarize_threshold),
        rank_style=mask_rank(m_s, config.binarize_threshold),
        steps_run=config.steps,
        accepted_steps=optimizer.accepted,
        skipped_steps=optimizer.skipped,
        trainable_parameters=int(x.shape[0]),
    )
    return masks, report


def train_masks(content: LoraLayer, style: LoraLayer, layer_class: LayerClass,
                config: MergeConfig) -> Tuple[MaskPair, LayerReport]:
    """Rank-dimension mergers for one layer, seeded by ``config.seed``."""
    return _train('rank-mask', content, style, layer_class, config)


def train_output_masks(content: LoraLayer, style: LoraLayer, layer_class: LayerClass,
                       config: MergeConfig) -> Tuple[MaskPair, LayerReport]:
    """Output-dimension weighting vectors (the baseline), initialised to ones."""
    return _train('output-mask', content, style, layer_class, config)


TRAINERS = {
    'rank-mask': (train_masks, fold_rank_masks),
    'output-mask': (train_output_masks, fold_output_masks),
}


def layer_config(config: MergeConfig, name: str) -> MergeConfig:
    return config.model_copy(update={'seed': layer_seed(config.seed, name)})


def _copied_report(layer: LoraLayer, layer_class: LayerClass, source: str) -> LayerReport:
    return LayerReport(name=layer.name, layer_class=LayerClass(layer_class).value, status='copied', source=source)


def merge_adapters(content_set: AdapterSet, style_set: AdapterSet, manifest: Optional[LayerManifest],
                   config: MergeConfig, mode: Optional[MaskMode] = None, jobs: int = 1,
                   record_timing: bool = False) -> Tuple[AdapterSet, MergeReport]:
    mode = mode or config.baseline_mode
    train, fold = TRAINERS[mode]
    start = time.perf_counter()

    content_names = content_set.names()
    style_names = style_set.names()
    shared = [n for n in content_names if n in style_set.layers]
    content_only = [n for n in content_names if n not in style_set.layers]
    style_only = [n for n in style_names if n not in content_set.layers]
    if content_names and style_names and not shared:
        raise InventoryMismatchError(
            f"content and style adapters share no layer ({len(content_names)} vs {len(style_names)} layers)"
        )

    classes = classify_from_manifest(content_names + style_only, manifest)

    def task(name):
        return train(content_set.layers[name], style_set.layers[name], classes[name], layer_config(config, name))

    if jobs > 1 and len(shared) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(zip(shared, pool.map(task, shared)))
    else:
        results = {name: task(name) for name in shared}

    layers: Dict[str, LoraLayer] = {}
    masks: Dict[str, MaskPair] = {}
    reports: List[LayerReport] = []
    for name in content_names:
        if name in results:
            pair, report = results[name]
            layers[name] = fold(content_set.layers[name], style_set.layers[name], pair)
            if mode == 'rank-mask':
                masks[name] = pair
            reports.append(report)
            logger.info(
                f"{name} [{report.layer_class}]: loss {report.initial_loss:.6g} -> {report.final_loss:.6g}, "
                f"rank(m_c)={report.rank_content}, rank(m_s)={report.rank_style}"
            )
        else:
            layers[name] = content_set.layers[name]
            reports.append(_copied_report(content_set.layers[name], classes[name], 'content'))
    for name in style_only:
        layers[name] = style_set.layers[name]
        reports.append(_copied_report(style_set.layers[name], classes[name], 'style'))

    copied = content_only + style_only
    if copied:
        logger.warning(f"{len(copied)} layers present in only one adapter were copied unmodified")

    histograms = rank_histogram(masks, {n: classes[n] for n in masks}, config.binarize_threshold)
    elapsed = time.perf_counter() - start
    logger.info(f"Merged {len(shared)} layers in {mode} mode ({elapsed:.2f}s)")

    merged = AdapterSet(layers=layers, role=AdapterRole.MERGED, masks=masks)
    report = MergeReport(
        mode=mode,
        config=config,
        layers=reports,
        copied_layers=copied,
        total_trainable_parameters=sum(r.trainable_parameters for r in reports),
        rank_histograms=histograms,
        wall_time_seconds=elapsed if record_timing else None,
    )
    return merged, report


def multi_concept_merge(merged_sets: Sequence[AdapterSet], alphas: Optional[Sequence[float]] = None) -> AdapterSet:
    """Blends several merged content/style adapters; alphas default to 1/n."""
    if not merged_sets:
        raise InventoryMismatchError("at least one merged adapter is required")
    if alphas is None:
        alphas = [1.0 / len(merged_sets)] * len(merged_sets)
    return naive_merge(merged_sets, alphas)


def trainable_parameter_count(manifest: LayerManifest, rank: int, mode: MaskMode) -> int:
    """Mask parameters for a full merge: 2 * rank per layer, or 2 * d_out for output masks."""
    if rank < 1:
        raise ManifestError(f"rank must be positive, got {rank}")
    if mode == 'rank-mask':
        return 2 * rank * len(manifest.entries)
    total = 0
    for entry in manifest.entries:
        if entry.d_out is None:
            raise ManifestError(f"manifest entry '{entry.name}' has no d_out")
        total += 2 * entry.d_out
    return total
