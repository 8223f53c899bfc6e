"""
Resolution-based layer classes and the rank prior built on them.

Low-resolution UNet blocks carry content, higher-resolution blocks carry style.
In a content-dominant layer the content merger gets the L1 objective and the
hinge penalises the style merger's nuclear norm exceeding the content merger's;
style-dominant layers mirror this. Neutral layers carry no prior.
"""
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import InventoryMismatchError, MaskValidationError
from .lora import MaskPair, as_mask, mask_rank
from .schemas import Thresholds

logger = logging.getLogger(__name__)


class LayerClass(str, Enum):
    CONTENT = "content"
    STYLE = "style"
    NEUTRAL = "neutral"


@dataclass(frozen=True)
class ResolutionRule:
    content_threshold: int = 32
    content_patterns: Tuple[str, ...] = (
        "up_blocks.2", "down_blocks.2", "mid_block",
        "up_blocks_2", "down_blocks_2",
    )
    style_patterns: Tuple[str, ...] = (
        "up_blocks.1", "down_blocks.1",
        "up_blocks_1", "down_blocks_1",
    )


DEFAULT_RULE = ResolutionRule()


def classify_layer(name: str, resolution: Optional[int] = None, rule: ResolutionRule = DEFAULT_RULE) -> LayerClass:
    if not name:
        raise MaskValidationError("layer name must be non-empty")
    if resolution is not None:
        return LayerClass.CONTENT if resolution < rule.content_threshold else LayerClass.STYLE
    if any(p in name for p in rule.content_patterns):
        return LayerClass.CONTENT
    if any(p in name for p in rule.style_patterns):
        return LayerClass.STYLE
    return LayerClass.NEUTRAL


def classify_from_manifest(names, manifest=None, rule: ResolutionRule = DEFAULT_RULE) -> Dict[str, LayerClass]:
    """Manifest overrides win, then manifest resolutions, then the name patterns."""
    entries = manifest.lookup() if manifest is not None else {}
    classes = {}
    for name in names:
        entry = entries.get(name)
        if entry is not None and entry.class_override is not None:
            classes[name] = LayerClass(entry.class_override)
        else:
            classes[name] = classify_layer(name, entry.resolution if entry else None, rule)
    return classes


def _dominant(m_c: np.ndarray, m_s: np.ndarray, layer_class: LayerClass):
    if layer_class == LayerClass.STYLE:
        return m_s, m_c
    return m_c, m_s


def layer_prior_loss(m_c, m_s, lam: float, layer_class: LayerClass) -> float:
    """
    ||m_dom||_1 + lam * max(0, ||m_other||_* - ||m_dom||_*). The mergers are
    diagonal, so their nuclear norms are the L1 norms of the vectors.
    """
    if lam < 0:
        raise MaskValidationError(f"hinge weight must be non-negative, got {lam}")
    layer_class = LayerClass(layer_class)
    if layer_class == LayerClass.NEUTRAL:
        return 0.0
    dom, other = _dominant(np.asarray(m_c, dtype=np.float64), np.asarray(m_s, dtype=np.float64), layer_class)
    dom_l1 = float(np.sum(np.abs(dom)))
    other_l1 = float(np.sum(np.abs(other)))
    return dom_l1 + lam * max(0.0, other_l1 - dom_l1)


def prior_violation(m_c, m_s, layer_class: LayerClass) -> float:
    """How far the other merger's L1 norm exceeds the dominant one's; 0 when the prior holds."""
    layer_class = LayerClass(layer_class)
    if layer_class == LayerClass.NEUTRAL:
        return 0.0
    dom, other = _dominant(np.asarray(m_c, dtype=np.float64), np.asarray(m_s, dtype=np.float64), layer_class)
    return max(0.0, float(np.sum(np.abs(other))) - float(np.sum(np.abs(dom))))


def layer_prior_subgradient(m_c, m_s, lam: float, layer_class: LayerClass) -> Tuple[np.ndarray, np.ndarray]:
    """Subgradient of ``layer_prior_loss``; sign(0) = 0 and the hinge counts as inactive at the kink."""
    m_c = np.asarray(m_c, dtype=np.float64)
    m_s = np.asarray(m_s, dtype=np.float64)
    layer_class = LayerClass(layer_class)
    if layer_class == LayerClass.NEUTRAL:
        return np.zeros_like(m_c), np.zeros_like(m_s)

    dom, other = _dominant(m_c, m_s, layer_class)
    sign_dom = np.sign(dom)
    sign_other = np.sign(other)
    if np.sum(np.abs(other)) > np.sum(np.abs(dom)):
        g_dom = sign_dom - lam * sign_dom
        g_other = lam * sign_other
    else:
        g_dom = sign_dom
        g_other = np.zeros_like(other)

    if layer_class == LayerClass.STYLE:
        return g_other, g_dom
    return g_dom, g_other


def layer_seed(seed: int, name: str) -> int:
    """seed XOR a process-independent hash of the layer name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) & 0x7FFF_FFFF_FFFF_FFFF


def init_masks(layer_class: LayerClass, rank: int, thresholds: Thresholds, rng_seed: int,
               style_rank: Optional[int] = None) -> MaskPair:
    """
    Prior-informed initial mergers. One uniform vector V is drawn and normalised
    to unit length; the dominant merger keeps entries above the lower threshold,
    the other merger entries above the higher one. Neutral layers start all-ones.
    """
    style_rank = rank if style_rank is None else style_rank
    if rank < 1 or style_rank < 1:
        raise MaskValidationError(f"ranks must be positive, got {rank} and {style_rank}")
    layer_class = LayerClass(layer_class)
    if layer_class == LayerClass.NEUTRAL:
        return MaskPair(content=np.ones(rank), style=np.ones(style_rank))

    rng = np.random.default_rng(rng_seed)
    v = rng.uniform(0.0, 1.0, size=max(rank, style_rank))
    v_norm = v / np.linalg.norm(v)

    if layer_class == LayerClass.CONTENT:
        t_c, t_s = thresholds.t_style, thresholds.t_content
    else:
        t_c, t_s = thresholds.t_content, thresholds.t_style
    content = (v_norm[:rank] > t_c).astype(np.float64)
    style = (v_norm[:style_rank] > t_s).astype(np.float64)
    return MaskPair(content=content, style=style)


def ones_masks(rank: int, style_rank: Optional[int] = None) -> MaskPair:
    return MaskPair(content=np.ones(rank), style=np.ones(rank if style_rank is None else style_rank))


HISTOGRAM_KEYS = (
    (LayerClass.CONTENT, "content"),
    (LayerClass.CONTENT, "style"),
    (LayerClass.STYLE, "content"),
    (LayerClass.STYLE, "style"),
)


def histogram_key(layer_class: LayerClass, role: str) -> str:
    return f"{LayerClass(layer_class).value}_dominant/m_{role[0]}"


def rank_histogram(masks: Mapping[str, MaskPair], classes: Mapping[str, LayerClass],
                   threshold: float) -> Dict[str, Dict[str, int]]:
    """
    Frequency of binarised merger ranks for content- and style-dominant layers,
    one histogram per (class, merger). Keys are rank values as strings.
    """
    if set(masks) != set(classes):
        missing = sorted(set(masks) ^ set(classes))
        raise InventoryMismatchError(f"masks and classes disagree on layers: {', '.join(missing)}")

    rows = []
    for name, pair in masks.items():
        layer_class = LayerClass(classes[name])
        if layer_class == LayerClass.NEUTRAL:
            continue
        rows.append({'layer_class': layer_class, 'role': 'content', 'rank': mask_rank(as_mask(pair.content), threshold)})
        rows.append({'layer_class': layer_class, 'role': 'style', 'rank': mask_rank(as_mask(pair.style), threshold)})
    df = pd.DataFrame(rows, columns=['layer_class', 'role', 'rank'])

    histograms: Dict[str, Dict[str, int]] = {}
    for layer_class, role in HISTOGRAM_KEYS:
        subset = df[(df['layer_class'] == layer_class) & (df['role'] == role)]
        counts = subset['rank'].value_counts().sort_index()
        histograms[histogram_key(layer_class, role)] = {str(int(k)): int(v) for k, v in counts.items()}
    return histograms


def mean_rank(histogram: Mapping[str, int]) -> float:
    total = sum(histogram.values())
    if total == 0:
        return float("nan")
    return sum(int(k) * v for k, v in histogram.items()) / total
