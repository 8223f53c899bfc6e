"""
Adapter and mask data model.

A layer's update is ``(alpha / rank) * A @ B``. Masks are vectors: a rank mask
scales the columns of A (rank components), an output mask scales rows of the
update (output units).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InventoryMismatchError, MaskValidationError, MatrixValidationError
from .linalg import as_matrix, as_vector

logger = logging.getLogger(__name__)

DEFAULT_BINARIZE_THRESHOLD = 0.05


class AdapterRole(str, Enum):
    CONTENT = "content"
    STYLE = "style"
    MERGED = "merged"


@dataclass(frozen=True)
class LoraLayer:
    name: str
    a: np.ndarray  # d_out x rank
    b: np.ndarray  # rank x d_in
    alpha: Optional[float] = None

    def __post_init__(self):
        if not self.name:
            raise MatrixValidationError("layer name must be non-empty")
        a = as_matrix(self.a, f"{self.name}.lora_A").copy()
        b = as_matrix(self.b, f"{self.name}.lora_B").copy()
        if a.shape[1] != b.shape[0]:
            raise MatrixValidationError(
                f"{self.name}: lora_A has rank {a.shape[1]} but lora_B has rank {b.shape[0]}"
            )
        alpha = float(a.shape[1]) if self.alpha is None else float(self.alpha)
        if not np.isfinite(alpha) or alpha <= 0:
            raise MatrixValidationError(f"{self.name}: alpha must be positive, got {self.alpha}")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "alpha", alpha)

    @property
    def rank(self) -> int:
        return int(self.a.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.a.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.b.shape[1])

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class MaskPair:
    content: np.ndarray
    style: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "content", as_mask(self.content, name="content merger"))
        object.__setattr__(self, "style", as_mask(self.style, name="style merger"))


@dataclass
class AdapterSet:
    layers: Dict[str, LoraLayer]
    role: AdapterRole = AdapterRole.CONTENT
    masks: Dict[str, MaskPair] = field(default_factory=dict)

    def __post_init__(self):
        self.role = AdapterRole(self.role)
        for key, layer in self.layers.items():
            if key != layer.name:
                raise MatrixValidationError(f"layer stored under '{key}' is named '{layer.name}'")
        stray = [k for k in self.masks if k not in self.layers]
        if stray:
            raise InventoryMismatchError(f"mergers without a layer: {', '.join(sorted(stray))}")

    @classmethod
    def from_layers(cls, layers: Sequence[LoraLayer], role=AdapterRole.CONTENT) -> "AdapterSet":
        out: Dict[str, LoraLayer] = {}
        for layer in layers:
            if layer.name in out:
                raise MatrixValidationError(f"duplicate layer name '{layer.name}'")
            out[layer.name] = layer
        return cls(layers=out, role=role)

    def names(self) -> List[str]:
        return list(self.layers)

    def __len__(self):
        return len(self.layers)


def as_mask(values, length: Optional[int] = None, name: str = "mask") -> np.ndarray:
    m = as_vector(values, name)
    if length is not None and m.shape[0] != length:
        raise MaskValidationError(f"{name}: length {m.shape[0]} does not match expected {length}")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise MaskValidationError(f"{name}: entries must lie in [0, 1]")
    return m


# --- UPDATE ARITHMETIC ---

def delta_weight(layer: LoraLayer) -> np.ndarray:
    return layer.scale * (layer.a @ layer.b)


def apply_rank_mask(layer: LoraLayer, m) -> np.ndarray:
    """(alpha/rank) * A diag(m) B. An all-ones mask reproduces ``delta_weight`` bit for bit."""
    mask = as_mask(m, layer.rank, f"{layer.name} rank mask")
    return layer.scale * ((layer.a * mask) @ layer.b)


def apply_output_mask(layer: LoraLayer, m_out) -> np.ndarray:
    mask = as_mask(m_out, layer.d_out, f"{layer.name} output mask")
    return mask[:, None] * delta_weight(layer)


def _check_pair(content: LoraLayer, style: LoraLayer):
    if (content.d_out, content.d_in) != (style.d_out, style.d_in):
        raise MatrixValidationError(
            f"{content.name}: content update is {content.d_out}x{content.d_in} "
            f"but style update is {style.d_out}x{style.d_in}"
        )


def merged_delta(content: LoraLayer, style: LoraLayer, masks: MaskPair) -> np.ndarray:
    _check_pair(content, style)
    return apply_rank_mask(content, masks.content) + apply_rank_mask(style, masks.style)


def merged_output_delta(content: LoraLayer, style: LoraLayer, masks: MaskPair) -> np.ndarray:
    _check_pair(content, style)
    return apply_output_mask(content, masks.content) + apply_output_mask(style, masks.style)


# --- MATERIALIZATION ---

def fold_rank_masks(content: LoraLayer, style: LoraLayer, masks: MaskPair) -> LoraLayer:
    """Bakes rank masks into A so the merged update is a plain adapter (alpha = rank)."""
    _check_pair(content, style)
    m_c = as_mask(masks.content, content.rank, f"{content.name} content merger")
    m_s = as_mask(masks.style, style.rank, f"{content.name} style merger")
    a = np.hstack([content.a * (content.scale * m_c), style.a * (style.scale * m_s)])
    b = np.vstack([content.b, style.b])
    return LoraLayer(name=content.name, a=a, b=b, alpha=float(a.shape[1]))


def fold_output_masks(content: LoraLayer, style: LoraLayer, masks: MaskPair) -> LoraLayer:
    _check_pair(content, style)
    m_c = as_mask(masks.content, content.d_out, f"{content.name} content merger")
    m_s = as_mask(masks.style, style.d_out, f"{content.name} style merger")
    a = np.hstack([content.a * (content.scale * m_c[:, None]), style.a * (style.scale * m_s[:, None])])
    b = np.vstack([content.b, style.b])
    return LoraLayer(name=content.name, a=a, b=b, alpha=float(a.shape[1]))


def naive_merge(adapters: Sequence[AdapterSet], weights: Sequence[float]) -> AdapterSet:
    """
    Weighted sum of adapters, kept in factored form: A's are scaled and stacked
    side by side, B's stacked vertically, so the rank grows to the sum of ranks.
    """
    if not adapters:
        raise InventoryMismatchError("at least one adapter set is required")
    if len(weights) != len(adapters):
        raise InventoryMismatchError(f"{len(weights)} weights given for {len(adapters)} adapter sets")
    w = as_vector(weights, "weights")

    reference = adapters[0].names()
    ref_set = set(reference)
    for i, adapter in enumerate(adapters[1:], start=1):
        names = set(adapter.names())
        missing = sorted(ref_set - names)
        extra = sorted(names - ref_set)
        if missing or extra:
            raise InventoryMismatchError(
                f"adapter set {i} inventory differs: missing [{', '.join(missing)}], "
                f"unexpected [{', '.join(extra)}]"
            )

    merged: Dict[str, LoraLayer] = {}
    for name in reference:
        parts = [adapter.layers[name] for adapter in adapters]
        first = parts[0]
        for layer in parts[1:]:
            _check_pair(first, layer)
        a = np.hstack([layer.a * (wi * layer.scale) for wi, layer in zip(w, parts)])
        b = np.vstack([layer.b for layer in parts])
        merged[name] = LoraLayer(name=name, a=a, b=b, alpha=float(a.shape[1]))

    logger.debug(f"Naively merged {len(adapters)} adapter sets over {len(merged)} layers")
    return AdapterSet(layers=merged, role=AdapterRole.MERGED)


# --- MASK SUMMARIES ---

def binarize(m, threshold: float = DEFAULT_BINARIZE_THRESHOLD) -> np.ndarray:
    if not 0.0 <= threshold < 1.0:
        raise MaskValidationError(f"binarization threshold {threshold} outside [0, 1)")
    return (as_vector(m, "mask") > threshold).astype(np.float64)


def mask_rank(m, threshold: float = DEFAULT_BINARIZE_THRESHOLD) -> int:
    return int(np.count_nonzero(binarize(m, threshold)))
