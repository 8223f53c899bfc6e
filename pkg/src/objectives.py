"""
Merger objectives, one class per mask mode.

The alignment term stands in for the distillation part of the image-space
merge loss: on content probes the merged layer should respond like the content
adapter, on style probes like the style adapter. Probes are standard-normal
inputs, so no diffusion model is involved. The merged update is linear in every
mask entry, which makes the alignment term a quadratic with a closed-form
gradient.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import MatrixValidationError
from .layer_prior import LayerClass, layer_prior_loss, layer_prior_subgradient, prior_violation
from .lora import LoraLayer, MaskPair, _check_pair, as_mask
from .schemas import MergeConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeSet:
    x_content: np.ndarray  # d_in x probe_count
    x_style: np.ndarray  # d_in x probe_count

    @property
    def count(self) -> int:
        return int(self.x_content.shape[1])


def make_probes(d_in: int, count: int, seed: int) -> ProbeSet:
    """Content and style probes from independent streams of one (layer) seed."""
    return ProbeSet(
        x_content=np.random.default_rng([seed, 0]).standard_normal((d_in, count)),
        x_style=np.random.default_rng([seed, 1]).standard_normal((d_in, count)),
    )


class BaseMaskObjective:
    """
    Loss over the concatenated vector [m_c; m_s]. Subclasses precompute the
    per-entry responses of both adapters on both probe sets.
    """
    def __init__(self, content: LoraLayer, style: LoraLayer, probes: ProbeSet):
        _check_pair(content, style)
        if probes.x_content.shape[0] != content.d_in or probes.x_style.shape[0] != content.d_in:
            raise MatrixValidationError(f"{content.name}: probes have {probes.x_content.shape[0]} rows, layer d_in is {content.d_in}")
        self.content = content
        self.style = style
        self.n = probes.count

    @property
    def sizes(self) -> Tuple[int, int]:
        raise NotImplementedError

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n_c, _ = self.sizes
        return x[:n_c], x[n_c:]

    def alignment(self, m_c: np.ndarray, m_s: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def penalty(self, m_c: np.ndarray, m_s: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        m_c, m_s = self.split(x)
        a_loss, a_gc, a_gs = self.alignment(m_c, m_s)
        p_loss, p_gc, p_gs = self.penalty(m_c, m_s)
        return a_loss + p_loss, np.concatenate([a_gc + p_gc, a_gs + p_gs])

    def violation(self, x: np.ndarray) -> float:
        return 0.0

    def parts(self, x: np.ndarray) -> Tuple[float, float]:
        m_c, m_s = self.split(x)
        return self.alignment(m_c, m_s)[0], self.penalty(m_c, m_s)[0]


class RankMaskObjective(BaseMaskObjective):
    """Rank-dimension mergers plus the layer prior."""
    def __init__(self, content: LoraLayer, style: LoraLayer, probes: ProbeSet,
                 layer_class: LayerClass, config: MergeConfig):
        super().__init__(content, style, probes)
        self.layer_class = LayerClass(layer_class)
        self.lambda_layer_prior = config.lambda_layer_prior

        # Scaled A's and rank-space projections of every probe set
        self.ac = content.scale * content.a
        self.as_ = style.scale * style.a
        xc, xs = probes.x_content, probes.x_style
        self.pc_xc, self.ps_xc = content.b @ xc, style.b @ xc
        self.pc_xs, self.ps_xs = content.b @ xs, style.b @ xs
        self.target_c = self.ac @ self.pc_xc
        self.target_s = self.as_ @ self.ps_xs

    @property
    def sizes(self) -> Tuple[int, int]:
        return self.content.rank, self.style.rank

    def alignment(self, m_c, m_s):
        merged_c = self.ac @ (m_c[:, None] * self.pc_xc) + self.as_ @ (m_s[:, None] * self.ps_xc)
        merged_s = self.ac @ (m_c[:, None] * self.pc_xs) + self.as_ @ (m_s[:, None] * self.ps_xs)
        r_c = merged_c - self.target_c
        r_s = merged_s - self.target_s
        loss = (np.sum(r_c * r_c) + np.sum(r_s * r_s)) / self.n
        g_c = 2.0 / self.n * (np.sum((self.ac.T @ r_c) * self.pc_xc, axis=1) + np.sum((self.ac.T @ r_s) * self.pc_xs, axis=1))
        g_s = 2.0 / self.n * (np.sum((self.as_.T @ r_c) * self.ps_xc, axis=1) + np.sum((self.as_.T @ r_s) * self.ps_xs, axis=1))
        return float(loss), g_c, g_s

    def penalty(self, m_c, m_s):
        lam = self.lambda_layer_prior
        loss = lam * layer_prior_loss(m_c, m_s, lam, self.layer_class)
        g_c, g_s = layer_prior_subgradient(m_c, m_s, lam, self.layer_class)
        return loss, lam * g_c, lam * g_s

    def violation(self, x: np.ndarray) -> float:
        # Above lam = 1 the prior is a hard constraint for the optimizer
        if self.lambda_layer_prior <= 1.0 or self.layer_class == LayerClass.NEUTRAL:
            return 0.0
        return prior_violation(*self.split(x), self.layer_class)


class OutputMaskObjective(BaseMaskObjective):
    """
    Output-dimension mergers with an overlap penalty on the normalised masks
    (the row-weighting baseline). No layer prior.
    """
    def __init__(self, content: LoraLayer, style: LoraLayer, probes: ProbeSet,
                 layer_class: LayerClass, config: MergeConfig):
        super().__init__(content, style, probes)
        self.layer_class = LayerClass(layer_class)
        self.similarity_coefficient = config.similarity_coefficient

        dc = content.scale * (content.a @ content.b)
        ds = style.scale * (style.a @ style.b)
        xc, xs = probes.x_content, probes.x_style
        self.yc_xc, self.ys_xc = dc @ xc, ds @ xc
        self.yc_xs, self.ys_xs = dc @ xs, ds @ xs

    @property
    def sizes(self) -> Tuple[int, int]:
        return self.content.d_out, self.style.d_out

    def alignment(self, m_c, m_s):
        r_c = m_c[:, None] * self.yc_xc + m_s[:, None] * self.ys_xc - self.yc_xc
        r_s = m_c[:, None] * self.yc_xs + m_s[:, None] * self.ys_xs - self.ys_xs
        loss = (np.sum(r_c * r_c) + np.sum(r_s * r_s)) / self.n
        g_c = 2.0 / self.n * (np.sum(r_c * self.yc_xc, axis=1) + np.sum(r_s * self.yc_xs, axis=1))
        g_s = 2.0 / self.n * (np.sum(r_c * self.ys_xc, axis=1) + np.sum(r_s * self.ys_xs, axis=1))
        return float(loss), g_c, g_s

    def penalty(self, m_c, m_s):
        coef = self.similarity_coefficient
        overlap, g_c, g_s = mask_overlap(m_c, m_s)
        return coef * overlap, coef * g_c, coef * g_s


def mask_overlap(m_c, m_s) -> Tuple[float, np.ndarray, np.ndarray]:
    """|<m_c/|m_c|, m_s/|m_s|>| and its gradient; zero when either mask vanishes."""
    m_c = np.asarray(m_c, dtype=np.float64)
    m_s = np.asarray(m_s, dtype=np.float64)
    n_c, n_s = np.linalg.norm(m_c), np.linalg.norm(m_s)
    if n_c == 0.0 or n_s == 0.0:
        return 0.0, np.zeros_like(m_c), np.zeros_like(m_s)
    u, w = m_c / n_c, m_s / n_s
    d = float(u @ w)
    sign = np.sign(d)
    g_c = sign * (w - d * u) / n_c
    g_s = sign * (u - d * w) / n_s
    return abs(d), g_c, g_s


OBJECTIVES = {
    'rank-mask': RankMaskObjective,
    'output-mask': OutputMaskObjective,
}


def get_objective(mode: str, content: LoraLayer, style: LoraLayer, probes: ProbeSet,
                  layer_class: LayerClass, config: MergeConfig) -> BaseMaskObjective:
    return OBJECTIVES[mode](content, style, probes, layer_class, config)


# --- FUNCTIONAL SURFACE ---

def alignment_loss(content: LoraLayer, style: LoraLayer, masks: MaskPair, probes: ProbeSet) -> float:
    """Mean squared response mismatch of the rank-masked merge on both probe sets."""
    objective = RankMaskObjective(content, style, probes, LayerClass.NEUTRAL, MergeConfig())
    m_c = as_mask(masks.content, content.rank, f"{content.name} content merger")
    m_s = as_mask(masks.style, style.rank, f"{content.name} style merger")
    return objective.alignment(m_c, m_s)[0]


def total_loss(content: LoraLayer, style: LoraLayer, masks: MaskPair, probes: ProbeSet,
               layer_class: LayerClass, config: MergeConfig) -> float:
    objective = RankMaskObjective(content, style, probes, layer_class, config)
    loss, _ = objective(np.concatenate([masks.content, masks.style]))
    return loss


def total_gradient(content: LoraLayer, style: LoraLayer, masks: MaskPair, probes: ProbeSet,
                   layer_class: LayerClass, config: MergeConfig) -> Tuple[np.ndarray, np.ndarray]:
    objective = RankMaskObjective(content, style, probes, layer_class, config)
    _, grad = objective(np.concatenate([masks.content, masks.style]))
    return objective.split(grad)
