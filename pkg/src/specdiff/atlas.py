"""Aggregation and scoring of per-token cross-attention maps.

Time runs along image width (frames), frequency along height; the
localization score therefore integrates map mass over a width interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

__all__ = ["TokenAttentionMap", "aggregate_maps", "export_map_png", "localization_score",
           "attention_centroid_time"]


@dataclass(frozen=True)
class TokenAttentionMap:
    token_index: int
    token: str
    map: np.ndarray  # (h, w), non-negative, sums to 1
    provenance: tuple  # (layer, timestep) pairs aggregated

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim != 2 or np.any(m < 0):
            raise ValueError("map must be a non-negative 2-D matrix")
        if not np.isclose(m.sum(), 1.0, atol=1e-5):
            raise ValueError(f"map must sum to 1, got {m.sum()}")
        object.__setattr__(self, "map", m)


def aggregate_maps(records, token_index, reference_shape,
                   layer_filter=None, timestep_filter=None,
                   token: str = "") -> TokenAttentionMap:
    """Average a token's score column over selected records.

    Each record is (layer, timestep, scores, (h, w)) as produced by the
    recorder; scores may carry a leading batch dim of 1. Every selected
    column is reshaped to its layer geometry, bilinearly resized to
    reference_shape, then the mean over records is renormalized to sum 1.

    token_index may be a single index or an iterable of indices; multiple
    indices (e.g. a token's slots under each ensemble encoder) are summed
    per record before normalization, so their relative mass is preserved.
    """
    ref_h, ref_w = reference_shape
    indices = ([token_index] if isinstance(token_index, (int, np.integer))
               else list(token_index))
    selected = []
    provenance = []
    for layer, t, scores, (h, w) in records:
        if layer_filter is not None and layer not in layer_filter:
            continue
        if timestep_filter is not None and not timestep_filter(t):
            continue
        s = scores
        if isinstance(s, torch.Tensor):
            s = s.detach().cpu().numpy()
        if s.ndim == 3:
            s = s[0]
        for idx in indices:
            if not 0 <= idx < s.shape[1]:
                raise IndexError(f"token index {idx} out of range for M={s.shape[1]}")
        col = s[:, indices].sum(axis=1).reshape(h, w)
        total = col.sum()
        if total > 0:
            col = col / total
        resized = F.interpolate(
            torch.from_numpy(col)[None, None].double(),
            size=(ref_h, ref_w), mode="bilinear", align_corners=False,
        )[0, 0].numpy()
        selected.append(resized)
        provenance.append((layer, t))
    if not selected:
        raise ValueError("no attention records left after filtering")
    mean = np.mean(selected, axis=0)
    mean = np.maximum(mean, 0.0)
    mean = mean / mean.sum()
    index = indices[0] if len(indices) == 1 else tuple(indices)
    return TokenAttentionMap(index, token, mean, tuple(provenance))


def localization_score(amap: TokenAttentionMap, interval) -> float:
    """Mass of the map whose time (width) coordinate falls in [a, b)."""
    a, b = interval
    if not (0.0 <= a < b <= 1.0):
        raise ValueError(f"invalid interval [{a}, {b})")
    w = amap.map.shape[1]
    centers = (np.arange(w) + 0.5) / w
    cols = (centers >= a) & (centers < b)
    return float(amap.map[:, cols].sum())


def attention_centroid_time(amap: TokenAttentionMap) -> float:
    """Mass-weighted mean time coordinate in [0, 1]."""
    w = amap.map.shape[1]
    centers = (np.arange(w) + 0.5) / w
    return float((amap.map.sum(axis=0) * centers).sum())


def export_map_png(amap: TokenAttentionMap, path, underlay=None, alpha: float = 0.5,
                   native_size: bool = False) -> None:
    """Write an 8-bit heatmap PNG, optionally blended over a spectrogram."""
    from PIL import Image

    m = amap.map
    peak = m.max()
    heat = (m / peak * 255.0) if peak > 0 else np.full_like(m, 255.0 / m.size)
    heat8 = np.round(heat).astype(np.uint8)
    if underlay is not None:
        under = underlay.values
        if under.shape[0] == 3:
            under = under.mean(axis=0, keepdims=True)
        under8 = np.round((np.clip(under[0], -1, 1) + 1) / 2 * 255).astype(np.uint8)
        big = Image.fromarray(heat8, mode="L").resize(
            (under8.shape[1], under8.shape[0]), Image.BILINEAR
        )
        blended = np.round(
            alpha * np.asarray(big, dtype=np.float64) + (1 - alpha) * under8
        ).astype(np.uint8)
        img = Image.fromarray(blended[::-1], mode="L")
    else:
        img = Image.fromarray(heat8[::-1], mode="L")
        if not native_size:
            img = img.resize((m.shape[1] * 4, m.shape[0] * 4), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
