"""Brenner-gradient focus scoring and focal-plane selection.

The Brenner score is the classic horizontal offset-2 form: the sum of
squared differences I(x+2, y) - I(x, y).  Larger means sharper.  Horizontal
only, no threshold term; color inputs are expected to be reduced to a single
channel before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["FocusScore", "brenner", "brenner_value", "select_sharper", "find_focus"]

_TIE_EPS = 1e-12


@dataclass(frozen=True)
class FocusScore:
    value: float
    metric_name: str = "brenner"


def brenner_value(image: np.ndarray) -> float:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("focus scoring expects a 2-D image")
    if img.shape[1] < 3:
        raise ValueError("image width must be at least 3 for offset-2 differences")
    d = img[:, 2:] - img[:, :-2]
    return float(np.sum(d * d))


def brenner(image: np.ndarray) -> FocusScore:
    """Brenner gradient focus score (horizontal offset-2 squared differences)."""
    return FocusScore(value=brenner_value(image))


def select_sharper(a: np.ndarray, b: np.ndarray):
    """Order two images so the Brenner-sharper one comes first.

    Ties within 1e-12 go to the first argument, so pair ordering is
    deterministic.
    """
    if np.shape(a) != np.shape(b):
        raise ValueError("select_sharper requires same-shape images")
    sa, sb = brenner_value(a), brenner_value(b)
    if sb > sa + _TIE_EPS:
        return b, a
    return a, b


def find_focus(zstack) -> float:
    """Offset of the Brenner-maximal slice of a z-stack.

    `zstack` is an iterable of (offset_um, image).  Ties resolve to the
    smallest |offset|, then to the negative side, independent of stack order.
    """
    entries = list(zstack)
    if not entries:
        raise ValueError("find_focus requires a non-empty z-stack")
    best_offset = None
    best_key = None
    for offset, image in entries:
        key = (brenner_value(image), -abs(offset), -offset)
        if best_key is None or key > best_key:
            best_key = key
            best_offset = float(offset)
    return best_offset
