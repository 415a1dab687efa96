"""Backdoor trigger definitions applied to image batches."""
from abc import ABC, abstractmethod
from typing import Literal, Tuple

import numpy as np

from .errors import InvalidInputError
from .nn_core import DTYPE, rng_for

Phase = Literal["train", "eval"]

CHECKERBOARD = np.array(
    [[1.0, 0.0, 1.0],
     [0.0, 1.0, 0.0],
     [1.0, 0.0, 1.0]],
    dtype=DTYPE,
)


class TriggerSpec(ABC):
    """Base class for triggers; ``apply`` works on ``(..., H, W, C)`` pixel arrays."""

    kind: str = ""

    @abstractmethod
    def apply(self, pixels: np.ndarray, phase: Phase = "train") -> np.ndarray:
        """Return a triggered copy of ``pixels``."""


class PatchTrigger(TriggerSpec):
    """3x3 checkerboard overwriting the bottom-right corner (BadNet style)."""

    kind = "patch"

    def __init__(self, anchor: Tuple[int, int] = (0, 0)):
        """
        Args:
            anchor: (row, col) offset of the patch from the bottom-right corner
        """
        self.anchor = (int(anchor[0]), int(anchor[1]))

    def _origin(self, h: int, w: int) -> Tuple[int, int]:
        row = h - 3 - self.anchor[0]
        col = w - 3 - self.anchor[1]
        if row < 0 or col < 0 or self.anchor[0] < 0 or self.anchor[1] < 0:
            raise InvalidInputError(f"patch with anchor {self.anchor} does not fit a {h}x{w} image")
        return row, col

    def region_mask(self, shape: Tuple[int, int, int]) -> np.ndarray:
        """Boolean H x W x C mask of the pixels the patch overwrites."""
        h, w, c = shape
        row, col = self._origin(h, w)
        mask = np.zeros(shape, dtype=bool)
        mask[row:row + 3, col:col + 3, :] = True
        return mask

    def apply(self, pixels: np.ndarray, phase: Phase = "train") -> np.ndarray:
        row, col = self._origin(pixels.shape[-3], pixels.shape[-2])
        out = np.array(pixels, dtype=DTYPE, copy=True)
        out[..., row:row + 3, col:col + 3, :] = CHECKERBOARD[:, :, None]
        return out


class BlendedTrigger(TriggerSpec):
    """Blend toward a fixed pattern: x' = (1 - r) * x + r * pattern.

    The ratio differs between poisoning (``train``) and inference (``eval``).
    """

    kind = "blended"

    def __init__(self, pattern: np.ndarray, ratio_train: float = 0.1, ratio_eval: float = 0.2):
        for ratio in (ratio_train, ratio_eval):
            if not 0.0 <= ratio < 1.0:
                raise InvalidInputError(f"blend ratio {ratio} outside [0, 1)")
        self.pattern = np.clip(np.asarray(pattern, dtype=DTYPE), 0.0, 1.0)
        self.ratio_train = float(ratio_train)
        self.ratio_eval = float(ratio_eval)

    @classmethod
    def noise(
        cls,
        shape: Tuple[int, int, int],
        seed: int,
        ratio_train: float = 0.1,
        ratio_eval: float = 0.2,
    ) -> "BlendedTrigger":
        """Gaussian pseudo-noise pattern around mid-grey, clamped to [0, 1]."""
        pattern = rng_for(seed, "blend").normal(0.5, 0.25, size=shape)
        return cls(np.clip(pattern, 0.0, 1.0), ratio_train, ratio_eval)

    def ratio(self, phase: Phase) -> float:
        return self.ratio_train if phase == "train" else self.ratio_eval

    def apply(self, pixels: np.ndarray, phase: Phase = "train") -> np.ndarray:
        if tuple(pixels.shape[-3:]) != self.pattern.shape:
            raise InvalidInputError(
                f"blend pattern {self.pattern.shape} does not match images {pixels.shape[-3:]}"
            )
        r = self.ratio(phase)
        blended = (1.0 - r) * pixels.astype(DTYPE) + r * self.pattern
        return np.clip(blended, 0.0, 1.0).astype(DTYPE, copy=False)


def make_trigger(section, shape: Tuple[int, int, int]) -> TriggerSpec:
    """Build a trigger from a ``TriggerSection`` of the experiment config."""
    if section.kind == "patch":
        trigger = PatchTrigger(section.patch_anchor)
        trigger.region_mask(shape)
        return trigger
    return BlendedTrigger.noise(
        shape, section.blend_seed, section.blend_ratio_train, section.blend_ratio_eval
    )
