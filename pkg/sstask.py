"""Rotation pretext task over the class x transform joint label space."""
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import ShapeError

ROTATIONS = (0, 1, 2, 3)  # quarter turns clockwise


class JointLabelSpace(BaseModel):
    model_config = ConfigDict(frozen=True)
    num_classes: int = Field(ge=1)
    num_transforms: int = Field(4, ge=1, le=4)

    @property
    def size(self) -> int:
        return self.num_classes * self.num_transforms

    def encode(self, n: int, m: int) -> int:
        if not (0 <= n < self.num_classes and 0 <= m < self.num_transforms):
            raise ShapeError(f"joint label ({n}, {m}) outside {self.num_classes}x{self.num_transforms}")
        return n * self.num_transforms + m

    def decode(self, k: int) -> Tuple[int, int]:
        if not 0 <= k < self.size: raise ShapeError(f"joint index {k} outside [0, {self.size})")
        return divmod(k, self.num_transforms)


def rotate(image: np.ndarray, m: int) -> np.ndarray:
    """m quarter turns clockwise on the last two axes: out[r, c] = in[H-1-c, r] per step."""
    if m not in ROTATIONS: raise ShapeError(f"rotation id must be in {ROTATIONS}, got {m}")
    if m % 2 and image.shape[-1] != image.shape[-2]: raise ShapeError("odd rotations need square images")
    return np.ascontiguousarray(np.rot90(image, k=-m, axes=(-2, -1)))


def joint_one_hot(n: int, m: int, space: JointLabelSpace) -> np.ndarray:
    out = np.zeros(space.size)
    out[space.encode(n, m)] = 1.0
    return out


def joint_one_hot_batch(joint: np.ndarray, space: JointLabelSpace) -> np.ndarray:
    out = np.zeros((len(joint), space.size))
    out[np.arange(len(joint)), joint] = 1.0
    return out


def expand_batch(x: np.ndarray, labels: np.ndarray, space: JointLabelSpace):
    """Transform-major expansion: block j holds every sample rotated by j, labelled n*M + j."""
    M = space.num_transforms
    x_rot = np.concatenate([rotate(x, j) for j in range(M)], axis=0)
    rot = np.repeat(np.arange(M), len(labels))
    joint = np.tile(np.asarray(labels), M) * M + rot
    return x_rot, joint, rot
