"""
Linear forward operators A and pixel-permutation transform groups for
self-supervised learning on incomplete measurements (inpainting).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from gr2r.exceptions import ConfigError, ShapeError
from gr2r.nef_models import ArrayLike, ImageTensor, NoiseModel, as_image
from gr2r.splitters import SplitPair, split

logger = logging.getLogger(__name__)

OP_IDENTITY = 'identity'
OP_MASK = 'binary-mask'
OP_DENSE = 'dense'

SHIFT = 'shift'
ROTATE = 'rot90'
FLIP = 'flip'


def _check_trailing(x: np.ndarray, shape: Tuple[int, ...], what: str):
    if tuple(x.shape[x.ndim - len(shape):]) != tuple(shape) or x.ndim < len(shape):
        raise ShapeError(f"{what} shape {x.shape} does not end with {tuple(shape)}")


def encode_mask_rle(mask: np.ndarray) -> dict:
    """Run-length encode a flat 0/1 mask, starting with a run of zeros."""
    flat = np.asarray(mask).ravel().astype(np.int8)
    runs, current, count = [], 0, 0
    for bit in flat:
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(bit), 1
    runs.append(count)
    return {'shape': list(np.shape(mask)), 'runs': runs}


def decode_mask_rle(doc: dict) -> np.ndarray:
    shape = tuple(doc['shape'])
    bits, value = [], 0
    for run in doc['runs']:
        bits.extend([value] * int(run))
        value = 1 - value
    if len(bits) != int(np.prod(shape)):
        raise ConfigError(f"Mask runs cover {len(bits)} entries, expected {int(np.prod(shape))}")
    return np.asarray(bits, dtype=np.float64).reshape(shape)


@dataclass
class ForwardOperator:
    kind: str
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    mask: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.output_shape = tuple(self.output_shape)
        if self.kind == OP_MASK:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise ConfigError("Mask entries must be 0 or 1")
            if self.mask.shape != self.input_shape or self.input_shape != self.output_shape:
                raise ShapeError(f"Mask shape {self.mask.shape} does not match {self.input_shape}")
        elif self.kind == OP_DENSE:
            self.matrix = np.asarray(self.matrix, dtype=np.float64)
            expected = (int(np.prod(self.output_shape)), int(np.prod(self.input_shape)))
            if self.matrix.shape != expected:
                raise ShapeError(f"Matrix shape {self.matrix.shape} does not match {expected}")
        elif self.kind == OP_IDENTITY:
            if self.input_shape != self.output_shape:
                raise ShapeError("Identity operator needs equal input and output shapes")
        else:
            raise ConfigError(f"Unknown operator kind '{self.kind}'")

    @classmethod
    def identity(cls, shape: Sequence[int]) -> 'ForwardOperator':
        return cls(OP_IDENTITY, tuple(shape), tuple(shape))

    @classmethod
    def from_mask(cls, mask: ArrayLike) -> 'ForwardOperator':
        mask = as_image(mask)
        return cls(OP_MASK, mask.shape, mask.shape, mask=mask)

    @classmethod
    def from_matrix(cls, matrix: ArrayLike, input_shape: Sequence[int],
                    output_shape: Sequence[int]) -> 'ForwardOperator':
        return cls(OP_DENSE, tuple(input_shape), tuple(output_shape), matrix=matrix)

    def apply(self, x: ArrayLike) -> np.ndarray:
        """A x; leading axes beyond input_shape are a batch."""
        x = as_image(x)
        _check_trailing(x, self.input_shape, 'Operator input')
        if self.kind == OP_IDENTITY:
            return x.copy()
        if self.kind == OP_MASK:
            return self.mask * x
        batch = x.shape[:x.ndim - len(self.input_shape)]
        flat = x.reshape(batch + (-1,))
        return (flat @ self.matrix.T).reshape(batch + self.output_shape)

    def adjoint(self, y: ArrayLike) -> np.ndarray:
        y = as_image(y)
        _check_trailing(y, self.output_shape, 'Operator adjoint input')
        if self.kind == OP_IDENTITY:
            return y.copy()
        if self.kind == OP_MASK:
            return self.mask * y
        batch = y.shape[:y.ndim - len(self.output_shape)]
        flat = y.reshape(batch + (-1,))
        return (flat @ self.matrix).reshape(batch + self.input_shape)

    def dense(self) -> np.ndarray:
        """Explicit matrix of the operator."""
        if self.kind == OP_DENSE:
            return self.matrix.copy()
        n = int(np.prod(self.input_shape))
        if self.kind == OP_IDENTITY:
            return np.eye(n)
        return np.diag(self.mask.ravel())

    @property
    def observed_fraction(self) -> float:
        if self.kind == OP_MASK:
            return float(self.mask.mean())
        return 1.0

    def to_dict(self) -> dict:
        doc = {'kind': self.kind, 'input_shape': list(self.input_shape),
               'output_shape': list(self.output_shape)}
        if self.kind == OP_MASK:
            doc['mask'] = encode_mask_rle(self.mask)
        elif self.kind == OP_DENSE:
            doc['matrix'] = self.matrix.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> 'ForwardOperator':
        kind = doc['kind']
        if kind == OP_MASK:
            return cls.from_mask(decode_mask_rle(doc['mask']))
        if kind == OP_DENSE:
            return cls.from_matrix(doc['matrix'], doc['input_shape'], doc['output_shape'])
        return cls.identity(doc['input_shape'])


def make_bernoulli_mask(shape: Sequence[int], p: float, seed: int) -> ForwardOperator:
    """
    Mask with i.i.d. Bernoulli(p) entries, 0 < p < 1; the same seed gives the
    same mask. A fully observed problem uses ForwardOperator.identity.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"Mask probability must lie in (0, 1), got {p}")
    rng = np.random.default_rng(seed)
    mask = (rng.random(tuple(shape)) < p).astype(np.float64)
    logger.debug(f"Bernoulli mask p={p} seed={seed}: {mask.mean():.4f} observed")
    return ForwardOperator.from_mask(mask)


@dataclass(frozen=True)
class Transform:
    """Periodic shift, 90-degree rotation or flip of the last two axes."""
    kind: str
    shift: Tuple[int, int] = (0, 0)
    quarter_turns: int = 0
    axis: int = 0

    def __post_init__(self):
        if self.kind not in (SHIFT, ROTATE, FLIP):
            raise ConfigError(f"Unknown transform '{self.kind}'")
        if self.kind == FLIP and self.axis not in (0, 1):
            raise ConfigError(f"Flip axis must be 0 or 1, got {self.axis}")

    @classmethod
    def identity(cls) -> 'Transform':
        return cls(SHIFT, (0, 0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = as_image(x)
        if x.ndim < 2:
            raise ShapeError(f"Transforms act on images, got shape {x.shape}")
        if self.kind == SHIFT:
            return np.roll(x, self.shift, axis=(-2, -1))
        if self.kind == ROTATE:
            if x.shape[-1] != x.shape[-2]:
                raise ShapeError(f"Rotation needs a square image, got {x.shape[-2:]}")
            return np.rot90(x, self.quarter_turns, axes=(-2, -1)).copy()
        return np.flip(x, axis=x.ndim - 2 + self.axis).copy()

    def inverse(self) -> 'Transform':
        if self.kind == SHIFT:
            return Transform(SHIFT, (-self.shift[0], -self.shift[1]))
        if self.kind == ROTATE:
            return Transform(ROTATE, quarter_turns=(-self.quarter_turns) % 4)
        return self


@dataclass
class TransformGroup:
    elements: List[Transform] = field(default_factory=list)

    def __post_init__(self):
        if not self.elements:
            raise ConfigError("Transform group must have at least one element")

    @classmethod
    def shifts(cls, max_shift: int) -> 'TransformGroup':
        """All periodic shifts with |dy|, |dx| <= max_shift."""
        offsets = range(-max_shift, max_shift + 1)
        return cls([Transform(SHIFT, (dy, dx)) for dy in offsets for dx in offsets])

    @classmethod
    def rotations(cls) -> 'TransformGroup':
        return cls([Transform(ROTATE, quarter_turns=k) for k in range(4)])

    @classmethod
    def from_names(cls, names: Sequence[str], max_shift: int = 2) -> 'TransformGroup':
        elements: List[Transform] = []
        for name in names:
            if name == 'shifts':
                elements.extend(cls.shifts(max_shift).elements)
            elif name == 'rotations':
                elements.extend(cls.rotations().elements)
            elif name == 'flips':
                elements.extend([Transform(FLIP, axis=0), Transform(FLIP, axis=1)])
            else:
                raise ConfigError(f"Unknown transform family '{name}'")
        return cls(elements)

    def sample(self, rng: np.random.Generator) -> Transform:
        return self.elements[int(rng.integers(len(self.elements)))]

    def __len__(self):
        return len(self.elements)


def apply_operator(A: ForwardOperator, x: ArrayLike) -> np.ndarray:
    return A.apply(x)


def adjoint_operator(A: ForwardOperator, y: ArrayLike) -> ImageTensor:
    return A.adjoint(y)


def apply_transform(transform: Transform, x: ArrayLike) -> ImageTensor:
    return transform.apply(x)


def split_observed(model: NoiseModel, A: ForwardOperator, y: ArrayLike, alpha: float,
                   rng: np.random.Generator):
    """
    Split a masked measurement on its observed entries only; unobserved
    entries of y1 and y2 are zero.
    """
    y = as_image(y)
    if A.kind != OP_MASK:
        return split(model, y, alpha, rng)
    observed = A.mask.astype(bool)
    _check_trailing(y, A.output_shape, 'Measurement')
    observed = np.broadcast_to(observed, y.shape)
    pair = split(model, y[observed], alpha, rng)
    y1 = np.zeros_like(y)
    y2 = np.zeros_like(y)
    y1[observed] = pair.y1
    y2[observed] = pair.y2
    return SplitPair(y1=y1, y2=y2, alpha=pair.alpha)
