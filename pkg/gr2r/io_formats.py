"""
File formats: portable float map images, JSON run configs, JSON-lines
metrics, deterministic JSON reports and the alpha-sweep CSV.
"""

import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gr2r.exceptions import ConfigError, ShapeError
from gr2r.nef_models import BINOMIAL, ArrayLike, ImageTensor, NoiseModel, as_image

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['alpha', 'loss_name', 'psnr_db', 'seed']
MAX_DIMENSION = 1 << 20


# -- portable float map ---------------------------------------------------------

def write_image(path: str, image: ArrayLike, little_endian: bool = True):
    """Write a gray (H, W) or color (H, W, 3) PFM file, rows bottom to top."""
    image = as_image(image)
    if image.ndim == 2:
        header = 'Pf'
    elif image.ndim == 3 and image.shape[2] == 3:
        header = 'PF'
    else:
        raise ShapeError(f"PFM images must be (H, W) or (H, W, 3), got {image.shape}")
    height, width = image.shape[:2]
    dtype = '<f4' if little_endian else '>f4'
    scale = '-1.0' if little_endian else '1.0'
    payload = np.flipud(image).astype(dtype).tobytes()
    with open(path, 'wb') as f:
        f.write(f"{header}\n{width} {height}\n{scale}\n".encode('ascii'))
        f.write(payload)


def read_image(path: str) -> ImageTensor:
    """Read a PFM file into a float64 array with the top row first."""
    with open(path, 'rb') as f:
        header = f.readline().rstrip()
        if header == b'PF':
            channels = 3
        elif header == b'Pf':
            channels = 1
        else:
            raise ConfigError(f"{path}: not a PFM file (header {header!r})")

        dim_match = re.match(rb'^(\d+)\s+(\d+)\s*$', f.readline())
        if not dim_match:
            raise ConfigError(f"{path}: malformed PFM dimensions")
        width, height = map(int, dim_match.groups())
        if width == 0 or height == 0 or width > MAX_DIMENSION or height > MAX_DIMENSION:
            raise ConfigError(f"{path}: PFM dimensions {width}x{height} out of range")

        try:
            scale = float(f.readline().strip())
        except ValueError as e:
            raise ConfigError(f"{path}: malformed PFM scale line") from e
        if scale == 0.0:
            raise ConfigError(f"{path}: PFM scale must be nonzero")
        dtype = '<f4' if scale < 0 else '>f4'

        count = width * height * channels
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size < count:
        raise ConfigError(f"{path}: truncated PFM payload ({data.size} of {count} values)")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data[:count].reshape(shape)).astype(np.float64)


def psnr(x_hat: ArrayLike, x_ref: ArrayLike, peak: float = 1.0) -> float:
    """10 log10(peak^2 n / ||x_hat - x_ref||^2); inf on exact match."""
    x_hat = as_image(x_hat)
    x_ref = as_image(x_ref)
    if x_hat.shape != x_ref.shape:
        raise ShapeError(f"PSNR shapes {x_hat.shape} and {x_ref.shape} differ")
    err = float(np.sum((x_hat - x_ref) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 * x_ref.size / err)


# -- run configuration ----------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ModelSpec(_Strict):
    family: str
    params: Dict[str, float] = {}

    def build(self) -> NoiseModel:
        return NoiseModel.from_dict({'family': self.family, 'params': self.params})

    @model_validator(mode='after')
    def check_model(self):
        self.build()
        return self


class EstimatorSpec(_Strict):
    kind: str = 'affine'
    range_map: str = 'none'
    per_pixel: bool = False
    degree: int = 2
    kernel_size: int = 3


class TrainSpec(_Strict):
    step_size: float = 0.5
    epochs: int = 100
    batch_size: int = 64
    gradient_mode: str = 'analytic'


class DatasetSpec(_Strict):
    kind: str = 'synthetic'
    n_train: int = 16
    n_test: int = 4
    height: Optional[int] = None
    width: Optional[int] = None
    clean_glob: Optional[str] = None

    @field_validator('kind')
    @classmethod
    def check_kind(cls, v):
        if v not in ('synthetic', 'files'):
            raise ValueError(f"dataset kind must be 'synthetic' or 'files', got {v!r}")
        return v


class InpaintSpec(_Strict):
    """Mask probability p in (0, 1]; p = 1 selects the identity operator instead of a mask."""
    p: float = 0.9
    mask_seed: Optional[int] = None
    transforms: List[str] = ['shifts']
    max_shift: int = 2
    ei_weight: float = 1.0

    @field_validator('p')
    @classmethod
    def check_p(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"mask probability must lie in (0, 1], got {v}")
        return v


class MomentsRunSpec(_Strict):
    noise: str = 'log-rayleigh'
    sigma: float = 0.1
    n: int = 100000
    k: int = 3
    tau: float = 1.0
    input: Optional[str] = None


class RunConfig(_Strict):
    model: ModelSpec
    alpha: Optional[float] = None
    alphas: Optional[List[float]] = None
    J: Optional[int] = None
    loss: str = 'gr2r_mse'
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    train: TrainSpec = Field(default_factory=TrainSpec)
    seed: int = 0
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    inpaint: Optional[InpaintSpec] = None
    moments: Optional[MomentsRunSpec] = None
    record_timing: bool = False

    @field_validator('alpha')
    @classmethod
    def check_alpha(cls, v):
        if v is not None and not 0.0 < v < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {v}")
        return v

    @field_validator('alphas')
    @classmethod
    def check_alphas(cls, v):
        if v is not None:
            if not v:
                raise ValueError("alphas must not be empty")
            bad = [a for a in v if not 0.0 < a < 1.0]
            if bad:
                raise ValueError(f"alphas must lie in (0, 1), got {bad}")
        return v

    @field_validator('J')
    @classmethod
    def check_j(cls, v):
        if v is not None and v < 1:
            raise ValueError(f"J must be >= 1, got {v}")
        return v

    @model_validator(mode='after')
    def check_binomial_alpha(self):
        noise = self.model.build()
        if noise.family == BINOMIAL:
            for a in ([self.alpha] if self.alpha is not None else []) + list(self.alphas or []):
                prod = noise.looks * a
                if abs(prod - round(prod)) > 1e-9:
                    raise ValueError(f"looks * alpha must be an integer (looks={noise.looks}, alpha={a})")
        return self

    def noise_model(self) -> NoiseModel:
        return self.model.build()


def parse_run_config(text: str) -> RunConfig:
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, 'r') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read run config {path}: {e}") from e
    return parse_run_config(text)


def serialize_run_config(cfg: RunConfig) -> str:
    return dumps_deterministic(cfg.model_dump())


# -- deterministic JSON -----------------------------------------------------------

def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        if math.isnan(value):
            return 'nan'
        return value
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_deterministic(obj: Any, indent: Optional[int] = 2) -> str:
    """
    Sorted keys and non-finite floats as strings. Finite floats are written
    with repr, the shortest text that parses back to the same double; it never
    needs more than 17 significant digits and identifies exactly the value a
    %.17g rendering would.
    """
    return json.dumps(_jsonable(obj), sort_keys=True, indent=indent, ensure_ascii=False)


def write_json(path: str, obj: Any):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(dumps_deterministic(obj))
        f.write('\n')


# -- metrics --------------------------------------------------------------------

@dataclass
class MetricsRecord:
    run_id: str
    loss_name: str
    alpha: Optional[float]
    psnr_db: Union[float, str]
    loss_curve: List[float] = field(default_factory=list)
    seed: int = 0
    wall_ms: Optional[float] = None

    def to_json_line(self) -> str:
        return dumps_deterministic(asdict(self), indent=None)

    @classmethod
    def from_json_line(cls, line: str) -> 'MetricsRecord':
        doc = json.loads(line)
        if doc.get('psnr_db') == 'inf':
            doc['psnr_db'] = math.inf
        return cls(**doc)


def append_metrics(path: str, record: MetricsRecord):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'a', encoding='utf-8', newline='\n') as f:
        f.write(record.to_json_line() + '\n')


def read_metrics(path: str) -> List[MetricsRecord]:
    with open(path, 'r', encoding='utf-8') as f:
        return [MetricsRecord.from_json_line(line) for line in f if line.strip()]


def write_sweep_csv(path: str, rows: List[Dict[str, Any]]):
    """alpha, loss_name, psnr_db, seed; one row per alpha."""
    df = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    df.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Wrote {len(df)} sweep rows to {path}")
