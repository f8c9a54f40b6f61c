"""Four-stage Pyramid Transformer backbone producing the feature pyramid F1..F4."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .blocks import NormalBlockParams, PyramidBlockParams, StageConfig, normal_block, pyramid_block
from .module import Module
from .serialization import ContainerError, load_tensors, save_tensors
from .tensor import Tensor, concat
from .transformer import DropPath, Linear, PositionalEmbedding, attach_class_and_pos, img2seq, seq2img

FINGERPRINT_BYTES = 32
CLASS_TOKEN_STD = 0.02

_LIST_KEYS = ("dims", "reduction_ratios", "num_heads", "nb_depths", "ffn_expansion")
_SCALAR_KEYS = ("input_channels", "class_token_stage", "seed", "prm_kernel")
_KEY_ORDER = (
    "input_channels",
    "image_size",
    "class_token_stage",
    "seed",
    "dims",
    "reduction_ratios",
    "num_heads",
    "nb_depths",
    "ffn_expansion",
    "prm_kernel",
    "dilations_1",
    "dilations_2",
    "dilations_3",
    "dilations_4",
)


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageConfig, ...]
    input_channels: int = 3
    image_size: tuple[int, int] = (256, 256)
    class_token_stage: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if len(self.stages) != 4:
            raise ValueError(f"stages: exactly 4 stages required, got {len(self.stages)}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be positive, got {self.input_channels}")
        prev = self.input_channels
        for i, st in enumerate(self.stages, start=1):
            if st.reduction_ratio not in (2, 4):
                raise ValueError(f"stage {i} reduction_ratio must be 2 or 4, got {st.reduction_ratio}")
            if st.dim_in != prev:
                raise ValueError(f"stage {i} dim_in {st.dim_in} does not chain from previous dim {prev}")
            prev = st.dim_out
        if not 1 <= self.class_token_stage <= 4:
            raise ValueError(f"class_token_stage must be in 1..4, got {self.class_token_stage}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned int, got {self.seed}")
        total = self.total_stride
        h, w = self.image_size
        if h % total or w % total:
            raise ValueError(f"image_size {self.image_size} is not a multiple of the total stride {total}")

    @property
    def strides(self) -> tuple[int, ...]:
        out, acc = [], 1
        for st in self.stages:
            acc *= st.reduction_ratio
            out.append(acc)
        return tuple(out)

    @property
    def total_stride(self) -> int:
        return self.strides[-1]

    def to_text(self) -> str:
        """Canonical ``key = value`` encoding (also the fingerprint input)."""
        st = self.stages

        def fmt(v):
            return f"{float(v):g}" if isinstance(v, float) else str(int(v))

        values = {
            "input_channels": fmt(self.input_channels),
            "image_size": f"{self.image_size[0]}, {self.image_size[1]}",
            "class_token_stage": fmt(self.class_token_stage),
            "seed": fmt(self.seed),
            "dims": ", ".join(fmt(s.dim_out) for s in st),
            "reduction_ratios": ", ".join(fmt(s.reduction_ratio) for s in st),
            "num_heads": ", ".join(fmt(s.num_heads) for s in st),
            "nb_depths": ", ".join(fmt(s.nb_depth) for s in st),
            "ffn_expansion": ", ".join(fmt(float(s.ffn_expansion)) for s in st),
            "prm_kernel": fmt(st[0].prm_kernel),
        }
        for i, s in enumerate(st, start=1):
            values[f"dilations_{i}"] = ", ".join(fmt(d) for d in s.dilations)
        return "".join(f"{k} = {values[k]}\n" for k in _KEY_ORDER)

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()[:FINGERPRINT_BYTES]

    def replace(self, **changes) -> "BackboneConfig":
        return parse_config(self.to_text(), **changes)


def _parse_list(key: str, raw: str, cast=int) -> list:
    try:
        return [cast(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_config(text: str, **overrides) -> BackboneConfig:
    """Parse flat ``key = value`` text; unknown keys are rejected.

    ``overrides`` replace parsed entries before validation; list values may be
    given as Python sequences (e.g. ``nb_depths=(0, 0, 0, 0)``).
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_ORDER:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = value
    for key, value in overrides.items():
        if key not in _KEY_ORDER:
            raise ValueError(f"unknown config key {key!r}")
        raw[key] = ", ".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)
    missing = [k for k in _KEY_ORDER if k not in raw and k != "prm_kernel"]
    if missing:
        raise ValueError(f"config missing keys: {', '.join(missing)}")

    lists = {k: _parse_list(k, raw[k], float if k == "ffn_expansion" else int) for k in _LIST_KEYS}
    if len(lists["ffn_expansion"]) == 1:
        lists["ffn_expansion"] *= 4
    for k, v in lists.items():
        if len(v) != 4:
            raise ValueError(f"config key {k!r}: expected 4 per-stage values, got {len(v)}")
    scalars = {}
    for k in _SCALAR_KEYS:
        if k in raw:
            try:
                scalars[k] = int(raw[k])
            except ValueError as exc:
                raise ValueError(f"config key {k!r}: expected an integer, got {raw[k]!r}") from exc
    size = _parse_list("image_size", raw["image_size"])
    if len(size) == 1:
        size = size * 2
    if len(size) != 2:
        raise ValueError(f"config key 'image_size': expected H, W, got {raw['image_size']!r}")

    stages = []
    dim_in = scalars["input_channels"]
    for i in range(4):
        try:
            stages.append(
                StageConfig(
                    dim_in=dim_in,
                    dim_out=lists["dims"][i],
                    reduction_ratio=lists["reduction_ratios"][i],
                    dilations=tuple(_parse_list(f"dilations_{i + 1}", raw[f"dilations_{i + 1}"])),
                    num_heads=lists["num_heads"][i],
                    nb_depth=lists["nb_depths"][i],
                    ffn_expansion=lists["ffn_expansion"][i],
                    prm_kernel=scalars.get("prm_kernel", 3),
                )
            )
        except ValueError as exc:
            raise ValueError(f"stage {i + 1}: {exc}") from None
        dim_in = lists["dims"][i]
    return BackboneConfig(
        stages=tuple(stages),
        input_channels=scalars["input_channels"],
        image_size=(size[0], size[1]),
        class_token_stage=scalars["class_token_stage"],
        seed=scalars["seed"],
    )


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("pyramid_transformer") / "configs" / name))


def load_config(path: str | os.PathLike, **overrides) -> BackboneConfig:
    """Read a config file; a bare bundled name such as ``default.cfg`` also works."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_config_path(p.name)
        if p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), **overrides)


def default_config(**overrides) -> BackboneConfig:
    return load_config(bundled_config_path("default.cfg"), **overrides)


# --------------------------------------------------------------------- model


class Stage(Module):
    def __init__(self, index: int, cfg: StageConfig, bcfg: BackboneConfig, rng: np.random.Generator, dtype):
        self._index = index
        self._cfg = cfg
        self.pb = PyramidBlockParams(cfg, rng, dtype)
        self.nbs = [NormalBlockParams(cfg, rng, dtype) for _ in range(cfg.nb_depth)]
        self._buffers = ()
        stage_no = index + 1
        if stage_no == bcfg.class_token_stage:
            h, w = bcfg.image_size
            stride = bcfg.strides[index]
            self.pos = PositionalEmbedding((h // stride, w // stride), cfg.dim_out, True, rng, dtype)
            self.cls_token = (rng.standard_normal((1, 1, cfg.dim_out)) * CLASS_TOKEN_STD).astype(dtype)
            self._buffers = ("cls_token",)
        elif stage_no > bcfg.class_token_stage:
            self.cls_proj = Linear(cfg.dim_in, cfg.dim_out, rng, dtype)

    @property
    def config(self) -> StageConfig:
        return self._cfg


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, dtype=np.float32):
        self._cfg = cfg
        self._dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.stages = [Stage(i, st, cfg, rng, dtype) for i, st in enumerate(cfg.stages)]

    @property
    def config(self) -> BackboneConfig:
        return self._cfg

    @property
    def dtype(self):
        return self._dtype

    def __call__(self, image, mode: str = "eval", drop_path: DropPath | None = None) -> "FeaturePyramid":
        return forward_pyramid(self, image, mode, drop_path)


@dataclass
class FeaturePyramid:
    features: list[Tensor] = field(default_factory=list)
    class_token_out: Tensor | None = None

    @property
    def F1(self) -> Tensor:
        return self.features[0]

    @property
    def F2(self) -> Tensor:
        return self.features[1]

    @property
    def F3(self) -> Tensor:
        return self.features[2]

    @property
    def F4(self) -> Tensor:
        return self.features[3]


def build_backbone(cfg: BackboneConfig, dtype=np.float32) -> Backbone:
    """Deterministically initialize a backbone from ``cfg.seed``."""
    return Backbone(cfg, dtype)


def forward_pyramid(
    model: Backbone,
    image,
    mode: str = "eval",
    drop_path: DropPath | None = None,
) -> FeaturePyramid:
    """Run all four stages and collect ``F1..F4`` (class token reported separately)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=model.dtype)
    if x.dtype != model.dtype:
        x = x.astype(model.dtype)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ValueError(f"image must be [B, {cfg.input_channels}, H, W], got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("image contains non-finite values")
    mult = cfg.total_stride
    h, w = x.shape[2:]
    if h % mult or w % mult:
        raise ValueError(f"image size {h}x{w} must be a multiple of {mult} in both axes")

    features = []
    cls = None
    for idx, stage in enumerate(model.stages):
        st = stage.config
        fmap = pyramid_block(x, st, stage.pb, train, drop_path)
        seq = img2seq(fmap)
        stage_no = idx + 1
        if stage_no == cfg.class_token_stage:
            seq = attach_class_and_pos(seq, Tensor(stage.cls_token), stage.pos)
        elif cls is not None:
            projected = stage.cls_proj(cls)
            seq = type(seq)(concat([seq.tokens, projected], axis=1), True, seq.spatial_hw)
        for nb in stage.nbs:
            seq = normal_block(seq, st, nb, train, drop_path)
        cls = seq.class_token()
        x = seq2img(seq)
        features.append(x)
    return FeaturePyramid(features=features, class_token_out=cls)


def param_count(model: Module) -> int:
    """Number of learnable scalars (batch-norm running stats and the fixed class token excluded)."""
    return model.num_parameters()


# --------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Backbone, path: str | os.PathLike, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the config fingerprint followed by a PYTF1 container of all parameters and buffers."""
    tensors = model.state_dict()
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors, prefix=model.config.fingerprint())


def _stage_of(name: str) -> int | None:
    parts = name.split(".")
    if len(parts) > 1 and parts[0] == "stages" and parts[1].isdigit():
        return int(parts[1]) + 1
    return None


def _describe_mismatch(stored: dict[str, np.ndarray], expected: dict[str, np.ndarray]) -> str:
    names = sorted(set(stored) | set(expected), key=lambda n: (_stage_of(n) or 99, n))
    for name in names:
        a, b = stored.get(name), expected.get(name)
        if a is None or b is None or a.shape != b.shape:
            stage = _stage_of(name)
            where = f"stage {stage}" if stage else "non-stage tensors"
            got = "absent" if a is None else a.shape
            want = "absent" if b is None else b.shape
            return f"mismatch in {where}: tensor {name!r} stored {got}, config expects {want}"
    return "tensor shapes agree; other config fields (seed, image_size, dilations or class token stage) differ"


def read_checkpoint(path: str | os.PathLike, cfg: BackboneConfig) -> dict[str, np.ndarray]:
    """Return the stored tensors after verifying the config fingerprint."""
    try:
        prefix, tensors = load_tensors(path, prefix_len=FINGERPRINT_BYTES)
    except ContainerError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if prefix != cfg.fingerprint():
        expected = {k: v for k, v in build_backbone(cfg).state_dict().items()}
        stored = {k: v for k, v in tensors.items() if _stage_of(k) is not None}
        raise CheckpointError(
            f"{path}: config fingerprint mismatch; {_describe_mismatch(stored, expected)}"
        )
    return tensors


def load_checkpoint(path: str | os.PathLike, cfg: BackboneConfig) -> Backbone:
    tensors = read_checkpoint(path, cfg)
    model = build_backbone(cfg)
    own = set(model.state_dict())
    model.load_state_dict({k: v for k, v in tensors.items() if k in own})
    return model
