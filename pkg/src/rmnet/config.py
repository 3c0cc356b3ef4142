"""Run configuration files.

A run is described by an INI file with one section per component::

    [run]        seed, output_dir
    [data]       root | synthetic, train_fraction, manifest
    [train]      TrainConfig fields (``lambda`` for the loss weight; image_size)
    [generator]  GeneratorSpec fields
    [critic]     CriticSpec fields
    [extractor]  FeatureExtractorSpec fields
    [masks]      MaskSourceConfig fields and ``fixed``
    [strokes]    StrokeSpec fields (the canvas follows image_size)
    [eval]       buckets, embedder settings, max_images, grid_samples

Unknown sections or keys are errors. All problems are collected and
reported together before any work starts. The only seed is ``[run] seed``;
every consumer gets its own child seed derived from it.
"""

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .losses import HALF_BLOCK3_CONV3, SMALL_BLOCK3_CONV3, VGG19_BLOCK3_CONV3, FeatureExtractorSpec
from .mask_synthesis import HoleRatioBucket, MaskSourceConfig, StrokeSpec
from .metrics import EmbeddingExtractorSpec
from .model import CriticSpec, GeneratorSpec
from .training import TrainConfig

CACHE_ENV = "RMNET_CACHE_DIR"

EXTRACTOR_PRESETS = {"vgg19": VGG19_BLOCK3_CONV3, "half": HALF_BLOCK3_CONV3, "small": SMALL_BLOCK3_CONV3}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class DataConfig:
    root: Optional[str] = None
    synthetic: int = 0
    train_fraction: float = 0.9
    manifest: Optional[str] = None


@dataclass(frozen=True)
class EvalConfig:
    buckets: Tuple[Tuple[float, float], ...] = ()
    embedder: str = "seeded_small_embedder"
    embedder_dim: int = 64
    embedder_checkpoint: Optional[str] = None
    max_images: int = 0
    grid_samples: int = 4
    max_tries: int = 200


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    critic: CriticSpec = field(default_factory=CriticSpec)
    extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    masks: MaskSourceConfig = field(default_factory=MaskSourceConfig)
    fixed_masks: bool = False
    eval: EvalConfig = field(default_factory=EvalConfig)

    def seeds(self):
        """Child seeds: (train, masks, split, eval)."""
        kids = np.random.SeedSequence(self.seed).spawn(4)
        return tuple(int(k.generate_state(1)[0] >> 1) for k in kids)

    @property
    def image_size(self):
        return tuple(self.train.image_size)

    def embedder_spec(self) -> EmbeddingExtractorSpec:
        ck = resolve_cached(self.eval.embedder_checkpoint)
        return EmbeddingExtractorSpec(self.eval.embedder, self.seeds()[3], self.eval.embedder_dim, ck)

    def extractor_spec(self) -> FeatureExtractorSpec:
        return replace(self.extractor, checkpoint=resolve_cached(self.extractor.checkpoint))


def resolve_cached(path: Optional[str]) -> Optional[str]:
    """Relative checkpoint paths are looked up in $RMNET_CACHE_DIR when set."""
    if path is None:
        return None
    p = Path(path)
    cache = os.environ.get(CACHE_ENV)
    if not p.is_absolute() and cache and not p.exists():
        return str(Path(cache) / p)
    return str(p)


# ---- parsing -------------------------------------------------------------

def _parse_tuple(text, conv):
    return tuple(conv(v.strip()) for v in text.replace("x", ",").split(",") if v.strip())


def _parse_bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_buckets(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, hi = part.split("-")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _parse_layers(text):
    text = text.strip()
    if text in EXTRACTOR_PRESETS:
        return EXTRACTOR_PRESETS[text]
    return tuple(v if v == "M" else int(v) for v in (s.strip() for s in text.split(",")) if v)


def _converter(default, name):
    if name == "buckets":
        return _parse_buckets
    if name == "layers":
        return _parse_layers
    if name == "num_strokes":
        return lambda t: int(t) if "," not in t else _parse_tuple(t, int)
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        conv = float if default and isinstance(default[0], float) else int
        return lambda t: _parse_tuple(t, conv)
    return lambda t: None if t.strip().lower() in ("", "none") else t.strip()


# section -> (dataclass, {ini key: field name}, keys not allowed in files)
_SECTIONS = {
    "data": (DataConfig, {}, ()),
    "train": (TrainConfig, {"lambda": "lam"}, ("seed",)),
    "generator": (GeneratorSpec, {}, ()),
    "critic": (CriticSpec, {}, ()),
    "extractor": (FeatureExtractorSpec, {}, ("seed",)),
    "masks": (MaskSourceConfig, {}, ("seed", "strokes", "target_size")),
    "strokes": (StrokeSpec, {}, ("canvas",)),
    "eval": (EvalConfig, {}, ()),
}


def _section_values(cls, key_map, banned, items, section, problems):
    names = {f.name: f for f in fields(cls)}
    inverse = {v: k for k, v in key_map.items()}
    out = {}
    for key, text in items:
        fname = key_map.get(key, key)
        if fname not in names or fname in banned or (fname in inverse and key != inverse[fname]):
            problems.append(f"[{section}] unknown key {key!r}")
            continue
        f = names[fname]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            out[fname] = _converter(default, fname)(text)
        except (ValueError, TypeError) as exc:
            problems.append(f"[{section}] {key} = {text!r}: {exc}")
    return out


def parse_config(text: str, overrides: Optional[dict] = None, check_paths: bool = True) -> RunConfig:
    """Parse and validate INI text. ``overrides`` may set ``seed`` / ``output_dir``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    problems: List[str] = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    values = {}
    for section in cp.sections():
        items = list(cp.items(section, raw=True))
        if section == "run":
            for key, val in items:
                if key == "seed":
                    try:
                        values["seed"] = int(val)
                    except ValueError:
                        problems.append(f"[run] seed = {val!r} is not an integer")
                elif key == "output_dir":
                    values["output_dir"] = None if val.strip().lower() in ("", "none") else val.strip()
                else:
                    problems.append(f"[run] unknown key {key!r}")
            continue
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        cls, key_map, banned = _SECTIONS[section]
        if section == "masks":
            items_m = [(k, v) for k, v in items if k != "fixed"]
            for k, v in items:
                if k == "fixed":
                    try:
                        values["fixed_masks"] = _parse_bool(v)
                    except ValueError as exc:
                        problems.append(f"[masks] fixed: {exc}")
            items = items_m
        values[section] = _section_values(cls, key_map, banned, items, section, problems)
    values.update(overrides or {})
    if problems:
        raise ConfigError(problems)
    return _build(values, problems, check_paths)


def _build(values, problems, check_paths) -> RunConfig:
    seed = values.get("seed", 0)
    base = RunConfig(seed=seed)
    train_seed, mask_seed, _, _ = base.seeds()

    def make(cls, kw, label):
        try:
            return cls(**kw)
        except (ValueError, TypeError) as exc:
            problems.append(f"[{label}] {exc}")
            return None

    data = make(DataConfig, values.get("data", {}), "data")
    train = make(TrainConfig, {**values.get("train", {}), "seed": train_seed}, "train")
    generator = make(GeneratorSpec, values.get("generator", {}), "generator")
    critic = make(CriticSpec, values.get("critic", {}), "critic")
    extractor = make(FeatureExtractorSpec, {**values.get("extractor", {}), "seed": 0}, "extractor")
    size = tuple(train.image_size) if train else (256, 256)
    strokes = make(StrokeSpec, {**values.get("strokes", {}), "canvas": size}, "strokes")
    masks = None
    if strokes is not None:
        masks = make(MaskSourceConfig, {**values.get("masks", {}), "seed": mask_seed,
                                        "strokes": strokes, "target_size": size}, "masks")
    ev = make(EvalConfig, values.get("eval", {}), "eval")
    if ev is not None:
        for lo, hi in ev.buckets:
            try:
                HoleRatioBucket(lo, hi)
            except ValueError as exc:
                problems.append(f"[eval] {exc}")
    if generator is not None and train is not None:
        try:
            generator.check_input_size(*train.image_size)
        except ValueError as exc:
            problems.append(f"[generator] {exc}")
    if data is not None:
        if bool(data.root) == bool(data.synthetic):
            problems.append("[data] set exactly one of root or synthetic")
        if check_paths and data.root and not Path(data.root).is_dir():
            problems.append(f"[data] root {data.root} does not exist")
        if check_paths and data.manifest and not Path(data.manifest).is_file():
            problems.append(f"[data] manifest {data.manifest} does not exist")
    if check_paths and masks is not None and masks.mode == "load_directory" \
            and not Path(masks.directory).is_dir():
        problems.append(f"[masks] directory {masks.directory} does not exist")
    if check_paths and extractor is not None and extractor.weights_source == "pretrained":
        ck = resolve_cached(extractor.checkpoint)
        if not Path(ck).is_file():
            problems.append(f"[extractor] checkpoint {ck} does not exist")
    if problems:
        raise ConfigError(problems)
    return RunConfig(seed=seed, output_dir=values.get("output_dir"), data=data, train=train,
                     generator=generator, critic=critic, extractor=extractor, masks=masks,
                     fixed_masks=values.get("fixed_masks", False), eval=ev)


def load_config(path, overrides: Optional[dict] = None, check_paths: bool = True) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return parse_config(text, overrides, check_paths)


# ---- serialisation -------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{a!r}-{b!r}" for a, b in v)
        return ", ".join(str(x) if not isinstance(x, float) else repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text; ``parse_config(dump_config(c)) == c``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"seed": str(cfg.seed), "output_dir": _fmt(cfg.output_dir)}
    objs = {"data": cfg.data, "train": cfg.train, "generator": cfg.generator, "critic": cfg.critic,
            "extractor": cfg.extractor, "masks": cfg.masks, "strokes": cfg.masks.strokes,
            "eval": cfg.eval}
    for section, obj in objs.items():
        cls, key_map, banned = _SECTIONS[section]
        inverse = {v: k for k, v in key_map.items()}
        cp[section] = {inverse.get(f.name, f.name): _fmt(getattr(obj, f.name))
                       for f in fields(cls) if f.name not in banned}
    cp["masks"]["fixed"] = _fmt(cfg.fixed_masks)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
