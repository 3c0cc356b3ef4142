"""Checkpoint directories.

Layout::

    <dir>/manifest.json     specs, config, counters, rng state, history,
                            tensor table (name, file, shape, sha256) and
                            ``manifest_hash`` over everything else
    <dir>/tensors/NNNN.bin  one little-endian float32 row-major blob per tensor

Saving the same state twice produces identical bytes.
"""

import errno
import hashlib
import json
import shutil
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .losses import FeatureExtractorSpec
from .model import Critic, CriticSpec, Generator, GeneratorSpec, NonFiniteError
from .training import TrainConfig, TrainState, _adam

FORMAT = "rmnet-checkpoint/1"
_LE_F32 = np.dtype("<f4")


class CorruptCheckpointError(ValueError):
    pass


class CheckpointWriteError(OSError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _optimizer_tensors(prefix, opt):
    sd = opt.state_dict()
    out = {}
    for pid in sorted(sd["state"]):
        for key in sorted(sd["state"][pid]):
            out[f"{prefix}/{pid}/{key}"] = sd["state"][pid][key]
    return out, sd["param_groups"]


def _all_tensors(state: TrainState):
    tensors = {}
    for prefix, module in (("generator", state.generator), ("critic", state.critic)):
        for k, v in module.state_dict().items():
            tensors[f"{prefix}/{k}"] = v
    groups = {}
    for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        t, groups[prefix] = _optimizer_tensors(prefix, opt)
        tensors.update(t)
    return tensors, groups


def _spec_to_json(spec):
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _spec_from_json(cls, d):
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def build_manifest(state: TrainState, blobs: dict) -> dict:
    tensors, groups = _all_tensors(state)
    table = []
    for i, (name, t) in enumerate(tensors.items()):
        if t.dtype != torch.float32:
            raise TypeError(f"tensor {name} has dtype {t.dtype}; checkpoints hold float32 only")
        data = t.detach().cpu().contiguous().numpy().astype(_LE_F32, copy=False).tobytes()
        fname = f"tensors/{i:04d}.bin"
        blobs[fname] = data
        table.append({"name": name, "file": fname, "shape": list(t.shape), "sha256": _sha(data)})
    manifest = {
        "format": FORMAT,
        "generator_spec": _spec_to_json(state.generator.spec),
        "critic_spec": _spec_to_json(state.critic.spec),
        "extractor_spec": _spec_to_json(state.extractor_spec),
        "extractor_identity": state.extractor_identity,
        "train_config": state.config.to_dict(),
        "seed": state.config.seed,
        "step": state.step,
        "critic_steps": state.critic_steps,
        "epoch": state.epoch,
        "cursor": state.cursor,
        "permutation": state.permutation,
        "rng_state": state.rng.bit_generator.state,
        "optimizer_groups": groups,
        "history": state.history,
        "tensors": table,
    }
    manifest["manifest_hash"] = _sha(_canonical(manifest))
    return manifest


def save_checkpoint(state: TrainState, path, verify_finite: bool = True) -> Path:
    path = Path(path)
    if verify_finite:
        for module in (state.generator, state.critic):
            for name, p in module.named_parameters():
                if not torch.isfinite(p).all():
                    raise NonFiniteError(f"refusing to checkpoint non-finite parameter {name}")
    blobs = {}
    manifest = build_manifest(state, blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / "tensors").mkdir()
        for fname, data in blobs.items():
            (tmp / fname).write_bytes(data)
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        if exc.errno == errno.ENOSPC:
            raise CheckpointWriteError(errno.ENOSPC, f"disk full while writing checkpoint {path}") from exc
        raise
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CorruptCheckpointError(f"{path} has no manifest.json") from exc
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{mpath} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CorruptCheckpointError(f"{mpath} is not a {FORMAT} manifest")
    stored = manifest.pop("manifest_hash", None)
    if stored != _sha(_canonical(manifest)):
        raise CorruptCheckpointError(f"manifest hash mismatch in {mpath}")
    manifest["manifest_hash"] = stored
    return manifest


def _read_tensors(path: Path, manifest: dict) -> dict:
    out = {}
    for entry in manifest["tensors"]:
        fpath = path / entry["file"]
        try:
            data = fpath.read_bytes()
        except OSError as exc:
            raise CorruptCheckpointError(f"cannot read {fpath}: {exc}") from exc
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if len(data) != expected:
            raise CorruptCheckpointError(f"{fpath} holds {len(data)} bytes, expected {expected}")
        if _sha(data) != entry["sha256"]:
            raise CorruptCheckpointError(f"{fpath} content hash mismatch")
        arr = np.frombuffer(data, dtype=_LE_F32).astype(np.float32).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def _split(tensors, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}


def _optimizer_state(tensors, prefix, groups):
    state = {}
    for key, t in _split(tensors, prefix).items():
        pid, name = key.split("/", 1)
        state.setdefault(int(pid), {})[name] = t
    return {"state": state, "param_groups": groups}


def load_checkpoint(path) -> TrainState:
    """Load and verify a checkpoint. Any inconsistency raises CorruptCheckpointError."""
    path = Path(path)
    manifest = read_manifest(path)
    tensors = _read_tensors(path, manifest)
    try:
        cfg = TrainConfig.from_dict(manifest["train_config"])
        generator = Generator(_spec_from_json(GeneratorSpec, manifest["generator_spec"]))
        critic = Critic(_spec_from_json(CriticSpec, manifest["critic_spec"]))
        generator.load_state_dict(_split(tensors, "generator"))
        critic.load_state_dict(_split(tensors, "critic"))
        opt_g = _adam(generator.parameters(), cfg.lr_generator, cfg)
        opt_d = _adam(critic.parameters(), cfg.lr_critic, cfg)
        groups = manifest["optimizer_groups"]
        opt_g.load_state_dict(_optimizer_state(tensors, "opt_g", groups["opt_g"]))
        opt_d.load_state_dict(_optimizer_state(tensors, "opt_d", groups["opt_d"]))
        rng = np.random.default_rng()
        rng.bit_generator.state = manifest["rng_state"]
        return TrainState(
            config=cfg,
            generator=generator,
            critic=critic,
            opt_g=opt_g,
            opt_d=opt_d,
            rng=rng,
            extractor_spec=_spec_from_json(FeatureExtractorSpec, manifest["extractor_spec"]),
            extractor_identity=manifest["extractor_identity"],
            step=manifest["step"],
            critic_steps=manifest["critic_steps"],
            epoch=manifest["epoch"],
            cursor=manifest["cursor"],
            permutation=manifest["permutation"],
            history=manifest["history"],
        )
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CorruptCheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc


def load_generator(path) -> Generator:
    gen = load_checkpoint(path).generator
    gen.eval()
    return gen
