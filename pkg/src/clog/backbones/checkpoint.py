"""Single-file JSON checkpoints with base64-encoded parameter vectors.

Layout (format version 1)::

    {"format": "clog-checkpoint", "version": 1,
     "spec": {...BackboneSpec...},
     "vectors": {"<tag>": {"dtype": "float32", "length": n, "data": "<base64 little-endian>"}},
     "schedule": {"betas": [...]} | null,
     "metadata": {...}}

Diffusion backbones store one vector tagged ``eps``; GANs store ``generator``
and ``discriminator``.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch

from clog.backbones.base import GenerativeBackbone
from clog.backbones.diffusion import DiffusionBackbone, NoiseSchedule
from clog.backbones.factory import BackboneSpec, build_backbone
from clog.backbones.gan import GanBackbone
from clog.errors import InvalidInputError

FORMAT = "clog-checkpoint"
VERSION = 1


def _encode(vector: torch.Tensor) -> dict:
    arr = vector.detach().cpu().numpy().astype("<f4", copy=False)
    return {"dtype": "float32", "length": int(arr.size), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry: dict) -> torch.Tensor:
    if entry.get("dtype") != "float32":
        raise InvalidInputError(f"unsupported dtype {entry.get('dtype')!r}")
    arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f4")
    if arr.size != entry["length"]:
        raise InvalidInputError("corrupt parameter vector: length mismatch")
    return torch.from_numpy(arr.copy())


def _module_vector(module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for n, p in module.named_parameters() if "lora_" not in n])


def _load_module_vector(module, vector: torch.Tensor) -> None:
    params = [p for n, p in module.named_parameters() if "lora_" not in n]
    total = sum(p.numel() for p in params)
    if total != vector.numel():
        raise InvalidInputError(f"checkpoint vector has {vector.numel()} values, module expects {total}")
    offset = 0
    with torch.no_grad():
        for p in params:
            p.copy_(vector[offset : offset + p.numel()].view_as(p))
            offset += p.numel()


def save_checkpoint(path, backbone: GenerativeBackbone, **metadata) -> Path:
    if isinstance(backbone, GanBackbone):
        vectors = {"generator": _encode(_module_vector(backbone.generator)),
                   "discriminator": _encode(_module_vector(backbone.discriminator))}
        schedule = None
    elif isinstance(backbone, DiffusionBackbone):
        vectors = {"eps": _encode(backbone.flat_parameters())}
        schedule = {"betas": backbone.schedule.betas[1:].tolist()}
    else:
        raise InvalidInputError(f"cannot checkpoint {type(backbone).__name__}")
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "spec": backbone.spec.to_dict() if backbone.spec is not None else None,
        "vectors": vectors,
        "schedule": schedule,
        "metadata": metadata,
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path, backbone: GenerativeBackbone | None = None) -> tuple[GenerativeBackbone, dict]:
    """Restore into ``backbone`` or, if omitted, into one rebuilt from the stored spec."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise InvalidInputError(f"{path} is not a clog checkpoint")
    if doc.get("version") != VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {doc.get('version')}")
    if backbone is None:
        if doc["spec"] is None:
            raise InvalidInputError("checkpoint has no spec; pass a backbone to load into")
        backbone = build_backbone(BackboneSpec(**doc["spec"]), seed=0)
    vectors = {tag: _decode(entry) for tag, entry in doc["vectors"].items()}
    if isinstance(backbone, GanBackbone):
        _load_module_vector(backbone.generator, vectors["generator"])
        _load_module_vector(backbone.discriminator, vectors["discriminator"])
    else:
        backbone.set_flat_parameters(vectors["eps"])
        if doc.get("schedule"):
            backbone.schedule = NoiseSchedule.from_betas(doc["schedule"]["betas"])
    return backbone, doc["metadata"]
