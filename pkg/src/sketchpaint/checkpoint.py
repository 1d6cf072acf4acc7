"""Versioned, checksummed checkpoint container.

Layout: ``MAGIC | u64 header length | JSON header | tensor blob | sha256 of all preceding bytes``.
The header lists every tensor (name, group, dtype, shape, offset, nbytes) together
with the denoiser config, training step, RNG state and a config snapshot.
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import IntegrityError, VersionError
from .model import InpaintModel, partition_parameters
from .unet import UNetConfig
from .vae import IdentityVAE, PoolVAE, ToyVAE

MAGIC = b"SKPCKPT\x00"
FORMAT_VERSION = 1
_DIGEST = 32


def _vae_kind(vae) -> str:
    if vae is None:
        return "none"
    if isinstance(vae, ToyVAE):
        return "toy"
    if isinstance(vae, PoolVAE):
        return "pool"
    if isinstance(vae, IdentityVAE):
        return "identity"
    raise TypeError(f"unsupported vae {type(vae).__name__}")


def save_checkpoint(model: InpaintModel, path, vae=None, config=None, step: int = 0,
                    generator: Optional[torch.Generator] = None, rng: Optional[np.random.Generator] = None) -> Path:
    path = Path(path)
    frozen, trainable = partition_parameters(model)
    entries, chunks, offset = [], [], 0
    tensors = [(f"model.{k}", v, "frozen" if k in frozen else "trainable" if k in trainable else "buffer")
               for k, v in model.state_dict().items()]
    if vae is not None:
        tensors += [(f"vae.{k}", v, "vae") for k, v in vae.state_dict().items()]
    for name, tensor, group in tensors:
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "group": group, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    rng_state = {}
    if generator is not None:
        rng_state["torch"] = base64.b64encode(generator.get_state().numpy().tobytes()).decode()
    if rng is not None:
        rng_state["numpy"] = rng.bit_generator.state
    header = {
        "format_version": FORMAT_VERSION,
        "unet_config": model.config.to_dict(),
        "vae": {"kind": _vae_kind(vae),
                "image_channels": getattr(vae, "image_channels", None),
                "latent_channels": getattr(vae, "latent_channels", None)},
        "step": int(step),
        "rng_state": rng_state,
        "config": config.to_dict() if config is not None else None,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, default=int).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


@dataclass
class Checkpoint:
    model: InpaintModel
    vae: object
    header: dict

    @property
    def step(self) -> int:
        return self.header["step"]

    @property
    def config(self):
        from .config import TrainConfig
        cfg = self.header.get("config")
        return TrainConfig.from_dict(cfg) if cfg is not None else None


def read_header(path) -> tuple:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + _DIGEST or not data.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint or truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (file corrupt or truncated)")
    (hlen,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    return header, body[start + hlen:]


def load_checkpoint(path, expected_config: Optional[UNetConfig] = None) -> Checkpoint:
    header, blob = read_header(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    for key in ("unet_config", "tensors", "step"):
        if key not in header:
            raise VersionError(f"checkpoint header lacks field {key!r}")
    stored = header["unet_config"]
    if expected_config is not None:
        want = expected_config.to_dict()
        for k in want:
            if stored.get(k) != want[k]:
                raise VersionError(f"UNetConfig mismatch in field {k!r}: checkpoint has {stored.get(k)!r}, "
                                   f"expected {want[k]!r}")
    model = InpaintModel(UNetConfig.from_dict(stored))
    vinfo = header["vae"]
    vae = {"toy": lambda: ToyVAE(vinfo["image_channels"], vinfo["latent_channels"]),
           "pool": lambda: PoolVAE(vinfo["image_channels"], vinfo["latent_channels"]),
           "identity": lambda: IdentityVAE(vinfo["latent_channels"]),
           "none": lambda: None}[vinfo["kind"]]()
    model_state, vae_state = {}, {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise IntegrityError(f"tensor {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        prefix, key = e["name"].split(".", 1)
        (model_state if prefix == "model" else vae_state)[key] = t
    model.load_state_dict(model_state, strict=True)
    model.freeze_base()
    if vae is not None:
        vae.load_state_dict(vae_state, strict=True)
        vae.requires_grad_(False)
    model.eval()
    return Checkpoint(model, vae, header)


def restore_rng(header: dict):
    """Rebuild (torch generator, numpy generator) from a checkpoint header, when stored."""
    st = header.get("rng_state", {})
    gen = rng = None
    if "torch" in st:
        gen = torch.Generator()
        gen.set_state(torch.from_numpy(np.frombuffer(base64.b64decode(st["torch"]), dtype=np.uint8).copy()))
    if "numpy" in st:
        rng = np.random.default_rng()
        rng.bit_generator.state = st["numpy"]
    return gen, rng
