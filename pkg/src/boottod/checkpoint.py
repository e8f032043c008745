"""
Checkpoint storage: a directory with manifest.json (format version, tensor
index, checksum, config snapshot) and params.bin (little-endian arrays back
to back in manifest order).
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from src.utils.general import sha256_file

from .encoder import EncoderConfig, EncoderWeights, Vocab
from .errors import CheckpointError, CheckpointVersionError
from .objective import PredictorWeights
from .tensor import Tensor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
VOCAB_FILE = "vocab.txt"
STORAGE_DTYPES = {"float32": "<f4", "float64": "<f8"}

ArrayLike = Union[np.ndarray, Tensor]


@dataclass
class Checkpoint:
    manifest: dict
    params: Dict[str, np.ndarray] = field(repr=False)

    @property
    def step(self) -> Optional[int]:
        return self.manifest.get("step")

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))


@dataclass
class LoadedModel:
    encoder: EncoderWeights
    predictor: Optional[PredictorWeights]
    vocab: Vocab
    manifest: dict


def save_checkpoint(params: Dict[str, ArrayLike], manifest: dict, path,
                    storage_dtype: str = "float32") -> Path:
    if storage_dtype not in STORAGE_DTYPES:
        raise CheckpointError(f"unsupported storage dtype '{storage_dtype}'")
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(STORAGE_DTYPES[storage_dtype])

    index, offset = [], 0
    with open(directory / PARAMS_FILE, "wb") as handle:
        for name in sorted(params):
            value = params[name]
            array = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype=dtype)
            raw = array.tobytes(order="C")
            handle.write(raw)
            index.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)

    full_manifest = dict(manifest)
    full_manifest.update({
        "format_version": FORMAT_VERSION,
        "storage_dtype": storage_dtype,
        "tensors": index,
        "total_bytes": offset,
        "sha256": sha256_file(directory / PARAMS_FILE),
    })
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as handle:
        json.dump(full_manifest, handle, indent=2, sort_keys=True)
    logger.info(f"💾 Saved checkpoint with {len(index)} tensors to {directory}")
    return directory


def read_manifest(path) -> dict:
    manifest_path = Path(path) / MANIFEST_FILE
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_FILE} in checkpoint directory {path}")
    try:
        with open(manifest_path, encoding="utf-8") as handle:
            manifest = json.load(handle)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {path}: {e}")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format_version {version}, this build reads {FORMAT_VERSION}"
        )
    return manifest


def verify_checkpoint(path) -> dict:
    """Check size and checksum of params.bin against the manifest"""
    directory = Path(path)
    manifest = read_manifest(directory)
    params_path = directory / PARAMS_FILE
    if not params_path.exists():
        raise CheckpointError(f"no {PARAMS_FILE} in checkpoint directory {path}")
    size = params_path.stat().st_size
    if size != manifest.get("total_bytes"):
        raise CheckpointError(
            f"{params_path} is {size} bytes, manifest expects {manifest.get('total_bytes')} (truncated?)"
        )
    if sha256_file(params_path) != manifest.get("sha256"):
        raise CheckpointError(f"checksum mismatch for {params_path}")
    return manifest


def load_checkpoint(path) -> Checkpoint:
    directory = Path(path)
    manifest = verify_checkpoint(directory)
    dtype = np.dtype(STORAGE_DTYPES.get(manifest.get("storage_dtype"), "<f4"))
    raw = (directory / PARAMS_FILE).read_bytes()
    params = {}
    for entry in manifest["tensors"]:
        chunk = raw[entry["offset"]:entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(np.float64)
    return Checkpoint(manifest, params)


# ---------------------------------------------------------------------------
# Models (encoder + optional predictor + vocabulary)
# ---------------------------------------------------------------------------

def save_model(path, encoder: EncoderWeights, vocab: Vocab, predictor: Optional[PredictorWeights] = None,
               extra: Optional[dict] = None, storage_dtype: str = "float32") -> Path:
    params = dict(encoder.params)
    if predictor is not None:
        params.update(predictor.params)
    manifest = dict(extra or {})
    manifest.update({
        "encoder_config": asdict(encoder.config),
        "has_predictor": predictor is not None,
        "predictor_hidden_dim": predictor.hidden_dim if predictor is not None else None,
        "vocab_size": len(vocab),
    })
    directory = save_checkpoint(params, manifest, path, storage_dtype)
    vocab.save(directory / VOCAB_FILE)
    return directory


def load_model(path, with_predictor: bool = True) -> LoadedModel:
    """Rebuild encoder, predictor and vocabulary from a model checkpoint"""
    directory = Path(path)
    checkpoint = load_checkpoint(directory)
    manifest = checkpoint.manifest
    if "encoder_config" not in manifest:
        raise CheckpointError(f"checkpoint {path} carries no encoder_config")
    if not (directory / VOCAB_FILE).exists():
        raise CheckpointError(f"checkpoint {path} has no {VOCAB_FILE}")

    config = EncoderConfig(**manifest["encoder_config"])
    vocab = Vocab.load(directory / VOCAB_FILE)
    if len(vocab) != config.vocab_size:
        raise CheckpointError(f"vocab has {len(vocab)} tokens, encoder expects {config.vocab_size}")

    encoder_params, predictor_params = {}, {}
    for name, array in checkpoint.params.items():
        target = predictor_params if name.startswith("predictor.") else encoder_params
        target[name] = Tensor(array, requires_grad=True, name=name)

    predictor = None
    if with_predictor and manifest.get("has_predictor"):
        predictor = PredictorWeights(predictor_params)
    return LoadedModel(EncoderWeights(config, encoder_params), predictor, vocab, manifest)
