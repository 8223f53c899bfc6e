"""
Adapter files, manifests and JSON documents.

Adapter file layout: 8-byte little-endian header length N, N bytes of UTF-8
JSON mapping tensor names to {dtype, shape, data_offsets}, then the raw
little-endian float32 payload. Writes are canonical: sorted tensor names,
sorted header keys, no whitespace, no padding.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import (
    AdapterFormatError, InputValidationError, ManifestError, MissingTensorError,
    OverlappingOffsetsError, TensorShapeError, TruncatedFileError, UnsupportedDtypeError,
)
from .layer_prior import layer_seed
from .lora import AdapterRole, AdapterSet, LoraLayer, MaskPair
from .schemas import FORMAT_VERSION, LayerManifest, SyntheticSpec

logger = logging.getLogger(__name__)

HEADER_LENGTH_BYTES = 8
METADATA_KEY = "__metadata__"
ALPHA_PREFIX = "alpha."
SUFFIXES = ("lora_A", "lora_B", "alpha", "merger_content", "merger_style")

# Default layer names for generated adapters, one UNet block family per layer
SYNTHETIC_BLOCKS = ("down_blocks.1", "down_blocks.2", "mid_block", "up_blocks.1", "up_blocks.2")

Document = TypeVar("Document", bound=BaseModel)


# --- ADAPTER FILES ---

def _split_tensor_name(tensor: str):
    for suffix in SUFFIXES:
        if tensor.endswith("." + suffix) and len(tensor) > len(suffix) + 1:
            return tensor[:-(len(suffix) + 1)], suffix
    raise AdapterFormatError(f"tensor '{tensor}' has no recognised suffix ({', '.join(SUFFIXES)})")


def _parse_header(data: bytes, source: str):
    if len(data) < HEADER_LENGTH_BYTES:
        raise TruncatedFileError(f"{source}: {len(data)} bytes, too short for the header length")
    n = int.from_bytes(data[:HEADER_LENGTH_BYTES], "little")
    if HEADER_LENGTH_BYTES + n > len(data):
        raise TruncatedFileError(f"{source}: header declares {n} bytes but only {len(data) - HEADER_LENGTH_BYTES} follow")
    try:
        header = json.loads(data[HEADER_LENGTH_BYTES:HEADER_LENGTH_BYTES + n].decode("utf-8").rstrip(" "))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise AdapterFormatError(f"{source}: header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise AdapterFormatError(f"{source}: header must be a JSON object")
    return header, data[HEADER_LENGTH_BYTES + n:]


def _is_count(value) -> bool:
    # JSON true/false decode to bool, which is an int subclass
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _read_tensors(header: dict, payload: bytes) -> Dict[str, np.ndarray]:
    entries = []
    for tensor, info in header.items():
        if not isinstance(info, dict):
            raise AdapterFormatError(f"tensor '{tensor}': header entry must be an object")
        if info.get("dtype") != "F32":
            raise UnsupportedDtypeError(f"tensor '{tensor}': dtype {info.get('dtype')!r} is not supported, only F32")
        shape = info.get("shape")
        offsets = info.get("data_offsets")
        if not isinstance(shape, list) or not all(_is_count(d) for d in shape):
            raise TensorShapeError(f"tensor '{tensor}': invalid shape {shape!r}")
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(_is_count(o) for o in offsets)
                and 0 <= offsets[0] <= offsets[1]):
            raise OverlappingOffsetsError(f"tensor '{tensor}': invalid data_offsets {offsets!r}")
        entries.append((offsets[0], offsets[1], tensor, shape))

    tensors: Dict[str, np.ndarray] = {}
    cursor = 0
    for begin, end, tensor, shape in sorted(entries):
        if begin != cursor:
            raise OverlappingOffsetsError(
                f"tensor '{tensor}': data starts at {begin}, expected {cursor} (offsets must tile the payload)"
            )
        if end > len(payload):
            raise TruncatedFileError(f"tensor '{tensor}': data ends at {end}, payload has {len(payload)} bytes")
        if end - begin != int(np.prod(shape, dtype=np.int64)) * 4:
            raise TensorShapeError(f"tensor '{tensor}': {end - begin} bytes do not match shape {shape}")
        tensors[tensor] = np.frombuffer(payload[begin:end], dtype="<f4").astype(np.float64).reshape(shape)
        cursor = end
    if cursor != len(payload):
        raise OverlappingOffsetsError(f"payload has {len(payload) - cursor} bytes not covered by any tensor")
    return tensors


def decode_adapter(data: bytes, source: str = "<bytes>") -> AdapterSet:
    header, payload = _parse_header(data, source)
    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict):
        raise AdapterFormatError(f"{source}: {METADATA_KEY} must be an object")
    version = metadata.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise AdapterFormatError(f"{source}: unsupported format_version {version!r}")

    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    for tensor, values in _read_tensors(header, payload).items():
        layer, suffix = _split_tensor_name(tensor)
        grouped.setdefault(layer, {})[suffix] = values

    try:
        default_alpha = float(metadata["alpha"]) if "alpha" in metadata else None
        declared_rank = int(metadata["rank"]) if "rank" in metadata else None
        layer_alphas = {
            key[len(ALPHA_PREFIX):]: float(value) for key, value in metadata.items() if key.startswith(ALPHA_PREFIX)
        }
    except (TypeError, ValueError) as e:
        raise AdapterFormatError(f"{source}: bad metadata value: {e}") from e
    stray = sorted(set(layer_alphas) - set(grouped))
    if stray:
        raise AdapterFormatError(f"{source}: alpha given for unknown layers {stray}")

    layers, masks = [], {}
    for name in sorted(grouped):
        parts = grouped[name]
        for needed in ("lora_A", "lora_B"):
            if needed not in parts:
                raise MissingTensorError(f"{name}.{needed} missing")
        a, b = parts["lora_A"], parts["lora_B"]
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise TensorShapeError(f"{name}.lora_A shape {list(a.shape)} does not pair with {name}.lora_B shape {list(b.shape)}")
        if declared_rank is not None and a.shape[1] != declared_rank:
            raise TensorShapeError(f"{name}.lora_A has rank {a.shape[1]}, metadata declares {declared_rank}")

        alpha = default_alpha
        if "alpha" in parts:
            if parts["alpha"].size != 1:
                raise TensorShapeError(f"{name}.alpha must be a scalar, got shape {list(parts['alpha'].shape)}")
            alpha = float(parts["alpha"].reshape(()))
        alpha = layer_alphas.get(name, alpha)
        layers.append(LoraLayer(name=name, a=a, b=b, alpha=alpha))

        has_c, has_s = "merger_content" in parts, "merger_style" in parts
        if has_c != has_s:
            raise MissingTensorError(f"{name}.{'merger_style' if has_c else 'merger_content'} missing")
        if has_c:
            m_c, m_s = parts["merger_content"], parts["merger_style"]
            if m_c.ndim != 1 or m_s.ndim != 1 or m_c.shape[0] + m_s.shape[0] != a.shape[1]:
                raise TensorShapeError(
                    f"{name}: merger lengths {m_c.shape[0]} + {m_s.shape[0]} do not add up to rank {a.shape[1]}"
                )
            masks[name] = MaskPair(content=m_c, style=m_s)

    adapter = AdapterSet.from_layers(layers, role=AdapterRole(metadata.get("role", "content")))
    adapter.masks = masks
    return adapter


def read_adapter(path) -> AdapterSet:
    adapter = decode_adapter(Path(path).read_bytes(), source=str(path))
    logger.debug(f"Read {len(adapter)} layers from {path}")
    return adapter


def encode_adapter(adapter: AdapterSet) -> bytes:
    """Canonical bytes: a pure function of the set's content."""
    metadata = {"format_version": FORMAT_VERSION, "role": adapter.role.value}
    tensors: Dict[str, np.ndarray] = {}
    layers = list(adapter.layers.values())

    alphas = {layer.alpha for layer in layers}
    ranks = {layer.rank for layer in layers}
    per_layer_alpha = False
    if layers and any(layer.alpha != layer.rank for layer in layers):
        if len(alphas) == 1:
            metadata["alpha"] = repr(float(next(iter(alphas))))
        else:
            per_layer_alpha = True
    if len(ranks) == 1:
        metadata["rank"] = str(next(iter(ranks)))

    for layer in layers:
        tensors[f"{layer.name}.lora_A"] = layer.a
        tensors[f"{layer.name}.lora_B"] = layer.b
        if per_layer_alpha:
            metadata[ALPHA_PREFIX + layer.name] = repr(float(layer.alpha))
    for name, pair in adapter.masks.items():
        tensors[f"{name}.merger_content"] = pair.content
        tensors[f"{name}.merger_style"] = pair.style

    header = {METADATA_KEY: metadata}
    chunks = []
    offset = 0
    for tensor in sorted(tensors):
        raw = np.ascontiguousarray(tensors[tensor], dtype="<f4").tobytes()
        header[tensor] = {
            "dtype": "F32",
            "shape": list(np.shape(tensors[tensor])),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(header_bytes).to_bytes(HEADER_LENGTH_BYTES, "little") + header_bytes + b"".join(chunks)


def write_adapter(adapter: AdapterSet, path):
    data = encode_adapter(adapter)
    Path(path).write_bytes(data)
    logger.debug(f"Wrote {len(adapter)} layers ({len(data)} bytes) to {path}")


# --- JSON DOCUMENTS ---

def _load_json(path, error_cls):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise error_cls(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e


def load_document(path, model: Type[Document]) -> Document:
    """Reads a config or report document; unknown keys and bad values are validation errors."""
    raw = _load_json(path, InputValidationError)
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        raise InputValidationError(f"{path}: invalid {model.__name__}: {e}") from e


def save_document(document: BaseModel, path):
    Path(path).write_text(document.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_manifest(path) -> LayerManifest:
    """Accepts either {"entries": [...]} or a bare list of entries."""
    raw = _load_json(path, ManifestError)
    if isinstance(raw, list):
        raw = {"entries": raw}
    try:
        return LayerManifest.model_validate(raw)
    except ValidationError as e:
        raise ManifestError(f"{path}: invalid manifest: {e}") from e


# --- SYNTHETIC ADAPTERS ---

def synthetic_layer_names(count: int):
    return [f"unet.{SYNTHETIC_BLOCKS[i % len(SYNTHETIC_BLOCKS)]}.attentions.{i // len(SYNTHETIC_BLOCKS)}.to_q"
            for i in range(count)]


def generate_synthetic(spec: SyntheticSpec, seed: int) -> AdapterSet:
    """
    Random adapters, deterministic per (seed, layer name). Without a spectrum,
    A ~ N(0, 1/rank) and B ~ N(0, 1/d_in); with one, U diag(spectrum) V^T is
    drawn from orthonormal factors and split as A = U sqrt(s), B = sqrt(s) V^T,
    so the update's singular values are spectrum * alpha / rank.
    """
    names = spec.layers if isinstance(spec.layers, list) else synthetic_layer_names(spec.layers)
    layers = []
    for name in names:
        rng = np.random.default_rng(layer_seed(seed, name))
        if spec.spectrum is None:
            a = rng.standard_normal((spec.d_out, spec.rank)) / np.sqrt(spec.rank)
            b = rng.standard_normal((spec.rank, spec.d_in)) / np.sqrt(spec.d_in)
        else:
            u, _ = np.linalg.qr(rng.standard_normal((spec.d_out, spec.rank)))
            v, _ = np.linalg.qr(rng.standard_normal((spec.d_in, spec.rank)))
            root = np.sqrt(np.asarray(spec.spectrum, dtype=np.float64))
            a = u * root
            b = root[:, None] * v.T
        layers.append(LoraLayer(name=name, a=a, b=b, alpha=spec.alpha))
    logger.debug(f"Generated {len(layers)} synthetic {spec.role} layers (seed {seed})")
    return AdapterSet.from_layers(layers, role=AdapterRole(spec.role))
