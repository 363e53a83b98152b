"""Containers, label tables, checkpoints, and stratified splitting.

On-disk layouts (everything little-endian, independent of host byte order):

* Embedding container: magic ``MHE1``; u32 version (=1); u32 n_images; u32
  n_views; u32 n_tokens; u32 dim; u32 dtype (0 = float32); u32 flags (bit 0
  set means a float32 temperature follows the header, used by weight files);
  payload of raw float32 values in image-major, then view, token, feature
  order. A text sidecar ``<container>.ids`` carries one record id per line,
  line i matching record i.
* Classifier weight container: identical layout with n_views = n_tokens = 1
  and one record per class; flag bit 0 set and the temperature present. The
  sidecar lines are class names; an optional ``<container>.meta.json``
  records the prompt template for provenance.
* Checkpoint: magic ``MHC1``; u32 version (=1); u32 dim; u32 bottleneck;
  u32 heads; f64 alpha; f64 dropout_p; u32 epoch; f64 val_accuracy; then the
  named tensors, each as u16 name length, name bytes, u32 rank, u32 dims...,
  raw float32 data.
* Labels: UTF-8 CSV with header ``image_id,label``.

Readers reject rather than truncate: a header that promises more bytes than
the file holds is an error, never a partial result. Loaded sets are immutable
by convention and safe to share across workers.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterParams
from .errors import (
    BadMagic,
    ClassCountMismatch,
    DuplicateId,
    DuplicateImageId,
    EmptyInput,
    IdCountMismatch,
    InvalidHeader,
    MalformedRow,
    NonPositiveTemperature,
    ShapeMismatch,
    TruncatedPayload,
    UnknownClassName,
    UnsupportedVersion,
)

MAGIC_EMBEDDING = b"MHE1"
MAGIC_CHECKPOINT = b"MHC1"
CONTAINER_VERSION = 1
DTYPE_FLOAT32 = 0
FLAG_TEMPERATURE = 1

_HEADER = struct.Struct("<4sIIIIIII")
_CKPT_HEADER = struct.Struct("<4sIIIIddId")


@dataclass
class EmbeddingSet:
    """Per-image token embeddings, one or more augmentation views per image.

    ``data`` has shape [n_images, n_views, n_tokens, dim], float32, with the
    global (class) token at token index 0. View 0 is the deterministic view
    used for evaluation.
    """

    image_ids: list[str]
    data: np.ndarray
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_images(self) -> int:
        return self.data.shape[0]

    @property
    def n_views(self) -> int:
        return self.data.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.data.shape[2]

    @property
    def dim(self) -> int:
        return self.data.shape[3]

    def validate(self) -> None:
        if self.data.ndim != 4:
            raise ShapeMismatch(f"data must be 4-d, got {self.data.shape}")
        if self.n_images < 1 or self.n_views < 1 or self.dim < 1:
            raise InvalidHeader(f"degenerate container shape {self.data.shape}")
        if self.n_tokens < 2:
            raise InvalidHeader("need a global token plus at least one patch token")
        if len(self.image_ids) != self.n_images:
            raise IdCountMismatch(
                f"{len(self.image_ids)} ids for {self.n_images} images")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise DuplicateId("image ids are not unique")

    def index_of(self, image_id: str) -> int:
        if not self._index:
            self._index.update({i: n for n, i in enumerate(self.image_ids)})
        try:
            return self._index[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def view(self, image_id: str, view: int = 0) -> np.ndarray:
        """Tokens [(n_tokens), dim] of one view of one image."""
        return self.data[self.index_of(image_id), view]


@dataclass
class ClassifierWeights:
    """Prompt-derived classifier rows, one per class, never trained."""

    class_names: list[str]
    weights: np.ndarray           # [k, dim]
    temperature: float
    prompt_template: str = ""

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def validate(self) -> None:
        if self.weights.ndim != 2 or self.n_classes < 2:
            raise InvalidHeader(f"need at least 2 classes, got shape {self.weights.shape}")
        if len(self.class_names) != self.n_classes:
            raise ClassCountMismatch(
                f"{len(self.class_names)} names for {self.n_classes} rows")
        if len(set(self.class_names)) != len(self.class_names):
            raise DuplicateId("class names are not unique")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise NonPositiveTemperature(f"temperature {self.temperature}")


@dataclass
class LabelTable:
    """Map image id -> class index, in file order."""

    entries: dict[str, int]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SplitAssignment:
    train_ids: list[str]
    val_ids: list[str]
    seed: int


@dataclass
class CheckpointMeta:
    epoch: int
    val_accuracy: float


def _ids_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".ids")


def _meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def _read_sidecar_ids(path) -> list[str]:
    sidecar = _ids_path(path)
    if not sidecar.exists():
        raise IdCountMismatch(f"missing sidecar {sidecar}")
    text = sidecar.read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line != ""]


def _parse_header(blob: bytes, path) -> tuple:
    if len(blob) < _HEADER.size:
        raise TruncatedPayload(f"{path}: shorter than the fixed header")
    magic, version, n_images, n_views, n_tokens, dim, dtype, flags = \
        _HEADER.unpack_from(blob)
    if magic != MAGIC_EMBEDDING:
        raise BadMagic(f"{path}: magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    if dtype != DTYPE_FLOAT32:
        raise InvalidHeader(f"{path}: unsupported dtype code {dtype}")
    offset = _HEADER.size
    temperature = None
    if flags & FLAG_TEMPERATURE:
        if len(blob) < offset + 4:
            raise TruncatedPayload(f"{path}: temperature field missing")
        (temperature,) = struct.unpack_from("<f", blob, offset)
        offset += 4
    return n_images, n_views, n_tokens, dim, temperature, offset


def _read_payload(blob: bytes, offset: int, shape: tuple, path) -> np.ndarray:
    count = int(np.prod(shape))
    need = count * 4
    if len(blob) - offset < need:
        raise TruncatedPayload(
            f"{path}: header promises {need} payload bytes, "
            f"{len(blob) - offset} present")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return flat.reshape(shape).astype(np.float32)


def read_embedding_container(path) -> EmbeddingSet:
    """Decode an embedding container plus its id sidecar."""
    blob = Path(path).read_bytes()
    n_images, n_views, n_tokens, dim, _, offset = _parse_header(blob, path)
    if n_tokens < 2:
        raise InvalidHeader(f"{path}: n_tokens {n_tokens} < 2, not an embedding container")
    if min(n_images, n_views, dim) < 1:
        raise InvalidHeader(f"{path}: zero-sized axis in header")
    data = _read_payload(blob, offset, (n_images, n_views, n_tokens, dim), path)
    ids = _read_sidecar_ids(path)
    if len(ids) != n_images:
        raise IdCountMismatch(f"{path}: {len(ids)} sidecar ids for {n_images} records")
    if len(set(ids)) != len(ids):
        raise DuplicateId(f"{path}: duplicate ids in sidecar")
    out = EmbeddingSet(image_ids=ids, data=data)
    out.validate()
    return out


def write_embedding_container(embeddings: EmbeddingSet, path) -> None:
    """Write the container and its id sidecar. Identical input gives byte
    identical output; nothing is written if validation fails."""
    embeddings.validate()
    header = _HEADER.pack(MAGIC_EMBEDDING, CONTAINER_VERSION,
                          embeddings.n_images, embeddings.n_views,
                          embeddings.n_tokens, embeddings.dim,
                          DTYPE_FLOAT32, 0)
    payload = np.ascontiguousarray(embeddings.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)
    _ids_path(path).write_text(
        "".join(i + "\n" for i in embeddings.image_ids), encoding="utf-8")


def read_classifier_weights(path) -> ClassifierWeights:
    """Decode a weight container: one record per class, n_views = n_tokens = 1,
    class names in the sidecar, temperature in the header extension."""
    blob = Path(path).read_bytes()
    k, n_views, n_tokens, dim, temperature, offset = _parse_header(blob, path)
    if n_views != 1 or n_tokens != 1:
        raise InvalidHeader(
            f"{path}: weight containers need n_views = n_tokens = 1, "
            f"got ({n_views}, {n_tokens})")
    if temperature is None:
        raise NonPositiveTemperature(f"{path}: temperature field absent")
    if not (math.isfinite(temperature) and temperature > 0):
        raise NonPositiveTemperature(f"{path}: temperature {temperature}")
    weights = _read_payload(blob, offset, (k, dim), path)
    names = _read_sidecar_ids(path)
    if len(names) != k:
        raise ClassCountMismatch(f"{path}: {len(names)} names for {k} rows")
    template = ""
    meta = _meta_path(path)
    if meta.exists():
        template = json.loads(meta.read_text(encoding="utf-8")).get("prompt_template", "")
    out = ClassifierWeights(class_names=names, weights=weights,
                            temperature=float(temperature),
                            prompt_template=template)
    out.validate()
    return out


def write_classifier_weights(weights: ClassifierWeights, path) -> None:
    """Weight-container counterpart of ``write_embedding_container``."""
    weights.validate()
    header = _HEADER.pack(MAGIC_EMBEDDING, CONTAINER_VERSION,
                          weights.n_classes, 1, 1, weights.dim,
                          DTYPE_FLOAT32, FLAG_TEMPERATURE)
    header += struct.pack("<f", weights.temperature)
    payload = np.ascontiguousarray(weights.weights, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)
    _ids_path(path).write_text(
        "".join(n + "\n" for n in weights.class_names), encoding="utf-8")
    _meta_path(path).write_text(
        json.dumps({"prompt_template": weights.prompt_template},
                   sort_keys=True) + "\n", encoding="utf-8")


def read_labels(path, class_names: list[str]) -> LabelTable:
    """Parse an ``image_id,label`` CSV, resolving labels against the given
    class-name list."""
    name_to_index = {n: i for i, n in enumerate(class_names)}
    entries: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["image_id", "label"]:
            raise MalformedRow(f"{path}: expected header image_id,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[0] == "":
                raise MalformedRow(f"{path}:{lineno}: {row!r}")
            image_id, label = row
            if label not in name_to_index:
                raise UnknownClassName(f"{path}:{lineno}: {label!r}")
            if image_id in entries:
                raise DuplicateImageId(f"{path}:{lineno}: {image_id!r}")
            entries[image_id] = name_to_index[label]
    return LabelTable(entries=entries)


def stratified_split(labels: LabelTable, val_fraction: float,
                     seed: int) -> SplitAssignment:
    """Hold out round(val_fraction * n_c) samples of every class c for
    validation, clamped so each class keeps at least one training sample.
    Deterministic for a given seed: ids are sorted per class before the
    seeded shuffle, so input ordering cannot change the outcome."""
    if not labels.entries:
        raise EmptyInput("no labeled samples to split")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction {val_fraction} outside [0, 1)")
    by_class: dict[int, list[str]] = {}
    for image_id, cls in labels.entries.items():
        by_class.setdefault(cls, []).append(image_id)
    rng = np.random.default_rng(seed)
    train_ids: list[str] = []
    val_ids: list[str] = []
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        n_val = int(math.floor(val_fraction * len(ids) + 0.5))  # round half up
        n_val = min(n_val, len(ids) - 1)
        val_ids.extend(ids[:n_val])
        train_ids.extend(ids[n_val:])
    return SplitAssignment(train_ids=train_ids, val_ids=val_ids, seed=int(seed))


def save_checkpoint(params: AdapterParams, meta: CheckpointMeta, path) -> None:
    """Serialize parameters plus run metadata. Tensors round-trip bit exactly,
    so parameters must already be float32."""
    params.validate()
    for name, tensor in params.tensors().items():
        if tensor.dtype != np.float32:
            raise ShapeMismatch(f"{name}: checkpoints store float32, got {tensor.dtype}")
    parts = [_CKPT_HEADER.pack(MAGIC_CHECKPOINT, CONTAINER_VERSION,
                               params.dim, params.bottleneck, params.heads,
                               float(params.alpha), float(params.dropout_p),
                               int(meta.epoch), float(meta.val_accuracy))]

    def pack_tensor(name: str, arr: np.ndarray) -> bytes:
        encoded = name.encode("utf-8")
        head = struct.pack("<H", len(encoded)) + encoded
        head += struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()

    for name, tensor in params.tensors().items():
        parts.append(pack_tensor(name, tensor))
    # ln_eps travels as a rank-0 tensor so the full parameter set round-trips
    parts.append(pack_tensor("ln_eps", np.float32(params.ln_eps)))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, *, dim: int | None = None, heads: int | None = None,
                    bottleneck: int | None = None) -> tuple[AdapterParams, CheckpointMeta]:
    """Read a checkpoint back. Any expectation passed as a keyword must match
    the header or the load fails with ShapeMismatch."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise TruncatedPayload(f"{path}: shorter than the checkpoint header")
    magic, version, ck_dim, ck_db, ck_heads, alpha, dropout_p, epoch, val_acc = \
        _CKPT_HEADER.unpack_from(blob)
    if magic != MAGIC_CHECKPOINT:
        raise BadMagic(f"{path}: magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    for label, want, got in (("dim", dim, ck_dim), ("heads", heads, ck_heads),
                             ("bottleneck", bottleneck, ck_db)):
        if want is not None and want != got:
            raise ShapeMismatch(f"{path}: checkpoint {label} {got}, run configured {want}")

    tensors: dict[str, np.ndarray] = {}
    offset = _CKPT_HEADER.size
    while offset < len(blob):
        if len(blob) - offset < 2:
            raise TruncatedPayload(f"{path}: dangling tensor record")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if len(blob) - offset < name_len + 4:
            raise TruncatedPayload(f"{path}: dangling tensor record")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if len(blob) - offset < 4 * rank:
            raise TruncatedPayload(f"{path}: dangling tensor dims")
        shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        if len(blob) - offset < 4 * count:
            raise TruncatedPayload(f"{path}: tensor {name} payload short")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        if name in tensors:
            raise DuplicateId(f"{path}: tensor {name} appears twice")
        tensors[name] = arr.reshape(shape).astype(np.float32) if rank else arr[0]

    required = ("w_v1", "w_v2", "gamma", "beta", "w_q", "w_k", "w_v", "w_o")
    missing = [n for n in required if n not in tensors]
    if missing:
        raise ShapeMismatch(f"{path}: missing tensors {missing}")
    use_bias = "b_v1" in tensors
    params = AdapterParams(
        w_v1=tensors["w_v1"], w_v2=tensors["w_v2"],
        gamma=tensors["gamma"], beta=tensors["beta"],
        w_q=tensors["w_q"], w_k=tensors["w_k"], w_v=tensors["w_v"],
        w_o=tensors["w_o"], alpha=float(alpha), heads=int(ck_heads),
        dropout_p=float(dropout_p),
        ln_eps=float(tensors.get("ln_eps", np.float32(1e-5))),
        use_bias=use_bias,
        b_v1=tensors.get("b_v1"), b_v2=tensors.get("b_v2"),
        b_q=tensors.get("b_q"), b_k=tensors.get("b_k"),
        b_v=tensors.get("b_v"), b_o=tensors.get("b_o"),
    )
    if params.dim != ck_dim or params.bottleneck != ck_db:
        raise ShapeMismatch(f"{path}: tensor shapes disagree with the header")
    params.validate()
    return params, CheckpointMeta(epoch=int(epoch), val_accuracy=float(val_acc))
