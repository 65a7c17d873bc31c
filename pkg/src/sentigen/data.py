"""Corpus handling: records, the dataset registry, polarity pools, sidecars.

A corpus is a JSONL file of records covering four task families (aspect terms,
scalar sentiment, conversation emotion, comment sentiment). Every dataset a
corpus references must be declared in a registry config which fixes its task
type, answer set, feature dimensions, and evaluation metrics.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError

SIDECAR_MAGIC = b"SAEV"

# Reserved dataset id for the combined two-query records used by the first
# pre-training stage. Registries for that stage must declare it.
POOL_DATASET_ID = "polarity-pool"

RECORD_KEYS = (
    "task_type",
    "dataset_id",
    "text",
    "audio",
    "image",
    "context",
    "speaker_id",
    "utterance_index",
    "label",
)

METRIC_NAMES = ("wa", "wf1", "mf1_excl_neutral", "mae", "acc7", "acc2")


class TaskType(Enum):
    ABSA = "absa"
    MSA = "msa"
    ERC = "erc"
    CA = "ca"


TASK_ORDER = (TaskType.ABSA, TaskType.MSA, TaskType.ERC, TaskType.CA)


class Polarity(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"


# Fine-grained label string -> polarity. Lookup is case-insensitive. Scalar
# labels map by sign instead and never consult this table.
POLARITY_TABLE = {
    "positive": Polarity.POSITIVE,
    "joy": Polarity.POSITIVE,
    "happy": Polarity.POSITIVE,
    "happiness": Polarity.POSITIVE,
    "excited": Polarity.POSITIVE,
    "negative": Polarity.NEGATIVE,
    "anger": Polarity.NEGATIVE,
    "angry": Polarity.NEGATIVE,
    "sad": Polarity.NEGATIVE,
    "sadness": Polarity.NEGATIVE,
    "fear": Polarity.NEGATIVE,
    "fearful": Polarity.NEGATIVE,
    "disgust": Polarity.NEGATIVE,
    "frustrated": Polarity.NEGATIVE,
    "hate": Polarity.NEGATIVE,
    "neutral": Polarity.NEUTRAL,
    "no-emotion": Polarity.NEUTRAL,
    "surprise": Polarity.NEUTRAL,
    "surprised": Polarity.NEUTRAL,
    "conflict": Polarity.NEUTRAL,
}

SCALAR_LO = -3.0
SCALAR_HI = 3.0


def render_scalar_label(value):
    """Canonical one-decimal rendering of a scalar label; -0.0 renders as 0.0."""
    v = round(float(value), 1)
    if v == 0.0:
        v = 0.0
    return f"{v:.1f}"


@dataclass(frozen=True)
class AnswerSet:
    """Admissible answers for one dataset.

    Either an ordered tuple of label strings, or (for scalar sentiment) the
    rendering rule "signed one-decimal literal in [lo, hi]".
    """

    labels: tuple | None = None
    scalar: bool = False
    lo: float = SCALAR_LO
    hi: float = SCALAR_HI

    @classmethod
    def categorical(cls, labels):
        labels = tuple(str(x) for x in labels)
        if not labels or len(set(labels)) != len(labels):
            raise ConfigError(f"answer set must list distinct labels, got {labels}")
        return cls(labels=labels)

    @classmethod
    def scalar_range(cls, lo=SCALAR_LO, hi=SCALAR_HI):
        return cls(labels=None, scalar=True, lo=float(lo), hi=float(hi))

    def contains(self, label):
        if self.scalar:
            return isinstance(label, (int, float)) and not isinstance(label, bool) \
                and self.lo <= float(label) <= self.hi
        return isinstance(label, str) and label in self.labels

    def render(self, label):
        if self.scalar:
            return render_scalar_label(label)
        return str(label)

    def to_json(self):
        if self.scalar:
            return {"kind": "scalar", "min": self.lo, "max": self.hi}
        return list(self.labels)

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, list):
            return cls.categorical(obj)
        if isinstance(obj, dict) and obj.get("kind") == "scalar":
            return cls.scalar_range(obj.get("min", SCALAR_LO), obj.get("max", SCALAR_HI))
        raise ConfigError(f"unrecognised answer_set spec: {obj!r}")


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    task_type: TaskType
    answer: AnswerSet
    acoustic_dim: int | None
    visual_dim: int | None
    metrics: tuple


class Registry:
    """Ordered collection of dataset declarations. Declaration order is the
    dataset index used by the model's dataset embedding."""

    def __init__(self, specs):
        self._specs = {}
        for s in specs:
            if s.dataset_id in self._specs:
                raise ConfigError(f"duplicate dataset id {s.dataset_id!r}")
            self._specs[s.dataset_id] = s
        self._order = list(self._specs)

    @property
    def dataset_ids(self):
        return list(self._order)

    def __len__(self):
        return len(self._order)

    def __contains__(self, dataset_id):
        return dataset_id in self._specs

    def spec(self, dataset_id):
        try:
            return self._specs[dataset_id]
        except KeyError:
            raise ConfigError(f"dataset {dataset_id!r} is not declared in the registry") from None

    def index(self, dataset_id):
        self.spec(dataset_id)
        return self._order.index(dataset_id)

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or not obj:
            raise ConfigError("registry must be a non-empty object mapping dataset ids to specs")
        specs = []
        for dataset_id, entry in obj.items():
            if not isinstance(entry, dict):
                raise ConfigError(f"registry entry {dataset_id!r} must be an object")
            missing = {"task_type", "answer_set", "acoustic_dim", "visual_dim", "metrics"} - set(entry)
            if missing:
                raise ConfigError(f"registry entry {dataset_id!r} missing keys {sorted(missing)}")
            try:
                task = TaskType(entry["task_type"])
            except ValueError:
                raise ConfigError(f"registry entry {dataset_id!r}: unknown task_type {entry['task_type']!r}") from None
            answer = AnswerSet.from_json(entry["answer_set"])
            if answer.scalar != (task is TaskType.MSA):
                raise ConfigError(f"registry entry {dataset_id!r}: scalar answer sets are for msa datasets only")
            for dim_key in ("acoustic_dim", "visual_dim"):
                dim = entry[dim_key]
                if dim is not None and (not isinstance(dim, int) or dim <= 0):
                    raise ConfigError(f"registry entry {dataset_id!r}: {dim_key} must be null or a positive int")
            metrics = entry["metrics"]
            if not isinstance(metrics, list) or not metrics or any(m not in METRIC_NAMES for m in metrics):
                raise ConfigError(f"registry entry {dataset_id!r}: metrics must be drawn from {METRIC_NAMES}")
            specs.append(DatasetSpec(
                dataset_id=dataset_id,
                task_type=task,
                answer=answer,
                acoustic_dim=entry["acoustic_dim"],
                visual_dim=entry["visual_dim"],
                metrics=tuple(metrics),
            ))
        return cls(specs)

    def to_json(self):
        out = {}
        for dataset_id in self._order:
            s = self._specs[dataset_id]
            out[dataset_id] = {
                "task_type": s.task_type.value,
                "answer_set": s.answer.to_json(),
                "acoustic_dim": s.acoustic_dim,
                "visual_dim": s.visual_dim,
                "metrics": list(s.metrics),
            }
        return out

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"registry file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"registry {path} is not valid JSON: {exc}") from None
        return cls.from_json(obj)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class SaevalRecord:
    """One sample in the unified corpus format.

    ``context``, ``speaker_id`` and ``utterance_index`` are present exactly for
    conversation records. ``text_parts`` is internal: it keeps the segment
    boundary of combined two-query records so prompts can place a separator
    token between the parts; it is never serialized.
    """

    task_type: TaskType
    dataset_id: str
    text: str
    audio: np.ndarray | None = None
    image: np.ndarray | None = None
    context: tuple | None = None
    speaker_id: str | None = None
    utterance_index: int | None = None
    label: object = None
    text_parts: tuple | None = None


def to_polarity(label, dataset_id="?"):
    """Coarse polarity of a gold label. Scalars map by sign; strings via the
    fixed table. Unmapped strings are a configuration error."""
    if isinstance(label, bool):
        raise ConfigError(f"dataset {dataset_id!r}: boolean label {label!r} has no polarity")
    if isinstance(label, (int, float)):
        v = float(label)
        if v > 0:
            return Polarity.POSITIVE
        if v < 0:
            return Polarity.NEGATIVE
        return Polarity.NEUTRAL
    if isinstance(label, str):
        pol = POLARITY_TABLE.get(label.lower())
        if pol is None:
            raise ConfigError(f"dataset {dataset_id!r}: label {label!r} has no polarity mapping")
        return pol
    raise ConfigError(f"dataset {dataset_id!r}: label {label!r} has no polarity mapping")


# ---------------------------------------------------------------------------
# feature sidecars


def write_feature_sidecar(path, features):
    arr = np.ascontiguousarray(np.asarray(features, dtype=np.float32))
    if arr.ndim != 2:
        raise ContractError(f"sidecar features must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_feature_sidecar(path):
    path = Path(path)
    if not path.exists():
        raise DataError("feature sidecar not found", path=str(path))
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != SIDECAR_MAGIC:
        raise DataError("bad sidecar magic", path=str(path))
    rows, cols = struct.unpack("<II", blob[4:12])
    expect = 12 + rows * cols * 4
    if len(blob) != expect:
        raise DataError(f"sidecar payload is {len(blob)} bytes, expected {expect}", path=str(path))
    data = np.frombuffer(blob[12:], dtype="<f4").reshape(rows, cols)
    return np.ascontiguousarray(data)


# ---------------------------------------------------------------------------
# corpus loading / serialization


def _load_features(value, dim, field, path, line, base_dir):
    if value is None:
        if dim is not None:
            # modality declared but absent for this record is fine; records
            # carry whatever subset they have
            return None
        return None
    if dim is None:
        raise DataError(f"{field} present but the dataset declares no {field} features", line=line, path=path)
    if isinstance(value, str):
        arr = read_feature_sidecar(Path(base_dir) / value)
    elif isinstance(value, list):
        try:
            arr = np.asarray(value, dtype=np.float32)
        except (TypeError, ValueError):
            raise DataError(f"{field} must be a rectangular array of numbers", line=line, path=path) from None
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DataError(f"{field} must be a frames x dim array", line=line, path=path)
    else:
        raise DataError(f"{field} must be null, a nested array, or a sidecar path", line=line, path=path)
    if arr.shape[0] == 0:
        raise DataError(f"{field} has zero frames", line=line, path=path)
    if arr.shape[1] != dim:
        raise DataError(f"{field} has dimension {arr.shape[1]}, registry declares {dim}", line=line, path=path)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{field} contains non-finite values", line=line, path=path)
    return np.ascontiguousarray(arr)


def _parse_record(obj, registry, path, line, base_dir):
    keys = set(obj)
    expected = set(RECORD_KEYS)
    if keys != expected:
        extra = sorted(keys - expected)
        missing = sorted(expected - keys)
        parts = []
        if missing:
            parts.append(f"missing keys {missing}")
        if extra:
            parts.append(f"unexpected keys {extra}")
        raise DataError("; ".join(parts), line=line, path=path)
    try:
        task = TaskType(obj["task_type"])
    except ValueError:
        raise DataError(f"unknown task_type {obj['task_type']!r}", line=line, path=path) from None
    dataset_id = obj["dataset_id"]
    if not isinstance(dataset_id, str) or dataset_id not in registry:
        raise DataError(f"dataset {dataset_id!r} is not declared in the registry", line=line, path=path)
    spec = registry.spec(dataset_id)
    if spec.task_type is not task:
        raise DataError(
            f"record task {task.value!r} conflicts with registry task {spec.task_type.value!r} for {dataset_id!r}",
            line=line, path=path)
    text = obj["text"]
    if not isinstance(text, str) or not text.strip():
        raise DataError("text must be a non-empty string", line=line, path=path)

    audio = _load_features(obj["audio"], spec.acoustic_dim, "audio", path, line, base_dir)
    image = _load_features(obj["image"], spec.visual_dim, "image", path, line, base_dir)

    context = obj["context"]
    speaker = obj["speaker_id"]
    utt_index = obj["utterance_index"]
    if task is TaskType.ERC:
        if not isinstance(speaker, str) or not speaker:
            raise DataError("conversation records need a speaker_id", line=line, path=path)
        if not isinstance(utt_index, int) or isinstance(utt_index, bool) or utt_index < 0:
            raise DataError("conversation records need a non-negative utterance_index", line=line, path=path)
        if context is None:
            raise DataError("conversation records need a context list (may be empty)", line=line, path=path)
        if not isinstance(context, list):
            raise DataError("context must be a list of [speaker_id, text] pairs", line=line, path=path)
        pairs = []
        for item in context:
            if (not isinstance(item, list) or len(item) != 2
                    or not isinstance(item[0], str) or not isinstance(item[1], str) or not item[1].strip()):
                raise DataError("context entries must be [speaker_id, text] pairs", line=line, path=path)
            pairs.append((item[0], item[1]))
        context = tuple(pairs)
    else:
        if context is not None or speaker is not None or utt_index is not None:
            raise DataError(
                "context, speaker_id and utterance_index are only valid for conversation records",
                line=line, path=path)

    label = obj["label"]
    if spec.answer.scalar:
        if isinstance(label, bool) or not isinstance(label, (int, float)):
            raise DataError(f"label must be a number for {dataset_id!r}", line=line, path=path)
        label = float(label)
        if not (spec.answer.lo <= label <= spec.answer.hi):
            raise DataError(
                f"label {label} outside [{spec.answer.lo}, {spec.answer.hi}]", line=line, path=path)
    else:
        if not isinstance(label, str) or label not in spec.answer.labels:
            raise DataError(f"label {label!r} is not in the answer set of {dataset_id!r}", line=line, path=path)

    return SaevalRecord(
        task_type=task,
        dataset_id=dataset_id,
        text=text,
        audio=audio,
        image=image,
        context=context,
        speaker_id=speaker,
        utterance_index=utt_index,
        label=label,
    )


def load_corpus(path, registry):
    """Parse and validate a JSONL corpus. Raises DataError naming the line of
    the first malformed record."""
    path = Path(path)
    if not path.exists():
        raise DataError("corpus file not found", path=str(path))
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", line=lineno, path=str(path)) from None
            if not isinstance(obj, dict):
                raise DataError("record must be a JSON object", line=lineno, path=str(path))
            records.append(_parse_record(obj, registry, str(path), lineno, path.parent))
    return records


def _features_to_json(arr):
    if arr is None:
        return None
    return [[float(x) for x in row] for row in np.asarray(arr, dtype=np.float32)]


def record_to_json(record):
    return {
        "task_type": record.task_type.value,
        "dataset_id": record.dataset_id,
        "text": record.text,
        "audio": _features_to_json(record.audio),
        "image": _features_to_json(record.image),
        "context": [[s, t] for s, t in record.context] if record.context is not None else None,
        "speaker_id": record.speaker_id,
        "utterance_index": record.utterance_index,
        "label": record.label,
    }


def serialize_corpus(records, path):
    """Write records back to JSONL. Sidecar-loaded features are inlined."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record), ensure_ascii=False))
            fh.write("\n")


# ---------------------------------------------------------------------------
# polarity pools and combined queries


@dataclass
class DataPool:
    polarity: Polarity
    records: list


def build_pools(records):
    """Partition records into three polarity pools via ``to_polarity``."""
    pools = {pol: DataPool(polarity=pol, records=[]) for pol in Polarity}
    for record in records:
        pools[to_polarity(record.label, record.dataset_id)].records.append(record)
    return pools


def _merge_features(a, b, field):
    if a is None and b is None:
        return None
    if a is None:
        return np.array(b, copy=True)
    if b is None:
        return np.array(a, copy=True)
    if a.shape[1] != b.shape[1]:
        raise ContractError(
            f"cannot combine records: {field} dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    return np.concatenate([a, b], axis=0)


def combine_queries(a, b):
    """Join two same-polarity records into one two-segment training record.

    The output carries both texts (segment boundary preserved for the prompt
    builder), merged modal features, and the shared polarity as its label. It
    belongs to the reserved pool dataset.
    """
    pol_a = to_polarity(a.label, a.dataset_id)
    pol_b = to_polarity(b.label, b.dataset_id)
    if pol_a is not pol_b:
        raise ContractError(f"cannot combine records of polarity {pol_a.value} and {pol_b.value}")
    parts = (a.text_parts or (a.text,)) + (b.text_parts or (b.text,))
    return SaevalRecord(
        task_type=TaskType.CA,
        dataset_id=POOL_DATASET_ID,
        text=" ".join(parts),
        audio=_merge_features(a.audio, b.audio, "audio"),
        image=_merge_features(a.image, b.image, "image"),
        context=None,
        speaker_id=None,
        utterance_index=None,
        label=pol_a.value,
        text_parts=parts,
    )


def pool_dataset_spec(acoustic_dim=None, visual_dim=None):
    """Registry entry for the reserved combined-query dataset."""
    return DatasetSpec(
        dataset_id=POOL_DATASET_ID,
        task_type=TaskType.CA,
        answer=AnswerSet.categorical([p.value for p in Polarity]),
        acoustic_dim=acoustic_dim,
        visual_dim=visual_dim,
        metrics=("wa",),
    )
