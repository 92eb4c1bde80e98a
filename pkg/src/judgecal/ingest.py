"""Loading, validation, and partitioning of cached judge outputs.

A judge run is stored as line-delimited records, one JSON object per line,
each carrying the log-scores a judge prompt assigned to the answer choices
of one sample.  Image embeddings live in a separate table keyed by the same
sample ids.  A :class:`DatasetBundle` ties the two together with a split
assignment (validation / support / test).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ArityError,
    CapacityError,
    DimensionError,
    FormatError,
    IntegrityError,
    ValidationError,
)

SPLIT_NAMES = ("validation", "support", "test")

RECORDS_FILENAME = "records.jsonl"
EMBEDDINGS_FILENAME = "embeddings.csv"
SPLITS_FILENAME = "splits.json"


def normalize_choice_logprobs(raw) -> np.ndarray:
    """Map raw per-choice log-scores to a probability vector.

    Judge APIs return unnormalized log-scores; the scores are
    exponentiated and renormalized, so any constant shift of the inputs
    leaves the output unchanged.  The largest score is subtracted before
    exponentiation to keep the computation stable for very negative inputs.

    Parameters
    ----------
    raw : array-like of float
        Log-scores for the answer choices, at least two entries.

    Returns
    -------
    numpy.ndarray
        Probabilities, nonnegative and summing to one.
    """
    values = np.asarray(raw, dtype=np.float64)
    if values.ndim != 1:
        raise DimensionError("log-scores must be a flat vector")
    if values.size < 2:
        raise ArityError(f"need at least 2 choice log-scores, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("choice log-scores must be finite")
    shifted = values - values.max()
    expd = np.exp(shifted)
    return expd / expd.sum()


@dataclass(frozen=True)
class JudgeRecord:
    """One judge emission: a prompt's log-scores over a sample's choices."""

    sample_id: str
    prompt_id: str
    class_logprobs: tuple
    label: int | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "class_logprobs", tuple(float(v) for v in self.class_logprobs)
        )
        if len(self.class_logprobs) < 2:
            raise ArityError(
                f"record {self.sample_id}/{self.prompt_id}: need at least 2 "
                f"choice log-scores, got {len(self.class_logprobs)}"
            )
        if not all(np.isfinite(v) for v in self.class_logprobs):
            raise ValidationError(
                f"record {self.sample_id}/{self.prompt_id}: non-finite log-score"
            )
        if self.label is not None:
            if not isinstance(self.label, (int, np.integer)) or isinstance(
                self.label, bool
            ):
                raise ValidationError(
                    f"record {self.sample_id}/{self.prompt_id}: label must be an integer"
                )
            if not 0 <= self.label < len(self.class_logprobs):
                raise ValidationError(
                    f"record {self.sample_id}/{self.prompt_id}: label "
                    f"{self.label} outside [0, {len(self.class_logprobs)})"
                )

    def probs(self) -> np.ndarray:
        """Normalized choice probabilities for this record."""
        return normalize_choice_logprobs(self.class_logprobs)


class EmbeddingTable:
    """Immutable map from sample id to a fixed-dimension feature vector."""

    def __init__(self, entries: Mapping[str, "np.ndarray"]):
        table: dict[str, np.ndarray] = {}
        dim = None
        for sample_id, vec in entries.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise DimensionError(f"embedding for {sample_id!r} is not a vector")
            if dim is None:
                dim = int(arr.size)
            elif arr.size != dim:
                raise DimensionError(
                    f"embedding for {sample_id!r} has dimension {arr.size}, "
                    f"expected {dim}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"embedding for {sample_id!r} is not finite")
            if not np.any(arr):
                raise ValidationError(f"embedding for {sample_id!r} is the zero vector")
            arr.setflags(write=False)
            table[sample_id] = arr
        self._table = table
        self._dim = 0 if dim is None else dim

    @property
    def dim(self) -> int:
        return self._dim

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._table

    def __getitem__(self, sample_id) -> np.ndarray:
        return self._table[sample_id]

    def ids(self) -> list:
        """Sample ids in insertion order."""
        return list(self._table)

    def matrix(self, sample_ids: Sequence[str]) -> np.ndarray:
        """Stack the vectors for ``sample_ids`` into an (n, dim) array."""
        missing = [s for s in sample_ids if s not in self._table]
        if missing:
            raise IntegrityError(f"no embedding for sample ids {missing[:5]}")
        if not sample_ids:
            return np.empty((0, self._dim))
        return np.stack([self._table[s] for s in sample_ids])


@dataclass
class DatasetBundle:
    """Judge records, embeddings, and a split assignment for one dataset.

    ``records`` maps sample id to a per-prompt record map; ``prompt_ids``
    fixes the prompt order used by every downstream matrix.  Validation and
    test ids never overlap, and validation never overlaps support.  Support
    ids may coincide with test ids: support samples contribute embeddings
    only, so no label information can leak through the overlap.
    """

    records: dict
    embeddings: EmbeddingTable
    prompt_ids: tuple
    validation_ids: frozenset = frozenset()
    support_ids: frozenset = frozenset()
    test_ids: frozenset = frozenset()

    def samples(self, split: str) -> list:
        """Sorted sample ids of one split (sorted for determinism)."""
        if split not in SPLIT_NAMES:
            raise ValidationError(f"unknown split {split!r}")
        ids = {
            "validation": self.validation_ids,
            "support": self.support_ids,
            "test": self.test_ids,
        }[split]
        return sorted(ids)

    def label_of(self, sample_id: str) -> int | None:
        for record in self.records.get(sample_id, {}).values():
            if record.label is not None:
                return record.label
        return None

    def choice_probs(self, sample_id: str) -> dict:
        """Per-prompt normalized choice probabilities for one sample."""
        if sample_id not in self.records:
            raise IntegrityError(f"no records for sample {sample_id!r}")
        return {pid: rec.probs() for pid, rec in self.records[sample_id].items()}

    def with_splits(
        self,
        validation: Iterable[str],
        support: Iterable[str],
        test: Iterable[str],
    ) -> "DatasetBundle":
        return replace(
            self,
            validation_ids=frozenset(validation),
            support_ids=frozenset(support),
            test_ids=frozenset(test),
        )

    def validate(self, require_test_labels: bool = True) -> None:
        """Check cross-record consistency; raise on the first violation.

        Validation and test samples must carry a label (test labels are
        optional for unlabeled-preference evaluation data) and exactly one
        record per prompt in ``prompt_ids``.  Support samples only need an
        embedding.
        """
        if self.validation_ids & self.test_ids:
            raise IntegrityError("validation and test splits overlap")
        if self.validation_ids & self.support_ids:
            raise IntegrityError("validation and support splits overlap")
        prompt_set = set(self.prompt_ids)
        for split, need_label in (("validation", True), ("test", require_test_labels)):
            for sample_id in self.samples(split):
                present = set(self.records.get(sample_id, {}))
                if present != prompt_set:
                    raise IntegrityError(
                        f"{split} sample {sample_id!r} covered by prompts "
                        f"{sorted(present)} instead of the full prompt list"
                    )
                labels = {
                    rec.label
                    for rec in self.records[sample_id].values()
                    if rec.label is not None
                }
                if len(labels) > 1:
                    raise IntegrityError(
                        f"sample {sample_id!r} has conflicting labels {sorted(labels)}"
                    )
                if need_label and not labels:
                    raise IntegrityError(f"{split} sample {sample_id!r} has no label")
        for sample_id in self.samples("support"):
            if sample_id not in self.embeddings:
                raise IntegrityError(f"support sample {sample_id!r} has no embedding")


def _parse_record_lines(lines: Iterable[str], source: str):
    records: list[JudgeRecord] = []
    splits: dict[str, str] = {}
    seen: set = set()
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{source}:{lineno}: not a valid record line ({exc.msg})")
        if not isinstance(obj, dict):
            raise FormatError(f"{source}:{lineno}: record line is not an object")
        try:
            sample_id = str(obj["sample_id"])
            prompt_id = str(obj["prompt_id"])
            logprobs = obj["class_logprobs"]
        except KeyError as exc:
            raise FormatError(f"{source}:{lineno}: missing key {exc.args[0]!r}")
        if not isinstance(logprobs, (list, tuple)):
            raise FormatError(f"{source}:{lineno}: class_logprobs is not an array")
        if len(logprobs) < 2:
            raise ArityError(
                f"{source}:{lineno}: need at least 2 choice log-scores, "
                f"got {len(logprobs)}"
            )
        label = obj.get("label")
        if label is not None and not isinstance(label, int):
            raise FormatError(f"{source}:{lineno}: label is not an integer")
        key = (sample_id, prompt_id)
        if key in seen:
            raise IntegrityError(
                f"{source}:{lineno}: duplicate record for sample "
                f"{sample_id!r} prompt {prompt_id!r}"
            )
        seen.add(key)
        try:
            records.append(
                JudgeRecord(
                    sample_id=sample_id,
                    prompt_id=prompt_id,
                    class_logprobs=tuple(logprobs),
                    label=label,
                )
            )
        except (ValidationError, ArityError) as exc:
            raise type(exc)(f"{source}:{lineno}: {exc}")
        split = obj.get("split")
        if split is not None:
            if split not in SPLIT_NAMES:
                raise FormatError(f"{source}:{lineno}: unknown split {split!r}")
            previous = splits.get(sample_id)
            if previous is not None and previous != split:
                raise IntegrityError(
                    f"{source}:{lineno}: sample {sample_id!r} assigned to both "
                    f"{previous!r} and {split!r}"
                )
            splits[sample_id] = split
    return records, splits


def load_judge_records(path, fmt: str = "jsonl") -> list:
    """Read judge records from a line-delimited file.

    Only the ``jsonl`` format is defined; the parameter exists so callers
    can state the format explicitly and fail loudly on anything else.
    """
    if fmt != "jsonl":
        raise ValidationError(f"unsupported record format {fmt!r}")
    with open(path, "r", encoding="utf-8") as fh:
        records, _ = _parse_record_lines(fh, os.fspath(path))
    return records


def load_embeddings(path) -> EmbeddingTable:
    """Read an embedding table from CSV or line-delimited JSON.

    CSV rows look like ``sample_id,v1,...,vd``; JSON lines are objects with
    ``sample_id`` and ``embedding`` keys.  The two styles are distinguished
    by the first non-blank character of the file.
    """
    source = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    first = next((ln for ln in lines if ln.strip()), "")
    entries: dict[str, list] = {}
    dim = None
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        if first.lstrip().startswith("{"):
            try:
                obj = json.loads(text)
                sample_id = str(obj["sample_id"])
                vector = [float(v) for v in obj["embedding"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise FormatError(f"{source}:{lineno}: not a valid embedding line")
        else:
            parts = text.split(",")
            if len(parts) < 2:
                raise FormatError(f"{source}:{lineno}: expected sample_id,v1,...,vd")
            sample_id = parts[0]
            try:
                vector = [float(v) for v in parts[1:]]
            except ValueError:
                raise FormatError(f"{source}:{lineno}: non-numeric embedding value")
        if dim is None:
            dim = len(vector)
        elif len(vector) != dim:
            raise DimensionError(
                f"{source}:{lineno}: embedding has {len(vector)} values, "
                f"expected {dim}"
            )
        if sample_id in entries:
            raise IntegrityError(f"{source}:{lineno}: duplicate sample id {sample_id!r}")
        entries[sample_id] = vector
    try:
        return EmbeddingTable(entries)
    except (ValidationError, DimensionError) as exc:
        raise type(exc)(f"{source}: {exc}")


def assemble_bundle(
    records: Sequence[JudgeRecord],
    embeddings: EmbeddingTable,
    splits: Mapping[str, str] | None = None,
) -> DatasetBundle:
    """Group records by sample and prompt into a :class:`DatasetBundle`.

    Prompt order is first-seen order in ``records``; it fixes the column
    order of every weight vector fitted downstream.
    """
    by_sample: dict[str, dict[str, JudgeRecord]] = {}
    prompt_ids: list[str] = []
    for record in records:
        per_prompt = by_sample.setdefault(record.sample_id, {})
        if record.prompt_id in per_prompt:
            raise IntegrityError(
                f"duplicate record for sample {record.sample_id!r} "
                f"prompt {record.prompt_id!r}"
            )
        per_prompt[record.prompt_id] = record
        if record.prompt_id not in prompt_ids:
            prompt_ids.append(record.prompt_id)
    bundle = DatasetBundle(
        records=by_sample,
        embeddings=embeddings,
        prompt_ids=tuple(prompt_ids),
    )
    if splits:
        bundle = bundle.with_splits(
            validation=[s for s, sp in splits.items() if sp == "validation"],
            support=[s for s, sp in splits.items() if sp == "support"],
            test=[s for s, sp in splits.items() if sp == "test"],
        )
    return bundle


def load_bundle(directory) -> DatasetBundle:
    """Load a bundle directory written by :func:`save_bundle`."""
    directory = os.fspath(directory)
    records_path = os.path.join(directory, RECORDS_FILENAME)
    embeddings_path = os.path.join(directory, EMBEDDINGS_FILENAME)
    splits_path = os.path.join(directory, SPLITS_FILENAME)
    with open(records_path, "r", encoding="utf-8") as fh:
        records, record_splits = _parse_record_lines(fh, records_path)
    embeddings = load_embeddings(embeddings_path)
    splits = dict(record_splits)
    if os.path.exists(splits_path):
        with open(splits_path, "r", encoding="utf-8") as fh:
            try:
                stored = json.load(fh)
            except json.JSONDecodeError:
                raise FormatError(f"{splits_path}: not a valid splits file")
        for split, ids in stored.items():
            if split not in SPLIT_NAMES:
                raise FormatError(f"{splits_path}: unknown split {split!r}")
            for sample_id in ids:
                splits[str(sample_id)] = split
    return assemble_bundle(records, embeddings, splits)


def save_bundle(bundle: DatasetBundle, directory) -> None:
    """Write a bundle directory: records.jsonl, embeddings.csv, splits.json.

    Floats are written with shortest round-trip precision, so a load after
    a save reproduces the bundle exactly.  Support membership lives in the
    splits file because support samples carry no record lines.
    """
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    split_of: dict[str, str] = {}
    for name in SPLIT_NAMES:
        for sample_id in bundle.samples(name):
            split_of.setdefault(sample_id, name)
    lines = []
    for sample_id in sorted(bundle.records):
        for prompt_id in bundle.prompt_ids:
            record = bundle.records[sample_id].get(prompt_id)
            if record is None:
                continue
            obj: dict = {
                "sample_id": record.sample_id,
                "prompt_id": record.prompt_id,
                "class_logprobs": list(record.class_logprobs),
            }
            if record.label is not None:
                obj["label"] = int(record.label)
            if sample_id in split_of:
                obj["split"] = split_of[sample_id]
            lines.append(json.dumps(obj))
    _atomic_write(os.path.join(directory, RECORDS_FILENAME), "\n".join(lines) + "\n")
    emb_lines = []
    for sample_id in sorted(bundle.embeddings.ids()):
        vec = bundle.embeddings[sample_id]
        emb_lines.append(",".join([sample_id] + [repr(float(v)) for v in vec]))
    _atomic_write(
        os.path.join(directory, EMBEDDINGS_FILENAME), "\n".join(emb_lines) + "\n"
    )
    splits_obj = {
        name: sorted(bundle.samples(name)) for name in SPLIT_NAMES
    }
    _atomic_write(
        os.path.join(directory, SPLITS_FILENAME),
        json.dumps(splits_obj, indent=2, sort_keys=True) + "\n",
    )


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def split_dataset(
    bundle: DatasetBundle, seed: int, n_val: int, n_support: int
) -> DatasetBundle:
    """Assign validation, support, and test splits at random.

    Validation samples are drawn from labeled, fully prompt-covered samples
    outside any pre-existing test split; a pre-existing test assignment is
    kept fixed so repeated draws under different seeds share one test set.
    Support samples are drawn from embedded samples outside validation and
    may overlap test (embeddings only, no labels are read from them).
    When the bundle has no test split, every eligible sample not drawn for
    validation becomes test.
    """
    prompt_set = set(bundle.prompt_ids)
    eligible = [
        sid
        for sid in sorted(bundle.records)
        if set(bundle.records[sid]) == prompt_set
        and bundle.label_of(sid) is not None
        and sid not in bundle.test_ids
    ]
    if n_val > len(eligible):
        raise CapacityError(
            f"requested {n_val} validation samples but only {len(eligible)} "
            f"labeled fully-covered samples are available"
        )
    rng = np.random.default_rng(seed)
    validation = set(rng.choice(eligible, size=n_val, replace=False)) if n_val else set()
    embedded = [sid for sid in sorted(bundle.embeddings.ids()) if sid not in validation]
    if n_support > len(embedded):
        raise CapacityError(
            f"requested {n_support} support samples but only {len(embedded)} "
            f"embedded samples are available"
        )
    support = (
        set(rng.choice(embedded, size=n_support, replace=False)) if n_support else set()
    )
    if bundle.test_ids:
        test = set(bundle.test_ids)
    else:
        test = {sid for sid in eligible if sid not in validation}
    out = bundle.with_splits(validation=validation, support=support, test=test)
    out.validate(require_test_labels=False)
    return out
