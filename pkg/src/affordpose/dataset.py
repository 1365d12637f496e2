"""JSON Lines dataset records.

Each line is one record; ``mask_path`` is relative to the dataset file.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import jsonschema
import numpy as np

from .affordance import AffordanceDescription
from .camera import Camera
from .hand_model import HandPose
from .occlusion import OcclusionLabels, read_pgm


class DatasetError(ValueError):
    pass


_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_pose = {
    "type": "object",
    "required": ["theta"],
    "additionalProperties": False,
    "properties": {
        "theta": {"type": "array", "items": _vec3, "minItems": 15, "maxItems": 15},
        "global_rot": _vec3,
        "translation": _vec3,
    },
}
_flags = {"type": "array", "items": {"type": "boolean"}, "minItems": 21, "maxItems": 21}
RECORD_SCHEMA = {
    "type": "object",
    "required": ["id", "camera", "description"],
    "additionalProperties": False,
    "anyOf": [{"required": ["gt_pose"]}, {"required": ["initial_pose"]}],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "subject": {"type": "integer"},
        "gt_pose": _pose,
        "initial_pose": _pose,
        "refined_pose": _pose,
        "n_r": {"type": "integer"},
        "camera": {
            "type": "object",
            "required": ["fx", "fy", "cx", "cy", "image_size"],
            "additionalProperties": False,
            "properties": {
                "fx": {"type": "number", "exclusiveMinimum": 0},
                "fy": {"type": "number", "exclusiveMinimum": 0},
                "cx": {"type": "number"},
                "cy": {"type": "number"},
                "rotation": {"type": "array", "items": _vec3, "minItems": 3, "maxItems": 3},
                "translation": _vec3,
                "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1},
                               "minItems": 2, "maxItems": 2},
            },
        },
        "keypoints2d_observed": {
            "type": "array", "minItems": 21, "maxItems": 21,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "mask_path": {"type": "string"},
        "description": {
            "type": "object",
            "required": ["object_category", "object_shape", "object_size", "interaction", "intention",
                         "grasp_taxonomy"],
            "additionalProperties": False,
            "properties": {
                "object_category": {"type": "string", "minLength": 1},
                "object_shape": {"type": "string", "minLength": 1},
                "object_size": {"enum": ["small", "medium", "large"]},
                "interaction": {"type": "string", "minLength": 1},
                "intention": {"type": "string", "minLength": 1},
                "grasp_taxonomy": {"type": "integer", "minimum": 0, "maximum": 27},
                "summary": {"type": "string"},
            },
        },
        "occlusion": {
            "type": "object",
            "required": ["self_occluded", "object_occluded"],
            "additionalProperties": False,
            "properties": {
                "self_occluded": _flags,
                "object_occluded": _flags,
                "count": {"type": "integer", "minimum": 0, "maximum": 21},
                "bin": {"enum": ["Low", "Medium", "High"]},
            },
        },
    },
}
_validator = jsonschema.Draft202012Validator(RECORD_SCHEMA)


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    id: str
    camera: Camera
    description: AffordanceDescription
    gt_pose: HandPose = None
    initial_pose: HandPose = None
    keypoints2d_observed: np.ndarray = None
    mask_path: str = None
    occlusion: OcclusionLabels = None
    subject: int = None
    refined_pose: HandPose = None
    n_r: int = None

    def __post_init__(self):
        if self.gt_pose is None and self.initial_pose is None:
            raise DatasetError(f"record {self.id}: needs gt_pose or initial_pose")

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = {"id": self.id}
        if self.subject is not None:
            d["subject"] = int(self.subject)
        for name in ("gt_pose", "initial_pose", "refined_pose"):
            pose = getattr(self, name)
            if pose is not None:
                d[name] = pose.to_dict()
        if self.n_r is not None:
            d["n_r"] = int(self.n_r)
        d["camera"] = self.camera.to_dict()
        if self.keypoints2d_observed is not None:
            d["keypoints2d_observed"] = np.asarray(self.keypoints2d_observed).tolist()
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        d["description"] = self.description.to_dict()
        if self.occlusion is not None:
            d["occlusion"] = self.occlusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        def pose(name):
            return HandPose.from_dict(d[name]) if name in d else None
        return cls(
            id=d["id"],
            camera=Camera.from_dict(d["camera"]),
            description=AffordanceDescription.from_dict(d["description"]),
            gt_pose=pose("gt_pose"),
            initial_pose=pose("initial_pose"),
            keypoints2d_observed=(np.asarray(d["keypoints2d_observed"], dtype=np.float64)
                                  if "keypoints2d_observed" in d else None),
            mask_path=d.get("mask_path"),
            occlusion=OcclusionLabels.from_dict(d["occlusion"]) if "occlusion" in d else None,
            subject=d.get("subject"),
            refined_pose=pose("refined_pose"),
            n_r=d.get("n_r"),
        )

    def load_mask(self, base_dir):
        if self.mask_path is None:
            return None
        return read_pgm(Path(base_dir) / self.mask_path)


def _field_of(error):
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<record>"


def parse_record(line, lineno=0, source="<dataset>", base_dir=None):
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from None
    errors = sorted(_validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        msg = err.message
        if err.validator == "anyOf" and not err.absolute_path:
            msg = "record needs gt_pose or initial_pose"
        raise DatasetError(f"{source}:{lineno}: field '{_field_of(err)}': {msg}")
    try:
        record = DatasetRecord.from_dict(data)
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"{source}:{lineno}: {exc}") from None
    if base_dir is not None and record.mask_path is not None:
        if not (Path(base_dir) / record.mask_path).exists():
            raise DatasetError(f"{source}:{lineno}: field 'mask_path': file not found: {record.mask_path}")
    return record


def read_dataset(path):
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append(parse_record(line, lineno, str(path), path.parent))
    return records


def write_dataset(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def split_by_subject(records, test_fraction=0.3):
    """Disjoint train/test subjects: the highest-numbered ~30% go to test."""
    subjects = sorted({r.subject if r.subject is not None else 0 for r in records})
    n_test = max(1, int(np.ceil(test_fraction * len(subjects)))) if len(subjects) > 1 else 0
    test_subjects = set(subjects[len(subjects) - n_test:])
    train = [r for r in records if (r.subject or 0) not in test_subjects]
    test = [r for r in records if (r.subject or 0) in test_subjects]
    return train, test


def select_split(records, split, part):
    """``split`` is None / "none" (everything) or "s1-like"; ``part`` is train/test/all."""
    if split in (None, "none") or part == "all":
        return list(records)
    if split != "s1-like":
        raise ValueError(f"unknown split {split!r}")
    train, test = split_by_subject(records)
    return train if part == "train" else test


def subsample(records, every=10):
    """Keep every ``every``-th record (one-tenth by default)."""
    return list(records)[::every]
