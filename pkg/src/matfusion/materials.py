"""Material id table, display palette and per-material impact responses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

MATERIAL_NAMES = (
    "brick", "carpet", "ceramic", "fabric", "foliage", "food", "glass",
    "hair", "leather", "metal", "mirror", "other", "painted", "paper",
    "plastic", "polished_stone", "skin", "sky", "stone", "tile",
    "wallpaper", "water", "wood",
)
N_CLASSES = len(MATERIAL_NAMES)
UNKNOWN = 255

_NAME_TO_ID = {name: i for i, name in enumerate(MATERIAL_NAMES)}

DECAL_KINDS = ("hole", "crack", "dent", "none")

# Fixed display colors (uint8 RGB), one per class id.
PALETTE = np.array([
    [178, 34, 34], [128, 0, 128], [240, 240, 230], [70, 130, 180],
    [34, 139, 34], [255, 165, 0], [135, 206, 250], [139, 69, 19],
    [101, 67, 33], [169, 169, 169], [200, 200, 255], [128, 128, 128],
    [255, 228, 196], [255, 255, 240], [255, 105, 180], [47, 79, 79],
    [255, 218, 185], [0, 191, 255], [112, 128, 144], [210, 180, 140],
    [189, 183, 107], [0, 0, 205], [160, 82, 45],
], dtype=np.uint8)


def material_id(name: str) -> int:
    try:
        return _NAME_TO_ID[name]
    except KeyError:
        raise ValueError(f"unknown material name {name!r}") from None


def material_name(mid: int) -> str:
    if mid == UNKNOWN:
        return "unknown"
    if not 0 <= mid < N_CLASSES:
        raise ValueError(f"material id {mid} out of range")
    return MATERIAL_NAMES[mid]


@dataclass(frozen=True)
class MaterialResponse:
    restitution: float
    friction: float
    hardness: float
    decal: str
    debris_count_range: tuple[int, int]
    debris_speed_fraction: float
    sound_id: str
    penetrable: bool = False

    def __post_init__(self):
        for field in ("restitution", "friction", "hardness", "debris_speed_fraction"):
            v = getattr(self, field)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{field}={v} outside [0, 1]")
        if self.decal not in DECAL_KINDS:
            raise ValueError(f"decal kind {self.decal!r} not one of {DECAL_KINDS}")
        lo, hi = self.debris_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad debris_count_range {self.debris_count_range}")
        object.__setattr__(self, "debris_count_range", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["debris_count_range"] = list(self.debris_count_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MaterialResponse:
        return cls(
            restitution=float(d["restitution"]),
            friction=float(d["friction"]),
            hardness=float(d["hardness"]),
            decal=str(d["decal"]),
            debris_count_range=tuple(d["debris_count_range"]),
            debris_speed_fraction=float(d["debris_speed_fraction"]),
            sound_id=str(d["sound_id"]),
            penetrable=bool(d.get("penetrable", False)),
        )


class ResponseTable(dict):
    """Mapping MaterialId -> MaterialResponse covering all classes."""

    def validate(self):
        missing = [MATERIAL_NAMES[i] for i in range(N_CLASSES) if i not in self]
        if missing:
            raise ValueError(f"response table missing materials: {missing}")
        return self

    def to_json(self) -> dict:
        return {MATERIAL_NAMES[k]: v.to_dict() for k, v in sorted(self.items())}

    @classmethod
    def from_json(cls, doc: dict) -> ResponseTable:
        table = cls()
        for name, fields in doc.items():
            table[material_id(name)] = MaterialResponse.from_dict(fields)
        return table.validate()


def load_response_table(path: str | Path | None = None) -> ResponseTable:
    """Load a response table; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("matfusion").joinpath("data/materials.json").read_text()
    else:
        text = Path(path).read_text()
    return ResponseTable.from_json(json.loads(text))


def save_response_table(table: ResponseTable, path: str | Path):
    Path(path).write_text(json.dumps(table.to_json(), indent=2) + "\n")
