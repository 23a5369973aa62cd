"""The 50-landmark facial schema and the default clinical measurement set."""
from __future__ import annotations

from dataclasses import dataclass, field

MIDLINE = ["Tr", "G", "N", "Prn", "C", "Sn", "Ls", "Sto", "Li", "Sl", "Pg", "Gn"]
PAIRED = ["T", "Pra", "Sa", "Pa", "Sba", "Ft", "Zy", "Go", "Os", "Ex", "Or", "En",
          "Chk", "Ac", "Al", "Itn", "Stn", "Cph", "Ch"]

LANDMARK_NAMES = (MIDLINE + [f"{p}_R" for p in PAIRED] + [f"{p}_L" for p in PAIRED])

FULL_NAMES = {
    "Tr": "Trichion", "G": "Glabella", "N": "Nasion", "Prn": "Pronasale",
    "C": "Columella", "Sn": "Subnasale", "Ls": "Labiale Superius", "Sto": "Stomion",
    "Li": "Labiale Inferius", "Sl": "Sublabiale", "Pg": "Pogonion", "Gn": "Gnathion",
    "T": "Tragion", "Pra": "Preaurale", "Sa": "Superaurale", "Pa": "Postaurale",
    "Sba": "Subaurale", "Ft": "Frontotemporale", "Zy": "Zygion", "Go": "Gonion",
    "Os": "Orbitale Superius", "Ex": "Exocanthion", "Or": "Orbitale", "En": "Endocanthion",
    "Chk": "Malare Cheek", "Ac": "Alar crest", "Al": "Alare",
    "Itn": "Inferior terminal point of the nostril axis",
    "Stn": "Superior terminal point of the nostril axis", "Cph": "Crista Philtri",
    "Ch": "Cheilion",
}

# peripheral ear-region landmarks, most affected by hair occlusion
EAR_LANDMARKS = [f"{p}_{s}" for s in ("R", "L") for p in ("Pra", "Sa", "Pa", "Sba")]


def region_of(name: str) -> str:
    if name.endswith("_R"):
        return "right"
    if name.endswith("_L"):
        return "left"
    return "midline"


DEFAULT_REGIONS = {name: region_of(name) for name in LANDMARK_NAMES}

DEFAULT_DISTANCES = [
    ("Tr", "N"), ("N", "Pg"), ("N", "Sn"), ("Sn", "Pg"),
    ("Ex_R", "Ex_L"), ("Zy_R", "Zy_L"), ("T_R", "T_L"), ("Ch_R", "Ch_L"),
    ("Cph_R", "Cph_L"), ("Go_R", "Go_L"),
    ("T_R", "N"), ("T_R", "Sn"), ("T_R", "Pg"), ("Pg", "Go_R"), ("T_R", "Go_R"),
    ("T_L", "N"), ("T_L", "Sn"), ("T_L", "Pg"), ("Pg", "Go_L"), ("T_L", "Go_L"),
]

DEFAULT_ANGLES = [
    ("T_R", "N", "T_L"), ("T_R", "Prn", "T_L"), ("T_R", "Pg", "T_L"),
    ("Go_R", "Pg", "Go_L"), ("N", "Sn", "Pg"), ("N", "Prn", "Pg"),
    ("Sn", "N", "Prn"), ("T_R", "Go_R", "Pg"), ("T_L", "Go_L", "Pg"),
]


@dataclass
class MeasurementSpec:
    """Named linear distances (pairs), angles (triples, vertex in the middle) and regions."""

    distances: list = field(default_factory=lambda: list(DEFAULT_DISTANCES))
    angles: list = field(default_factory=lambda: list(DEFAULT_ANGLES))
    regions: dict = field(default_factory=lambda: dict(DEFAULT_REGIONS))

    def validate(self, names):
        known = set(names)
        for item in list(self.distances) + list(self.angles):
            missing = [n for n in item if n not in known]
            if missing:
                raise KeyError(f"measurement {'-'.join(item)} references unknown landmark(s) {missing}")
        missing = [n for n in names if n not in self.regions]
        if missing:
            raise KeyError(f"region map does not cover landmarks {missing}")

    def restricted_to(self, names):
        keep = set(names)
        return MeasurementSpec(
            [d for d in self.distances if set(d) <= keep],
            [a for a in self.angles if set(a) <= keep],
            {k: v for k, v in self.regions.items() if k in keep},
        )

    def to_dict(self):
        return {"distances": [list(d) for d in self.distances],
                "angles": [list(a) for a in self.angles],
                "regions": dict(self.regions)}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(x) for x in d.get("distances", DEFAULT_DISTANCES)],
                   [tuple(x) for x in d.get("angles", DEFAULT_ANGLES)],
                   dict(d.get("regions", DEFAULT_REGIONS)))
