"""Grid-world two-modality QA data with a day -> night regime shift.

Scenes hold 1-6 coloured shapes on a ``G x G`` grid.  The camera rendering is a
token grid that loses objects to darkness at night; the range rendering
is a regime-independent object list that carries shape and position but
never colour.  Answers always come from :func:`oracle_answer`, which
enumerates the scene.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
QTYPES = ("exists", "count", "side", "color")
ANSWERS = ("yes", "no", "0", "1", "2", "3", "4", "5", "6", "red", "green", "blue")
SPLITS = ("day-train", "day-test", "night-train", "night-test")
MAX_OBJECTS = 6

PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}

# camera cell tokens; a corrupted cell defaults to looking like background
CAM_EMPTY = 0
CAM_NOISE = 1 + len(SHAPES) * len(COLORS)
CAM_VOCAB = CAM_NOISE + 1

RANGE_NULL = (-1, -1, -1)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    x: int
    y: int


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[SceneObject, ...]
    grid_size: int = 8

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"scene {self.scene_id}: {len(self.objects)} objects, need 1-6")
        cells = {(o.x, o.y) for o in self.objects}
        if len(cells) != len(self.objects):
            raise ValueError(f"scene {self.scene_id}: two objects share a cell")
        for o in self.objects:
            if not (0 <= o.x < self.grid_size and 0 <= o.y < self.grid_size):
                raise ValueError(f"scene {self.scene_id}: object outside the grid")


@dataclass(frozen=True)
class QASample:
    id: int
    scene_id: int
    regime: str
    qtype: str
    question: str
    answer: str
    objects: tuple[SceneObject, ...] = field(repr=False)
    grid_size: int = 8

    @property
    def scene(self) -> Scene:
        return Scene(self.scene_id, self.objects, self.grid_size)

    def to_json(self) -> dict:
        return {"id": self.id, "regime": self.regime, "qtype": self.qtype,
                "objects": [asdict(o) for o in self.objects],
                "question": self.question, "answer": self.answer}


@dataclass(frozen=True)
class RegimeConfig:
    night_corruption_prob: float = 0.9
    noise_token: int = CAM_EMPTY

    def __post_init__(self):
        if not 0.0 <= self.night_corruption_prob <= 1.0:
            raise ValueError("night_corruption_prob must lie in [0, 1]")


def child_seed(seed: int, scene_id: int) -> int:
    return int(seed) ^ int(scene_id)


# --- oracle ------------------------------------------------------------------

def question_text(qtype: str, shape: str) -> str:
    if qtype == "exists":
        return f"is there a {shape} ?"
    if qtype == "count":
        return f"how many {PLURAL[shape]} are there ?"
    if qtype == "side":
        return f"is there a {shape} on the left ?"
    if qtype == "color":
        return f"what color is the {shape} ?"
    raise ValueError(f"unknown question type {qtype!r}")


def parse_question(question: str) -> tuple[str, str]:
    words = question.split()
    if words[:2] == ["how", "many"]:
        return "count", next(s for s, p in PLURAL.items() if p == words[2])
    if words[:2] == ["what", "color"]:
        return "color", words[4]
    if "left" in words:
        return "side", words[3]
    return "exists", words[3]


def oracle_answer(scene: Scene, qtype: str, shape: str) -> str | None:
    """Answer by enumerating the scene; ``None`` when the question is ill-posed."""
    matches = [o for o in scene.objects if o.shape == shape]
    if qtype == "exists":
        return "yes" if matches else "no"
    if qtype == "count":
        return str(len(matches))
    if qtype == "side":
        half = scene.grid_size // 2
        return "yes" if any(o.x < half for o in matches) else "no"
    if qtype == "color":
        return matches[0].color if len(matches) == 1 else None
    raise ValueError(f"unknown question type {qtype!r}")


# --- renderings --------------------------------------------------------------

def camera_cell_token(shape: str, color: str) -> int:
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def render_camera_tokens(scene: Scene, regime: str, config: RegimeConfig = RegimeConfig(),
                         seed: int = 0) -> np.ndarray:
    """``G x G`` grid indexed ``[x, y]`` of cell tokens (0 empty, noise at night)."""
    grid = np.full((scene.grid_size, scene.grid_size), CAM_EMPTY, dtype=np.int64)
    for o in scene.objects:
        grid[o.x, o.y] = camera_cell_token(o.shape, o.color)
    if regime == "night":
        rng = np.random.default_rng([child_seed(seed, scene.scene_id), 1])
        for o in sorted(scene.objects, key=lambda o: (o.x, o.y)):
            if rng.random() < config.night_corruption_prob:
                grid[o.x, o.y] = config.noise_token
    elif regime != "day":
        raise ValueError(f"unknown regime {regime!r}")
    return grid


def render_range_tokens(scene: Scene) -> list[tuple[int, int, int]]:
    """One ``(shape, x, y)`` triple per object, sorted by position, padded to
    :data:`MAX_OBJECTS` with ``RANGE_NULL``."""
    toks = sorted((SHAPES.index(o.shape), o.x, o.y) for o in scene.objects)
    return toks + [RANGE_NULL] * (MAX_OBJECTS - len(toks))


# --- generation --------------------------------------------------------------

def sample_scene(scene_id: int, rng: np.random.Generator, grid_size: int = 8) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = rng.choice(grid_size * grid_size, size=n, replace=False)
    objs = tuple(SceneObject(SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(3))],
                             int(c) // grid_size, int(c) % grid_size) for c in cells)
    return Scene(scene_id, objs, grid_size)


def _sample_question(scene: Scene, qtype: str, rng: np.random.Generator) -> tuple[str, str] | None:
    present = sorted({o.shape for o in scene.objects}, key=SHAPES.index)
    absent = [s for s in SHAPES if s not in present]
    if qtype in ("exists", "side"):
        # balance yes/no where the scene allows it
        want_yes = bool(rng.integers(2))
        if qtype == "exists":
            pool = present if (want_yes or not absent) else absent
        else:
            half = scene.grid_size // 2
            left = sorted({o.shape for o in scene.objects if o.x < half}, key=SHAPES.index)
            not_left = [s for s in SHAPES if s not in left]
            pool = left if (want_yes and left) or not not_left else not_left
        shape = pool[int(rng.integers(len(pool)))]
    elif qtype == "count":
        shape = SHAPES[int(rng.integers(3))]
    else:
        unique = [s for s in SHAPES if sum(o.shape == s for o in scene.objects) == 1]
        if not unique:
            return None
        shape = unique[int(rng.integers(len(unique)))]
    answer = oracle_answer(scene, qtype, shape)
    if answer is None:
        return None
    return question_text(qtype, shape), answer


def generate_scene_samples(scene: Scene, regime: str, questions_per_scene: int,
                           seed: int, first_id: int = 0) -> list[QASample]:
    rng = np.random.default_rng([child_seed(seed, scene.scene_id), 2])
    out: list[QASample] = []
    for k in range(questions_per_scene):
        qtype = QTYPES[k % len(QTYPES)]
        qa = _sample_question(scene, qtype, rng)
        while qa is None:  # infeasible for this scene: resample the type
            qtype = QTYPES[int(rng.integers(3))]
            qa = _sample_question(scene, qtype, rng)
        out.append(QASample(first_id + k, scene.scene_id, regime, qtype, qa[0], qa[1],
                            scene.objects, scene.grid_size))
    return out


@dataclass
class Dataset:
    splits: dict[str, list[QASample]]
    seed: int
    config: dict

    def __getitem__(self, split: str) -> list[QASample]:
        return self.splits[split]

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def split_hash(self, split: str) -> str:
        h = hashlib.sha256()
        for s in self.splits[split]:
            h.update(json.dumps(s.to_json(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()

    def manifest(self) -> dict:
        return {"seed": self.seed, "config": self.config, "counts": self.counts(),
                "hashes": {k: self.split_hash(k) for k in self.splits}}

    def save(self, out_dir: str | Path) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, samples in self.splits.items():
            with open(out / f"{name}.jsonl", "w", encoding="utf-8", newline="\n") as f:
                for s in samples:
                    f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
        manifest = self.manifest()
        (out / "dataset_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, in_dir: str | Path) -> "Dataset":
        d = Path(in_dir)
        manifest = json.loads((d / "dataset_manifest.json").read_text())
        grid = manifest["config"].get("grid_size", 8)
        splits = {}
        for name in manifest["counts"]:
            splits[name] = list(load_samples(d / f"{name}.jsonl", grid))
        return cls(splits, manifest["seed"], manifest["config"])


def load_samples(path: str | Path, grid_size: int = 8) -> Iterable[QASample]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            objs = tuple(SceneObject(**o) for o in rec["objects"])
            yield QASample(rec["id"], rec["id"] // 1000, rec["regime"], rec["qtype"],
                           rec["question"], rec["answer"], objs, grid_size)


def generate_dataset(num_scenes: int = 600, questions_per_scene: int = 4, seed: int = 0,
                     day_fraction: float = 0.45, train_fraction: float = 0.5,
                     grid_size: int = 8) -> Dataset:
    """Sample scenes and questions and cut them into the four regime splits.

    Scene ``i`` is drawn from ``child_seed(seed, i)`` so generation order does
    not matter.  Sample ids are ``scene_id * 1000 + k``.
    """
    if not 0.0 < day_fraction < 1.0:
        raise ValueError("day_fraction must lie in (0, 1)")
    if questions_per_scene >= 1000:
        raise ValueError("questions_per_scene must be < 1000")
    order = np.random.default_rng([seed, 0]).permutation(num_scenes)
    n_day = int(round(day_fraction * num_scenes))
    regime_of = {int(s): ("day" if i < n_day else "night") for i, s in enumerate(order)}
    splits: dict[str, list[QASample]] = {k: [] for k in SPLITS}
    day_ids = sorted(s for s, r in regime_of.items() if r == "day")
    night_ids = sorted(s for s, r in regime_of.items() if r == "night")
    for regime, ids in (("day", day_ids), ("night", night_ids)):
        n_train = int(round(train_fraction * len(ids)))
        train_set = set(np.random.default_rng([seed, 3 if regime == "day" else 4])
                        .permutation(ids)[:n_train].tolist())
        for sid in ids:
            scene = sample_scene(sid, np.random.default_rng([child_seed(seed, sid), 0]),
                                 grid_size)
            part = "train" if sid in train_set else "test"
            splits[f"{regime}-{part}"].extend(
                generate_scene_samples(scene, regime, questions_per_scene, seed, sid * 1000))
    config = {"num_scenes": num_scenes, "questions_per_scene": questions_per_scene,
              "day_fraction": day_fraction, "train_fraction": train_fraction,
              "grid_size": grid_size}
    return Dataset(splits, seed, config)
