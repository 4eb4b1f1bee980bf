"""Synthetic audible videos of moving shapes with templated referring expressions.

Layout of a generated dataset directory::

    manifest.json            version, seed, config, holdout classes, split per expression
    expressions.jsonl        one ExpressionRecord per line
    videos/<video_id>/scene.json
    videos/<video_id>/frames.stk        T x 3 x H x W
    videos/<video_id>/audio.stk         T x 8
    videos/<video_id>/mask_<oid>.stk    T x H x W, values in {0, 1}

Tensor files use the float32 ``STKTENS1`` layout from :mod:`simtoken.numerics`.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import SHAPE_CLASSES, DatasetConfig, from_dict, to_dict
from .numerics import TensorFormatError, encode_tensor, load_tensor

VERSION = 1
AUDIO_DIM = 8
SPLITS = ("train", "seen-test", "unseen-test", "null-test")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
MOTIONS = {"static": (0, 0), "left": (-1, 0), "right": (1, 0), "down": (0, 1)}
MOTION_TEXT = {
    "static": "the shape that is not moving",
    "left": "the shape moving left",
    "right": "the shape moving right",
    "down": "the shape moving down",
}
CUES = ("audio-cue", "visual-cue", "motion-cue")
WORDS = sorted(
    {"the", "shape", "that", "is", "not", "moving", "sounding"}
    | set(COLORS)
    | {"left", "right", "down"}
)


class DatasetError(ValueError):
    pass


@dataclass
class SceneObject:
    object_id: str
    shape_class: str
    color: str
    motion: str
    x: int
    y: int
    size: int
    sounding_frames: list[bool]
    speed: int = 1

    @property
    def sounding(self) -> bool:
        return any(self.sounding_frames)

    def position(self, t: int) -> tuple[int, int]:
        dx, dy = MOTIONS[self.motion]
        return self.x + dx * self.speed * t, self.y + dy * self.speed * t


@dataclass
class ExpressionRecord:
    expression_id: str
    video_id: str
    text: str
    target_object_id: str | None
    cue_modality: str


@dataclass
class ScenePack:
    video_id: str
    frames: np.ndarray
    audio: np.ndarray
    objects: list[SceneObject]
    masks: dict[str, np.ndarray]

    def object(self, object_id):
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(object_id)


@dataclass
class Manifest:
    version: int
    seed: int
    config: DatasetConfig
    holdout: tuple[str, ...]
    video_splits: dict[str, str]
    splits: dict[str, str]


@dataclass
class Corpus:
    manifest: Manifest
    scenes: dict[str, ScenePack]
    expressions: list[ExpressionRecord]
    _by_split: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[ExpressionRecord]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        if name not in self._by_split:
            self._by_split[name] = [e for e in self.expressions
                                    if self.manifest.splits[e.expression_id] == name]
        return self._by_split[name]

    def gt_masks(self, rec: ExpressionRecord) -> np.ndarray:
        scene = self.scenes[rec.video_id]
        if rec.target_object_id is None:
            return np.zeros(scene.frames.shape[:1] + scene.frames.shape[2:])
        return scene.masks[rec.target_object_id]


# rasterisation

def shape_stencil(shape_class: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of a shape class."""
    i, j = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    if shape_class == "square":
        return np.ones((size, size), dtype=bool)
    if shape_class == "circle":
        return (i - c) ** 2 + (j - c) ** 2 <= c * c + 1.0
    if shape_class == "triangle":
        return np.abs(j - c) <= i / 2.0
    if shape_class == "cross":
        return (np.abs(i - c) <= 0.5) | (np.abs(j - c) <= 0.5)
    raise DatasetError(f"unknown shape class {shape_class!r}")


def render_object_mask(obj: SceneObject, frames: int, size: int) -> np.ndarray:
    stencil = shape_stencil(obj.shape_class, obj.size)
    out = np.zeros((frames, size, size))
    for t in range(frames):
        x, y = obj.position(t)
        out[t, y:y + obj.size, x:x + obj.size][stencil] = 1.0
    return out


def render_frames(objects: list[SceneObject], frames: int, size: int) -> np.ndarray:
    out = np.zeros((frames, 3, size, size))
    for obj in objects:
        m = render_object_mask(obj, frames, size).astype(bool)
        rgb = np.array(COLORS[obj.color])
        for t in range(frames):
            out[t][:, m[t]] = rgb[:, None]
    return out


def audio_indicator(objects: list[SceneObject], frames: int) -> np.ndarray:
    """Noise-free audio: class-indicator of sounding objects per frame."""
    out = np.zeros((frames, AUDIO_DIM))
    for obj in objects:
        k = SHAPE_CLASSES.index(obj.shape_class)
        for t, on in enumerate(obj.sounding_frames):
            if on:
                out[t, k] = 1.0
    return out


# expression templates

def resolve(text: str, objects: list[SceneObject]) -> list[str]:
    """Object ids matching every attribute named in a templated expression."""
    words = text.split()
    matches = []
    for obj in objects:
        ok = True
        for color in COLORS:
            if color in words and obj.color != color:
                ok = False
        if "sounding" in words and not obj.sounding:
            ok = False
        if "moving" in words:
            if "not" in words:
                ok = ok and obj.motion == "static"
            else:
                ok = ok and MOTION_TEXT[obj.motion] == text
        if ok:
            matches.append(obj.object_id)
    return matches


def named_color(text: str) -> str | None:
    for color in COLORS:
        if color in text.split():
            return color
    return None


def candidate_expressions(obj: SceneObject, objects: list[SceneObject]) -> list[tuple[str, str]]:
    """(text, cue) pairs that single out ``obj`` among ``objects``."""
    out = []
    same_color = [o for o in objects if o.color == obj.color]
    if len(same_color) == 1:
        out.append((f"the {obj.color} shape", "visual-cue"))
    if sum(o.motion == obj.motion for o in objects) == 1:
        out.append((MOTION_TEXT[obj.motion], "motion-cue"))
    if obj.sounding:
        out.append(("the shape that is sounding", "audio-cue"))
        if len(same_color) >= 2:
            out.append((f"the {obj.color} shape that is sounding", "audio-cue"))
    return [c for c in out if resolve(c[0], objects) == [obj.object_id]]


def null_expressions(objects: list[SceneObject]) -> list[tuple[str, str]]:
    out = []
    present = {o.color for o in objects}
    out += [(f"the {c} shape", "visual-cue") for c in COLORS if c not in present]
    motions = {o.motion for o in objects}
    out += [(MOTION_TEXT[m], "motion-cue") for m in MOTIONS if m not in motions]
    if not any(o.sounding for o in objects):
        out.append(("the shape that is sounding", "audio-cue"))
    return [c for c in out if not resolve(c[0], objects)]


# generation

def _place_objects(rng, classes, cfg: DatasetConfig, n) -> list[SceneObject] | None:
    T, S, s = cfg.frames, cfg.size, cfg.object_size
    occupied = np.zeros((S + 2, S + 2), dtype=bool)
    pairs = set()
    objects = []
    for k in range(n):
        for _ in range(50):
            shape_class = str(rng.choice(classes))
            color = str(rng.choice(list(COLORS)))
            if (shape_class, color) not in pairs:
                break
        else:
            return None
        motion = str(rng.choice(list(MOTIONS)))
        dx, dy = (cfg.speed * v for v in MOTIONS[motion])
        xs = range(max(0, -dx * (T - 1)), S - s - max(0, dx * (T - 1)) + 1)
        ys = range(max(0, -dy * (T - 1)), S - s - max(0, dy * (T - 1)) + 1)
        for _ in range(50):
            x, y = int(rng.choice(xs)), int(rng.choice(ys))
            x1 = min(x, x + dx * (T - 1))
            y1 = min(y, y + dy * (T - 1))
            w = s + abs(dx) * (T - 1)
            h = s + abs(dy) * (T - 1)
            # one-pixel gap around every swept box
            if not occupied[y1:y1 + h + 2, x1:x1 + w + 2].any():
                occupied[y1 + 1:y1 + h + 1, x1 + 1:x1 + w + 1] = True
                break
        else:
            return None
        pairs.add((shape_class, color))
        objects.append(SceneObject(f"o{k}", shape_class, color, motion, x, y, s, [False] * T, cfg.speed))
    return objects


def _make_scene(rng, cfg: DatasetConfig, classes, must_include, p_silent):
    for _ in range(200):
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects = _place_objects(rng, classes, cfg, n)
        if objects is None:
            continue
        if must_include and not any(o.shape_class in must_include for o in objects):
            continue
        if rng.random() >= p_silent:
            pool = [o for o in objects if o.shape_class in must_include] or objects
            src = pool[int(rng.integers(len(pool)))]
            on = rng.random(cfg.frames) < 0.7
            on[int(rng.integers(cfg.frames))] = True
            src.sounding_frames = [bool(v) for v in on]
        return objects
    raise DatasetError("could not place objects; canvas too crowded for this config")


def _scene_pack(video_id, objects, cfg: DatasetConfig, rng) -> ScenePack:
    frames = render_frames(objects, cfg.frames, cfg.size).astype(np.float32).astype(np.float64)
    noise = rng.uniform(-cfg.audio_noise, cfg.audio_noise, size=(cfg.frames, AUDIO_DIM))
    audio = (audio_indicator(objects, cfg.frames) + noise).astype(np.float32).astype(np.float64)
    masks = {o.object_id: render_object_mask(o, cfg.frames, cfg.size) for o in objects}
    return ScenePack(video_id, frames, audio, objects, masks)


def build_corpus(cfg: DatasetConfig, seed: int) -> Corpus:
    """Generate the in-memory corpus deterministically from ``(cfg, seed)``."""
    cfg.validate()
    seen_classes = [c for c in SHAPE_CLASSES if c not in cfg.holdout]
    scenes, expressions, splits, video_splits = {}, [], {}, {}
    counts = {"train": cfg.n_train, "seen-test": cfg.n_seen,
              "unseen-test": cfg.n_unseen, "null-test": cfg.n_null}
    for split_idx, split in enumerate(SPLITS):
        for idx in range(counts[split]):
            rng = np.random.default_rng([seed, split_idx, idx])
            video_id = f"{split.split('-')[0]}{idx:04d}"
            if split == "unseen-test":
                classes, must = list(SHAPE_CLASSES), tuple(cfg.holdout)
            else:
                classes, must = seen_classes, ()
            p_silent = cfg.p_silent_null if split == "null-test" else cfg.p_silent
            recs = []
            for _ in range(200):
                objects = _make_scene(rng, cfg, classes, must, p_silent)
                recs = _scene_expressions(rng, split, video_id, objects, cfg)
                if recs:
                    break
            else:
                raise DatasetError(f"could not generate expressions for {video_id}")
            scenes[video_id] = _scene_pack(video_id, objects, cfg, rng)
            video_splits[video_id] = split
            for rec in recs:
                expressions.append(rec)
                splits[rec.expression_id] = split
    manifest = Manifest(VERSION, seed, cfg, tuple(cfg.holdout), video_splits, splits)
    return Corpus(manifest, scenes, expressions)


def _scene_expressions(rng, split, video_id, objects, cfg) -> list[ExpressionRecord]:
    out = []

    def add(text, target, cue):
        out.append(ExpressionRecord(f"{video_id}_e{len(out)}", video_id, text, target, cue))

    if split == "null-test":
        nulls = null_expressions(objects)
        for k in _prefer_audio(rng, nulls, 2):
            add(nulls[k][0], None, nulls[k][1])
        return out
    for obj in objects:
        if split == "unseen-test" and obj.shape_class not in cfg.holdout:
            continue
        cands = candidate_expressions(obj, objects)
        if split == "train" and len(cands) < 2:
            continue
        for text, cue in cands:
            add(text, obj.object_id, cue)
    if split == "train" and out and rng.random() < cfg.p_train_null:
        nulls = null_expressions(objects)
        for k in _prefer_audio(rng, nulls, 1):
            add(nulls[k][0], None, nulls[k][1])
    return out


def _prefer_audio(rng, nulls, n):
    """Pick up to ``n`` null expressions of distinct cues, audio first when available."""
    by_cue = {}
    for k in rng.permutation(len(nulls)).tolist():
        by_cue.setdefault(nulls[k][1], k)
    rest = [c for c in CUES[1:] if c in by_cue]
    rest = [rest[i] for i in rng.permutation(len(rest)).tolist()]
    cues = (["audio-cue"] if "audio-cue" in by_cue else []) + rest
    return [by_cue[c] for c in cues[:n]]


def generate_dataset(cfg: DatasetConfig, seed: int, out_dir) -> Path:
    """Write a dataset directory; nothing is written if the config is invalid."""
    corpus = build_corpus(cfg, seed)
    out = Path(out_dir)
    if out.exists():
        shutil.rmtree(out)
    (out / "videos").mkdir(parents=True)
    for vid, scene in corpus.scenes.items():
        d = out / "videos" / vid
        d.mkdir()
        (d / "scene.json").write_text(
            json.dumps({"video_id": vid, "objects": [asdict(o) for o in scene.objects]}, indent=1) + "\n")
        (d / "frames.stk").write_bytes(encode_tensor(scene.frames))
        (d / "audio.stk").write_bytes(encode_tensor(scene.audio))
        for oid, m in scene.masks.items():
            (d / f"mask_{oid}.stk").write_bytes(encode_tensor(m))
    with open(out / "expressions.jsonl", "w", encoding="utf-8") as fh:
        for rec in corpus.expressions:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    m = corpus.manifest
    manifest = {
        "version": m.version,
        "seed": m.seed,
        "config": to_dict(m.config),
        "holdout": list(m.holdout),
        "video_splits": m.video_splits,
        "splits": m.splits,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


# loading and validation

def load_dataset(path) -> Corpus:
    """Load a dataset directory and re-check every invariant."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: manifest missing")
    raw = json.loads(mpath.read_text(encoding="utf-8"))
    if raw.get("version") != VERSION:
        raise DatasetError(f"{mpath}: unsupported dataset version {raw.get('version')!r}")
    cfg = from_dict(DatasetConfig, raw["config"])
    manifest = Manifest(raw["version"], raw["seed"], cfg, tuple(raw["holdout"]),
                        raw["video_splits"], raw["splits"])
    scenes = {}
    for vid in sorted(manifest.video_splits):
        d = path / "videos" / vid
        meta = json.loads((d / "scene.json").read_text(encoding="utf-8"))
        objects = [SceneObject(**o) for o in meta["objects"]]
        try:
            frames = load_tensor(d / "frames.stk")
            audio = load_tensor(d / "audio.stk")
            masks = {o.object_id: load_tensor(d / f"mask_{o.object_id}.stk") for o in objects}
        except (TensorFormatError, OSError) as exc:
            raise DatasetError(str(exc)) from exc
        scenes[vid] = ScenePack(vid, frames, audio, objects, masks)
    expressions = []
    with open(path / "expressions.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                expressions.append(ExpressionRecord(**json.loads(line)))
    corpus = Corpus(manifest, scenes, expressions)
    validate_corpus(corpus)
    return corpus


def validate_corpus(corpus: Corpus) -> None:
    m, cfg = corpus.manifest, corpus.manifest.config
    T, S = cfg.frames, cfg.size
    for vid, scene in corpus.scenes.items():
        if scene.frames.shape != (T, 3, S, S) or scene.audio.shape != (T, AUDIO_DIM):
            raise DatasetError(f"{vid}: tensor shapes {scene.frames.shape}, {scene.audio.shape} do not match config")
        pairs = set()
        for obj in scene.objects:
            if (obj.shape_class, obj.color) in pairs:
                raise DatasetError(f"{vid}: duplicate (shape, color) pair for {obj.object_id}")
            pairs.add((obj.shape_class, obj.color))
            for t in range(T):
                x, y = obj.position(t)
                if x < 0 or y < 0 or x + obj.size > S or y + obj.size > S:
                    raise DatasetError(f"{vid}/{obj.object_id}: leaves the canvas at frame {t}")
            mask = scene.masks[obj.object_id]
            if not np.isin(mask, (0.0, 1.0)).all():
                raise DatasetError(f"{vid}/{obj.object_id}: mask is not binary")
            if not np.array_equal(mask, render_object_mask(obj, T, S)):
                raise DatasetError(f"{vid}/{obj.object_id}: mask differs from its rasterisation")
        if not np.array_equal(scene.frames, render_frames(scene.objects, T, S)):
            raise DatasetError(f"{vid}: frames differ from their rasterisation")
        clean = audio_indicator(scene.objects, T)
        tol = cfg.audio_noise + 1e-6
        if np.abs(scene.audio - clean).max() > tol:
            raise DatasetError(f"{vid}: audio departs from its class indicator by more than the noise bound")
        if m.video_splits.get(vid) == "train" and any(o.shape_class in m.holdout for o in scene.objects):
            raise DatasetError(f"{vid}: held-out class appears in a train scene")

    seen_ids = set()
    per_target: dict[tuple, int] = {}
    for rec in corpus.expressions:
        if rec.expression_id in seen_ids:
            raise DatasetError(f"{rec.expression_id}: duplicate expression id")
        seen_ids.add(rec.expression_id)
        split = m.splits.get(rec.expression_id)
        if split not in SPLITS:
            raise DatasetError(f"{rec.expression_id}: no valid split assignment")
        if rec.video_id not in corpus.scenes:
            raise DatasetError(f"{rec.expression_id}: dangling video_id {rec.video_id!r}")
        if m.video_splits[rec.video_id] != split:
            raise DatasetError(f"{rec.expression_id}: split {split!r} disagrees with its video's split")
        if rec.cue_modality not in CUES:
            raise DatasetError(f"{rec.expression_id}: unknown cue {rec.cue_modality!r}")
        scene = corpus.scenes[rec.video_id]
        ids = {o.object_id for o in scene.objects}
        matches = resolve(rec.text, scene.objects)
        if rec.target_object_id is None:
            if matches:
                raise DatasetError(f"{rec.expression_id}: null expression matches {matches}")
            continue
        if rec.target_object_id not in ids:
            raise DatasetError(f"{rec.expression_id}: dangling object_id {rec.target_object_id!r}")
        if matches != [rec.target_object_id]:
            raise DatasetError(f"{rec.expression_id}: text resolves to {matches}, not {rec.target_object_id}")
        target = scene.object(rec.target_object_id)
        if split == "unseen-test" and target.shape_class not in m.holdout:
            raise DatasetError(f"{rec.expression_id}: unseen-test target has seen class {target.shape_class!r}")
        if split == "null-test":
            raise DatasetError(f"{rec.expression_id}: null-test expression has a target")
        if rec.cue_modality == "audio-cue":
            color = named_color(rec.text)
            if color is not None and sum(o.color == color for o in scene.objects) < 2:
                raise DatasetError(f"{rec.expression_id}: audio cue is redundant with the named color")
        if split == "train":
            key = (rec.video_id, rec.target_object_id)
            per_target[key] = per_target.get(key, 0) + 1
    for key, n in per_target.items():
        if n < 2:
            raise DatasetError(f"train target {key} has only {n} expression")


# batching

def batch_iter(corpus: Corpus, split: str, batch_size: int, seed: int, epoch: int = 0):
    """Yield lists of expressions, keeping every target's expressions together.

    Groups larger than ``batch_size`` are cut into chunks of at least two;
    order is fixed by ``(seed, epoch)``.
    """
    if split == "train" and batch_size < 2:
        raise DatasetError("batch_size must be >= 2 on the train split")
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    records = corpus.split(split)
    groups: dict[tuple, list] = {}
    for rec in records:
        key = (rec.video_id, rec.target_object_id) if rec.target_object_id else (rec.expression_id,)
        groups.setdefault(key, []).append(rec)
    chunks = []
    for g in groups.values():
        i = 0
        while len(g) - i > batch_size:
            chunks.append(g[i:i + batch_size])
            i += batch_size
        # a lone leftover borrows one earlier member so it still has a partner
        chunks.append(g[i - 1:] if i and len(g) - i == 1 else g[i:])
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(chunks))
    batch: list = []
    for k in order:
        chunk = chunks[k]
        if len(batch) + len(chunk) > batch_size:
            yield batch
            batch = []
        batch.extend(chunk)
    if batch:
        yield batch
