"""Synthetic scene corpus: a deterministic stand-in for a detector plus
captioned-image dataset.

A scene holds one to four attributed objects (shape, color, size) at
distinct cells of a 4x4 grid. Each object becomes one region feature row
built from seeded per-attribute embedding blocks plus Gaussian noise, and
the scene's caption comes from a fixed template, so ground truth is known
exactly and corpora regenerate byte-identically from a seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
SIZES = ("small", "large")
GRID = 4

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"

GENERATOR_VERSION = "1"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    position: tuple[int, int]


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    seed: int


@dataclass
class CaptionSample:
    """One corpus record: region features plus the reference caption
    (content words only, no sentence markers)."""
    scene_id: int
    features: np.ndarray
    caption: list[str]


def generate_scene(seed: int) -> Scene:
    """Draw a scene from a PRNG seeded with ``seed``.

    Stream order is fixed: object count, then grid cells without
    replacement, then (shape, color, size) per object. Objects are stored
    sorted by grid position row-major.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 5))
    cells = rng.choice(GRID * GRID, size=count, replace=False)
    objects = []
    for cell in cells:
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        size = SIZES[rng.integers(len(SIZES))]
        objects.append(SceneObject(shape, color, size,
                                   (int(cell) // GRID, int(cell) % GRID)))
    objects.sort(key=lambda o: o.position)
    return Scene(tuple(objects), int(seed))


def _attribute_blocks(d_v: int, table_seed: int) -> list[tuple[tuple[str, ...], np.ndarray]]:
    # four blocks: shape, color, size, position; the last takes the remainder
    width = d_v // 4
    widths = [width, width, width, d_v - 3 * width]
    value_sets: list[tuple[str, ...] | tuple[int, ...]] = [
        SHAPES, COLORS, SIZES, tuple(range(GRID * GRID))]
    blocks = []
    for k, (values, w) in enumerate(zip(value_sets, widths)):
        rng = np.random.default_rng([table_seed, k])
        blocks.append((values, rng.normal(size=(len(values), w))))
    return blocks


def featurize(scene: Scene, d_v: int = 32, noise_sigma: float = 0.1,
              table_seed: int = 0) -> np.ndarray:
    """Embed each object as shape || color || size || position blocks
    drawn once per (d_v, table_seed), plus fresh Gaussian noise seeded by
    the scene."""
    if d_v < 16:
        raise ValueError(f"featurize: d_v must be at least 16, got {d_v}")
    blocks = _attribute_blocks(d_v, table_seed)
    rows = []
    for obj in scene.objects:
        keys = [obj.shape, obj.color, obj.size,
                obj.position[0] * GRID + obj.position[1]]
        rows.append(np.concatenate([
            table[values.index(key)]
            for key, (values, table) in zip(keys, blocks)]))
    out = np.array(rows)
    if noise_sigma > 0:
        noise_rng = np.random.default_rng([scene.seed, table_seed, 7])
        out = out + noise_rng.normal(0.0, noise_sigma, size=out.shape)
    return out


def caption_of(scene: Scene) -> list[str]:
    """Template caption over row-major objects, with sentence markers:
    "<bos> a {size} {color} {shape} [and ...] <eos>"."""
    tokens = [BOS]
    for i, obj in enumerate(scene.objects):
        if i:
            tokens.append("and")
        tokens += ["a", obj.size, obj.color, obj.shape]
    tokens.append(EOS)
    return tokens


def content_tokens(caption: list[str]) -> list[str]:
    return [t for t in caption if t not in (BOS, EOS)]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def record_line(scene_id: int, features: np.ndarray, caption: list[str]) -> str:
    """One JSONL record; floats carry 17 significant digits so the parsed
    values equal the originals bit for bit."""
    feats = "[" + ", ".join(
        "[" + ", ".join(_fmt(v) for v in row) + "]" for row in features) + "]"
    return ('{"scene_id": %d, "features": %s, "caption": %s}'
            % (scene_id, feats, json.dumps(list(caption))))


def parse_record(line: str) -> CaptionSample:
    raw = json.loads(line)
    return CaptionSample(scene_id=int(raw["scene_id"]),
                         features=np.array(raw["features"], dtype=np.float64),
                         caption=[str(t) for t in raw["caption"]])


def load_split(path: str) -> list[CaptionSample]:
    with open(path, encoding="utf-8") as fh:
        return [parse_record(line) for line in fh if line.strip()]


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"split ratios {ratios} give negative counts for n={n}")
    return n_train, n_val, n_test


def build_corpus(out_dir: str, n_scenes: int,
                 split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 seed: int = 0, d_v: int = 32,
                 noise_sigma: float = 0.1) -> dict:
    """Generate scenes, write train/val/test JSONL plus manifest.json to
    out_dir, and return the manifest. Scene ids are disjoint across
    splits by construction; attribute embeddings derive from the corpus
    seed."""
    master = np.random.default_rng(seed)
    scene_seeds = master.integers(0, 2 ** 62, size=n_scenes)
    n_train, n_val, n_test = split_counts(n_scenes, split_ratios)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val),
              "test": (n_train + n_val, n_scenes)}

    os.makedirs(out_dir, exist_ok=True)
    for split, (lo, hi) in bounds.items():
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w", encoding="utf-8") as fh:
            for i in range(lo, hi):
                scene = generate_scene(int(scene_seeds[i]))
                feats = featurize(scene, d_v, noise_sigma, table_seed=seed)
                caption = content_tokens(caption_of(scene))
                fh.write(record_line(i, feats, caption) + "\n")

    manifest = {
        "version": GENERATOR_VERSION,
        "seed": int(seed),
        "d_v": int(d_v),
        "noise_sigma": float(noise_sigma),
        "counts": {"train": n_train, "val": n_val, "test": n_test},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_manifest(corpus_dir: str) -> dict:
    with open(os.path.join(corpus_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)
