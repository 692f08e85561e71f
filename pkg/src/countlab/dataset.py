"""Dataset splits: construction, on-disk layout and regeneration from manifests.

A split directory holds ``manifest.jsonl`` (one JSON object per QA record) and
one binary netpbm image per scene (P5 for SynDot, P6 otherwise).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pnm
from .synth import RNG_ALGORITHM, CanvasSpec, RenderedScene, gen_colorshape, generate
from .vocab import (QARecord, attribute_record, count_record, sample_verify_k, verify_record)

Item = tuple[RenderedScene, QARecord]


class DatasetError(ValueError):
    """Malformed manifest, missing image or checksum mismatch."""


def scene_seed(split_seed: int, i: int) -> int:
    return int(split_seed) * 1_000_003 + int(i)


def counting_split(kind: str, counts, per_count: int, spec: CanvasSpec | None = None,
                   seed: int = 0, radius_px: float | None = None) -> list[Item]:
    """``per_count`` scenes for each count, one count-question record each."""
    spec = spec or CanvasSpec()
    items = []
    i = 0
    for n in counts:
        for _ in range(per_count):
            s = scene_seed(seed, i)
            scene = generate(kind, spec, int(n), radius_px, s)
            items.append((scene, count_record(scene, f"{kind}-{s}")))
            i += 1
    return items


def colorshape_split(n: int, spec: CanvasSpec | None = None, seed: int = 0) -> list[Item]:
    spec = spec or CanvasSpec()
    items = []
    for i in range(n):
        s = scene_seed(seed, i)
        scene, task = gen_colorshape(spec, s)
        tmpl = s % 3
        items.append((scene, attribute_record(scene, f"colorshape-{s}", task, tmpl)))
    return items


def mixture_split(count_items: list[Item], mix=(70, 10, 10, 10), spec: CanvasSpec | None = None,
                  seed: int = 0, k_max: int | None = None) -> list[Item]:
    """Add verify and colour/shape records to a counting split.

    ``mix`` is count:verify:color:shape. Verify records reuse the counting scenes;
    colour and shape records come from fresh ColorShape scenes.
    """
    spec = spec or count_items[0][0].spec
    n = len(count_items)
    w_count, w_verify, w_color, w_shape = mix
    n_verify = int(round(n * w_verify / w_count))
    n_attr = int(round(n * (w_color + w_shape) / w_count))
    rng = np.random.Generator(np.random.PCG64([int(seed), 7]))
    k_max = k_max if k_max is not None else max(s.count for s, _ in count_items) + 2
    out = list(count_items)
    for j in rng.permutation(n)[:n_verify] if n_verify <= n else rng.integers(n, size=n_verify):
        scene, rec = count_items[int(j)]
        k, as_word = sample_verify_k(rng, scene.count, k_max)
        out.append((scene, verify_record(scene, rec.scene_id, k, as_word)))
    # balanced colour/shape questions
    attr_seed = seed + 1
    got = {"color": 0, "shape": 0}
    target = {"color": n_attr * w_color // max(1, w_color + w_shape)}
    target["shape"] = n_attr - target["color"]
    i = 0
    while got["color"] < target["color"] or got["shape"] < target["shape"]:
        s = scene_seed(attr_seed, i)
        scene, task = gen_colorshape(spec, s)
        i += 1
        if got[task] >= target[task]:
            continue
        got[task] += 1
        out.append((scene, attribute_record(scene, f"colorshape-{s}", task, s % 3)))
    return out


def record_id(rec: QARecord) -> str:
    return f"{rec.scene_id}/{rec.task}" + (f"{rec.k}" if rec.task == "verify" else "")


def _image_name(scene: RenderedScene, scene_id: str) -> str:
    return f"{scene_id}.{'pgm' if scene.pixels.ndim == 2 else 'ppm'}"


def write_dataset(items: list[Item], path) -> Path:
    """Write images and ``manifest.jsonl``; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    digests: dict[str, str] = {}
    lines = []
    for scene, rec in items:
        name = _image_name(scene, rec.scene_id)
        if rec.scene_id not in digests:
            data = pnm.write(root / name, scene.pixels)
            digests[rec.scene_id] = hashlib.sha256(data).hexdigest()
        entry = {
            "id": record_id(rec),
            "scene_id": rec.scene_id,
            "kind": scene.kind,
            "count": scene.count,
            "centers": [list(c) for c in scene.centers],
            "attributes": scene.attributes,
            "task": rec.task,
            "k": rec.k,
            "prompt": " ".join(rec.prompt),
            "answer": rec.answer,
            "image_file": name,
            "sha256": digests[rec.scene_id],
            "seed": scene.seed,
            "canvas_px": scene.spec.canvas_px,
            "patch_px": scene.spec.patch_px,
            "radius": scene.radius,
            "rng": RNG_ALGORITHM,
        }
        lines.append(json.dumps(entry, sort_keys=True))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


_REQUIRED = ("id", "kind", "count", "centers", "attributes", "task", "prompt", "answer", "image_file", "sha256")


def _manifest_entries(path) -> tuple[Path, list[dict]]:
    root = Path(path)
    manifest = root / "manifest.jsonl" if root.is_dir() else root
    if not manifest.exists():
        raise DatasetError(f"no manifest at {manifest}")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
        except json.JSONDecodeError as err:
            raise DatasetError(f"{manifest}:{lineno}: {err}") from None
        missing = [k for k in _REQUIRED if k not in e]
        if missing:
            raise DatasetError(f"{manifest}:{lineno}: missing fields {missing}")
        entries.append(e)
    return manifest.parent, entries


def read_dataset(path, verify: bool = True) -> list[Item]:
    root, entries = _manifest_entries(path)
    scenes: dict[str, RenderedScene] = {}
    items = []
    for e in entries:
        sid = e.get("scene_id", e["id"].split("/")[0])
        if sid not in scenes:
            f = root / e["image_file"]
            if not f.exists():
                raise DatasetError(f"missing image {f}")
            data = f.read_bytes()
            if verify and hashlib.sha256(data).hexdigest() != e["sha256"]:
                raise DatasetError(f"checksum mismatch for {f}")
            spec = CanvasSpec(e.get("canvas_px", 64), e.get("patch_px", 8))
            scenes[sid] = RenderedScene(pnm.from_bytes(data), e["count"], [tuple(c) for c in e["centers"]],
                                        e["attributes"], e.get("seed", 0), e["kind"], spec, e.get("radius", 0.0))
        rec = QARecord(sid, e["task"], e["prompt"].split(), list(e["answer"]), e.get("k"))
        items.append((scenes[sid], rec))
    return items


def regenerate(path) -> dict[str, tuple[str, str]]:
    """Rebuild every image from its manifest seed; return {image_file: (stored, regenerated)} mismatches."""
    _, entries = _manifest_entries(path)
    bad = {}
    done = set()
    for e in entries:
        if e["image_file"] in done:
            continue
        done.add(e["image_file"])
        if e.get("rng", RNG_ALGORITHM) != RNG_ALGORITHM:
            raise DatasetError(f"manifest was written with rng {e['rng']}, this build uses {RNG_ALGORITHM}")
        spec = CanvasSpec(e["canvas_px"], e["patch_px"])
        radius = None if e["kind"] == "colorshape" else e["radius"]
        scene = generate(e["kind"], spec, e["count"], radius, e["seed"])
        digest = hashlib.sha256(pnm.to_bytes(scene.pixels)).hexdigest()
        if digest != e["sha256"]:
            bad[e["image_file"]] = (e["sha256"], digest)
    return bad


def manifest_digest(path) -> str:
    root = Path(path)
    manifest = root / "manifest.jsonl" if root.is_dir() else root
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


def scene_to_dict(scene: RenderedScene) -> dict:
    d = asdict(scene)
    d.pop("pixels")
    return d
