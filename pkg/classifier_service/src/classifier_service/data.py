"""Annotated-image loading, preprocessing, and a synthetic demo corpus.

The annotations file is JSONL with one image per line. Lines carry either
an absolute ``image_path`` or an ``image_ref`` relative to an image root
(the shape the data pipeline's ``forge annotate`` emits), plus integer
``clarity`` (0/1) and ``complexity`` (0-3) labels; other fields are ignored.
"""

from __future__ import annotations

import io
import json
import random
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image, ImageDraw, ImageFilter

from .errors import UnreadableImage

VALID_CLARITY = (0, 1)
VALID_COMPLEXITY = (0, 1, 2, 3)


@dataclass(frozen=True, slots=True)
class AnnotatedImage:
    image_path: Path
    clarity: int
    complexity: int

    def __post_init__(self) -> None:
        if self.clarity not in VALID_CLARITY:
            raise ValueError(f"clarity {self.clarity} not in {VALID_CLARITY}")
        if self.complexity not in VALID_COMPLEXITY:
            raise ValueError(f"complexity {self.complexity} not in {VALID_COMPLEXITY}")
        if not Path(self.image_path).is_file():
            raise ValueError(f"image file not found: {self.image_path}")


def load_annotations(path: Path | str, image_root: Path | str | None = None) -> list[AnnotatedImage]:
    """Read annotation rows, resolving relative refs against image_root."""
    path = Path(path)
    annotations: list[AnnotatedImage] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: not valid JSON: {exc}") from exc
            try:
                if "image_path" in row:
                    image_path = Path(row["image_path"])
                elif "image_ref" in row:
                    if image_root is None:
                        raise ValueError("row has image_ref but no image_root was given")
                    image_path = Path(image_root) / row["image_ref"]
                else:
                    raise ValueError("row needs image_path or image_ref")
                annotations.append(
                    AnnotatedImage(
                        image_path=image_path,
                        clarity=int(row["clarity"]),
                        complexity=int(row["complexity"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
    return annotations


def preprocess(image_bytes: bytes, resolution: int) -> torch.Tensor:
    """Decode to RGB, resize, and scale to [-1, 1]; (3, R, R) float32."""
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            rgb = img.convert("RGB")
    except Exception as exc:
        raise UnreadableImage(f"cannot decode image: {exc}") from exc
    if rgb.size != (resolution, resolution):
        rgb = rgb.resize((resolution, resolution), Image.BILINEAR)
    raw = torch.frombuffer(bytearray(rgb.tobytes()), dtype=torch.uint8)
    pixels = raw.reshape(resolution, resolution, 3).permute(2, 0, 1).float()
    return pixels / 127.5 - 1.0


def load_image_tensor(path: Path | str, resolution: int) -> torch.Tensor:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc
    try:
        return preprocess(payload, resolution)
    except UnreadableImage as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def load_batch(paths: list[Path], resolution: int) -> torch.Tensor:
    return torch.stack([load_image_tensor(p, resolution) for p in paths])


def generate_demo_corpus(
    root: Path | str,
    n: int = 240,
    seed: int = 0,
    image_size: int = 32,
) -> tuple[Path, Path]:
    """Write a sharp-vs-Gaussian-blurred corpus with labels.

    Even-indexed images stay sharp (clarity 1), odd ones are blurred
    (clarity 0). Complexity tracks the number of shapes drawn, covering
    all four classes. Returns (annotations_path, image_root).
    """
    root = Path(root)
    image_root = root / "images"
    (image_root / "demo").mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    rows = []
    for i in range(n):
        shapes = 2 + rng.randrange(8)  # 2..9 -> complexity 0..3
        complexity = min(3, (shapes - 2) // 2)
        img = Image.new("RGB", (image_size, image_size), "white")
        draw = ImageDraw.Draw(img)
        for _ in range(shapes):
            x0, y0 = rng.randrange(image_size - 8), rng.randrange(image_size - 8)
            x1, y1 = x0 + 2 + rng.randrange(6), y0 + 2 + rng.randrange(6)
            color = (rng.randrange(96), rng.randrange(96), rng.randrange(96))
            kind = rng.randrange(3)
            if kind == 0:
                draw.rectangle([x0, y0, x1, y1], outline=color)
            elif kind == 1:
                draw.ellipse([x0, y0, x1, y1], outline=color)
            else:
                draw.line([x0, y0, x1, y1], fill=color)
        clarity = 1 if i % 2 == 0 else 0
        if clarity == 0:
            img = img.filter(ImageFilter.GaussianBlur(radius=2.0 + rng.random()))
        ref = f"demo/{i:04d}.png"
        img.save(image_root / ref)
        rows.append({"image_ref": ref, "clarity": clarity, "complexity": complexity})
    annotations_path = root / "annotations.jsonl"
    with open(annotations_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return annotations_path, image_root
