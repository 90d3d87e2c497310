"""Input-transformation defenses and the weakest-neutralizing-level sweep."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from aip.data import from_uint8, quantize_image, to_uint8
from aip.errors import CodecError, ConfigError

JPEG_LEVELS = (90, 70, 50, 30, 10)
BIT_LEVELS = (7, 6, 5, 4, 3, 2)
LEVELS = {"jpeg": JPEG_LEVELS, "bitdepth": BIT_LEVELS}


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "jpeg"
    level: int = 90

    def problems(self):
        if self.kind not in LEVELS:
            return [f"unknown defense kind {self.kind!r}"]
        if self.level not in LEVELS[self.kind]:
            return [f"{self.kind} level {self.level} not in {LEVELS[self.kind]}"]
        return []


def bit_depth_reduce(image, bits):
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise ValueError(f"bits must be an integer in [1, 8], got {bits!r}")
    levels = 2 ** bits - 1
    x = np.asarray(image, dtype=np.float64)
    return quantize_image(np.floor(x * levels + 0.5) / levels)


def jpeg_roundtrip(image, quality):
    """Baseline JPEG encode/decode; single-channel images are tripled first."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    x = np.asarray(image, dtype=np.float64)
    channels = x.shape[-1]
    data = to_uint8(x if channels == 3 else np.repeat(x[..., :1], 3, axis=-1))
    try:
        buf = io.BytesIO()
        Image.fromarray(data, mode="RGB").save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with Image.open(buf) as pil:
            out = from_uint8(np.asarray(pil.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise CodecError(f"JPEG round trip failed: {exc}") from exc
    return out if channels == 3 else quantize_image(out.mean(axis=-1, keepdims=True))


def apply_defense(images, kind, level):
    images = np.asarray(images)
    fn = {"jpeg": jpeg_roundtrip, "bitdepth": bit_depth_reduce}.get(kind)
    if fn is None:
        raise ConfigError(f"unknown defense kind {kind!r}")
    if images.ndim == 3:
        return fn(images, level)
    return np.stack([fn(img, level) for img in images])


@dataclass
class SweepResult:
    kind: str
    level: int | None  # weakest neutralizing level, None when no level suffices
    cooperative_hr: float
    rows: list = field(default_factory=list)  # one dict per level tried

    @property
    def neutralized(self):
        return self.level is not None

    def to_dict(self):
        return {"kind": self.kind, "level": self.level if self.level is not None else "none",
                "neutralized": self.neutralized, "cooperative_hr": self.cooperative_hr, "rows": self.rows}


def defense_sweep(pool, cold_items, adversarial_images, cooperative_hr, kind, cooperative_images=None,
                  defend_all=False, levels=None, transform=None):
    """Walk levels mildest to strongest; stop at the first that neutralizes the attack.

    A level neutralizes when mean adversarial HR@N after the defense is at most
    ``cooperative_hr``. When ``cooperative_images`` is given, their defended
    HR@N is reported at every level; with ``defend_all`` it also replaces the
    cooperative baseline. ``transform(images, level)`` overrides the built-in
    defenses (``levels`` must then be given).
    """
    levels = LEVELS[kind] if levels is None else levels
    transform = transform or (lambda imgs, lvl: apply_defense(imgs, kind, lvl))
    rows = []
    for level in levels:
        defended = transform(adversarial_images, level)
        adv_hits, _, _ = pool.evaluate_images(cold_items, defended)
        row = {"level": level, "adversarial_hr": float(adv_hits.mean())}
        baseline = cooperative_hr
        if cooperative_images is not None:
            coop_hits, _, _ = pool.evaluate_images(cold_items, transform(cooperative_images, level))
            row["defended_cooperative_hr"] = float(coop_hits.mean())
            if defend_all:
                baseline = row["defended_cooperative_hr"]
        row["baseline_hr"] = float(baseline)
        row["neutralized"] = row["adversarial_hr"] <= baseline
        rows.append(row)
        if row["neutralized"]:
            return SweepResult(kind, level, float(cooperative_hr), rows)
    return SweepResult(kind, None, float(cooperative_hr), rows)
