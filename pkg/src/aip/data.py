"""Synthetic implicit-feedback data with images that carry preference signal.

Images are plain ``float64`` arrays of shape (H, W, C) with values in [0, 1];
"quantized" means every value sits on the k/255 grid.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from aip.errors import ConfigError, DomainError, SelectionError, SplitError


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_items: int = 500
    n_cold: int = 50  # extra interaction-free items reserved for cold election
    latent_dim: int = 8
    n_clusters: int = 4
    interactions_per_user: int = 10
    image_shape: tuple = (32, 32, 3)
    skew: float = 0.8
    affinity: float = 2.5
    appeal_noise: float = 0.5
    seed: int = 0

    def check(self):
        counts = dict(n_users=self.n_users, n_items=self.n_items, latent_dim=self.latent_dim,
                      n_clusters=self.n_clusters, interactions_per_user=self.interactions_per_user)
        for name, value in counts.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.n_cold < 0:
            raise ConfigError("n_cold must be non-negative")
        if self.interactions_per_user > self.n_items:
            raise ConfigError(
                f"{self.interactions_per_user} interactions per user exceed {self.n_items} items")
        if self.interactions_per_user < 2:
            raise ConfigError("leave-one-out needs at least 2 interactions per user")
        if len(self.image_shape) != 3 or min(self.image_shape) <= 0:
            raise ConfigError(f"bad image shape {self.image_shape}")
        if self.skew < 0:
            raise ConfigError("skew must be non-negative")


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    n_users: int
    n_items: int  # includes reserved cold items
    interactions: tuple  # ((u, i), ...) original implicit positives
    images: np.ndarray  # (n_items, H, W, C), quantized
    train_pos: tuple = ()  # per-user frozensets after splitting
    test_items: tuple = ()  # per-user held-out item, empty before splitting
    cold_items: tuple = ()
    item_clusters: np.ndarray = field(default=None, repr=False)
    user_clusters: np.ndarray = field(default=None, repr=False)
    seed: int = 0

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def positives(self, user):
        if self.train_pos:
            return self.train_pos[user]
        return frozenset(i for u, i in self.interactions if u == user)

    def all_positives(self):
        if self.train_pos:
            return self.train_pos
        pos = [set() for _ in range(self.n_users)]
        for u, i in self.interactions:
            pos[u].add(i)
        return tuple(frozenset(p) for p in pos)

    def positive_matrix(self):
        mat = np.zeros((self.n_users, self.n_items), dtype=bool)
        for u, items in enumerate(self.all_positives()):
            mat[u, list(items)] = True
        return mat

    def trainable_mask(self):
        """Items eligible for training and candidate generation (cold set excluded)."""
        mask = np.ones(self.n_items, dtype=bool)
        mask[list(self.cold_items)] = False
        return mask

    def item_popularity(self):
        counts = np.zeros(self.n_items, dtype=np.int64)
        for items in self.all_positives():
            counts[list(items)] += 1
        return counts

    def hook_item(self):
        """Most-interacted training item, ties to the lowest id."""
        return int(np.argmax(self.item_popularity()))

    def training_pairs(self):
        return np.array([(u, i) for u, items in enumerate(self.all_positives()) for i in sorted(items)],
                        dtype=np.int64).reshape(-1, 2)


# -- images ------------------------------------------------------------------

def quantize_image(image):
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)) or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise DomainError("pixels must lie in [0, 1]")
    # half away from zero; all values are non-negative here
    return np.floor(x * 255.0 + 0.5) / 255.0


def is_quantized(image):
    x = np.asarray(image, dtype=np.float64)
    return bool(np.all((x >= 0) & (x <= 1)) and np.array_equal(np.floor(x * 255.0 + 0.5) / 255.0, x))


def to_uint8(image):
    return np.floor(np.asarray(image) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(array):
    return np.asarray(array, dtype=np.float64) / 255.0


def save_image(image, path):
    x = np.asarray(image)
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise DomainError("pixels must lie in [0, 1]")
    data = to_uint8(x)
    pil = Image.fromarray(data[..., 0] if data.shape[-1] == 1 else data)
    pil.save(path, format="PNG")


def load_image(path):
    try:
        with Image.open(path) as pil:
            data = np.asarray(pil)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if data.dtype != np.uint8:
        raise OSError(f"{path} is not an 8-bit image")
    if data.ndim == 2:
        data = data[..., None]
    return from_uint8(data)


# -- generation --------------------------------------------------------------

def _smooth_field(rng, shape, n_waves=3):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / n_waves


def _render_images(rng, cfg, item_latents, item_clusters):
    h, w, c = cfg.image_shape
    templates = np.stack([
        np.stack([0.2 * _smooth_field(rng, (h, w)) + rng.uniform(0.3, 0.7) for _ in range(c)], axis=-1)
        for _ in range(cfg.n_clusters)
    ])
    bases = np.stack([
        np.stack([_smooth_field(rng, (h, w), n_waves=2) for _ in range(c)], axis=-1)
        for _ in range(cfg.latent_dim)
    ])
    mix = np.einsum("nd,dhwc->nhwc", item_latents, bases) * (0.06 / np.sqrt(cfg.latent_dim))
    noise = rng.normal(0.0, 0.02, size=(len(item_latents), h, w, c))
    images = templates[item_clusters] + mix + noise
    return quantize_image(np.clip(images, 0.0, 1.0))


def generate_synthetic(cfg=SynthConfig()):
    """Clustered latent model: user/item latents, rendered images, sampled interactions.

    Items ``n_items .. n_items + n_cold - 1`` are reserved and never interacted.
    """
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_items + cfg.n_cold
    centers = rng.normal(0.0, 1.0, size=(cfg.n_clusters, cfg.latent_dim))
    item_clusters = rng.integers(0, cfg.n_clusters, size=total)
    user_clusters = rng.integers(0, cfg.n_clusters, size=cfg.n_users)
    item_latents = centers[item_clusters] + 0.5 * rng.normal(size=(total, cfg.latent_dim))
    user_latents = centers[user_clusters] + 0.5 * rng.normal(size=(cfg.n_users, cfg.latent_dim))
    images = _render_images(rng, cfg, item_latents, item_clusters)

    # Zipf-like popularity; the ordering follows a latent "appeal" direction
    # (rendered into the images) so popular items are visually recognisable
    appeal_axis = rng.normal(size=cfg.latent_dim)
    appeal = item_latents[:cfg.n_items] @ appeal_axis / np.linalg.norm(appeal_axis)
    appeal = appeal + cfg.appeal_noise * appeal.std() * rng.normal(size=cfg.n_items)
    ranks = np.empty(cfg.n_items, dtype=np.int64)
    ranks[np.argsort(-appeal, kind="stable")] = np.arange(1, cfg.n_items + 1)
    log_pop = -cfg.skew * np.log(ranks)
    logits = cfg.affinity * (user_latents @ item_latents[:cfg.n_items].T) / np.sqrt(cfg.latent_dim) + log_pop
    # Gumbel top-k: sampling without replacement proportional to exp(logits)
    gumbel = rng.gumbel(size=logits.shape)
    chosen = np.argsort(-(logits + gumbel), axis=1, kind="stable")[:, :cfg.interactions_per_user]
    interactions = tuple((int(u), int(i)) for u in range(cfg.n_users) for i in sorted(chosen[u]))
    return InteractionDataset(
        n_users=cfg.n_users, n_items=total, interactions=interactions, images=images,
        item_clusters=item_clusters, user_clusters=user_clusters, seed=cfg.seed,
    )


def leave_one_out_split(ds, seed=0):
    rng = np.random.default_rng(seed)
    positives = [set() for _ in range(ds.n_users)]
    for u, i in ds.interactions:
        positives[u].add(i)
    train, test = [], []
    for u, items in enumerate(positives):
        if len(items) < 2:
            raise SplitError(f"user {u} has {len(items)} interactions; need at least 2", user=u)
        ordered = sorted(items)
        held = ordered[int(rng.integers(len(ordered)))]
        test.append(held)
        train.append(frozenset(items - {held}))
    return replace(ds, train_pos=tuple(train), test_items=tuple(test))


def select_cold_items(ds, n, seed=0):
    if n == 0:
        return []
    touched = set(i for _, i in ds.interactions) | set(ds.test_items)
    free = np.array([i for i in range(ds.n_items) if i not in touched], dtype=np.int64)
    if free.size < n:
        raise SelectionError(f"only {free.size} interaction-free items, {n} requested")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(free, size=n, replace=False))


def with_cold_items(ds, cold):
    return replace(ds, cold_items=tuple(int(i) for i in cold))


def make_dataset(cfg=SynthConfig(), n_cold=50, seed=None):
    """Generate, split and elect the cold set in one go."""
    seed = cfg.seed if seed is None else seed
    ds = leave_one_out_split(generate_synthetic(cfg), seed=seed)
    return with_cold_items(ds, select_cold_items(ds, n_cold, seed=seed))


def validate_dataset(ds):
    """Return a list of violated dataset invariants (empty when valid)."""
    problems = []
    if ds.images.shape[0] != ds.n_items:
        problems.append(f"{ds.images.shape[0]} images for {ds.n_items} items")
    if not is_quantized(ds.images):
        problems.append("images are not on the 8-bit grid")
    original = [set() for _ in range(ds.n_users)]
    for u, i in ds.interactions:
        original[u].add(i)
        if not 0 <= i < ds.n_items:
            problems.append(f"interaction ({u}, {i}) references a missing item")
    if ds.test_items:
        for u, t in enumerate(ds.test_items):
            if t not in original[u]:
                problems.append(f"test item {t} of user {u} is not an original interaction")
            if t in ds.train_pos[u]:
                problems.append(f"test item {t} of user {u} is still a training positive")
            if ds.train_pos[u] | {t} != original[u]:
                problems.append(f"user {u} lost interactions in the split")
    cold = set(ds.cold_items)
    for u, items in enumerate(ds.all_positives()):
        if cold & items:
            problems.append(f"cold items {sorted(cold & items)} are positives of user {u}")
    if cold & set(ds.test_items):
        problems.append("a cold item is used as a test item")
    return problems


# -- persistence -------------------------------------------------------------

def save_dataset(ds, directory, config=None):
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for item in range(ds.n_items):
        save_image(ds.images[item], root / "images" / f"{item}.png")
    manifest = {
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "image_shape": list(ds.image_shape),
        "seed": ds.seed,
        "interactions": [list(p) for p in ds.interactions],
        "train_pos": [sorted(p) for p in ds.train_pos],
        "test_items": list(ds.test_items),
        "cold_items": list(ds.cold_items),
        "item_clusters": [int(c) for c in ds.item_clusters] if ds.item_clusters is not None else None,
        "user_clusters": [int(c) for c in ds.user_clusters] if ds.user_clusters is not None else None,
        "config": asdict(config) if config is not None else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root / "manifest.json"


def load_dataset(directory):
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    images = np.stack([load_image(root / "images" / f"{i}.png") for i in range(manifest["n_items"])])
    clusters = manifest.get("item_clusters")
    users = manifest.get("user_clusters")
    return InteractionDataset(
        n_users=manifest["n_users"],
        n_items=manifest["n_items"],
        interactions=tuple(tuple(p) for p in manifest["interactions"]),
        images=images,
        train_pos=tuple(frozenset(p) for p in manifest["train_pos"]),
        test_items=tuple(manifest["test_items"]),
        cold_items=tuple(manifest["cold_items"]),
        item_clusters=np.array(clusters) if clusters is not None else None,
        user_clusters=np.array(users) if users is not None else None,
        seed=manifest["seed"],
    )
