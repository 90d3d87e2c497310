"""Adversarial item images: INSA, EXPA, c-SEMA and classifier-targeted FGSM/PGD.

Perturbation attacks run batched projected ascent: every iteration takes an
optimizer step, projects onto the L-inf ball of radius eps/255 around the
*original* image, clips to [0, 1], and backtracks (halving the step up to
three times) whenever the objective would decrease. Outputs are quantized
to the 8-bit grid.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from aip.data import quantize_image, to_uint8
from aip.diffcore import OptimizerState, optimizer_step
from aip.errors import AttackError, ConfigError, DimensionError, LayoutError
from aip.recommenders import DVBPRModel, SimRankModel, VBPRModel

KINDS = ("insa", "expa", "csema", "fgsm", "pgd")
MAX_HALVINGS = 3


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "insa"
    eps: int = 32  # L-inf bound in 8-bit units
    iters: int = 30
    step: float = 0.01
    hook: int | None = None
    target: int | None = None
    seed: int = 0
    user_batch: int | None = None  # INSA users per step; None means all users
    optimizer: str = "adam"

    def problems(self):
        errors = []
        if self.kind not in KINDS:
            errors.append(f"unknown attack kind {self.kind!r}")
        if not isinstance(self.eps, (int, np.integer)) or not 1 <= self.eps <= 255:
            errors.append(f"eps must be an integer in [1, 255], got {self.eps!r}")
        if self.iters < 1:
            errors.append(f"iters must be >= 1, got {self.iters}")
        if self.step < 0:
            errors.append("step must be non-negative")
        if self.kind in ("expa", "csema") and self.hook is None:
            errors.append(f"{self.kind} attack requires a hook item")
        if self.kind not in ("expa", "csema") and self.hook is not None:
            errors.append(f"{self.kind} attack does not take a hook item")
        if self.kind in ("fgsm", "pgd") and self.target is None:
            errors.append(f"{self.kind} attack requires a target class")
        if self.kind not in ("fgsm", "pgd") and self.target is not None:
            errors.append(f"{self.kind} attack does not take a target class")
        if self.user_batch is not None and self.user_batch < 1:
            errors.append("user_batch must be positive")
        return errors

    def check(self):
        errors = self.problems()
        if errors:
            raise ConfigError("; ".join(errors))
        return self


@dataclass
class AttackResult:
    image: np.ndarray
    trace: list = field(default_factory=list)
    linf: float = 0.0  # pixel scale; an integer multiple of 1/255
    wall_time: float = 0.0

    def to_json(self):
        return {"trace": [float(v) for v in self.trace], "linf": self.linf,
                "linf_8bit": int(round(self.linf * 255)), "wall_time": self.wall_time}


def project_and_clip(original, perturbed, eps):
    """Clamp the perturbation to [-eps/255, eps/255], then pixels to [0, 1]."""
    original = np.asarray(original, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if original.shape != perturbed.shape:
        raise DimensionError(f"shapes differ: {original.shape} vs {perturbed.shape}")
    bound = eps / 255.0
    return np.clip(original + np.clip(perturbed - original, -bound, bound), 0.0, 1.0)


def linf_8bit(a, b):
    """L-inf distance between two quantized images in 8-bit units (exact integer)."""
    return int(np.max(np.abs(to_uint8(a).astype(np.int16) - to_uint8(b).astype(np.int16)), initial=0))


def _results(originals, final, traces, started):
    elapsed = time.perf_counter() - started
    out = []
    for n in range(len(final)):
        out.append(AttackResult(final[n], [float(t[n]) for t in traces],
                                linf_8bit(final[n], originals[n]) / 255.0, elapsed / len(final)))
    return out


def projected_ascent(originals, value_and_grad, cfg, resample=None):
    """Maximize a per-image objective over the eps-ball of each original image.

    ``value_and_grad(images)`` returns ``(values[N], grads[N, H, W, C])``.
    Returns ``(final_quantized_images, trace)`` where ``trace`` holds one
    objective vector per iteration (index 0 is the starting point).
    ``resample()``, if given, is called before every iteration to swap the
    objective (user mini-batches).
    """
    x0 = np.asarray(originals, dtype=np.float64)
    x = x0.copy()
    f, g = value_and_grad(x)
    trace = [f.copy()]
    state = OptimizerState(kind=cfg.optimizer, lr=cfg.step) if cfg.step > 0 else None
    for k in range(cfg.iters):
        if resample is not None:
            resample()
            f, g = value_and_grad(x)
        if state is None:
            trace.append(f.copy())
            continue
        stepped, state = optimizer_step(state, x.ravel(), g.ravel(), "ascend")
        update = stepped.reshape(x.shape) - x
        pending = np.ones(len(x), dtype=bool)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            idx = np.flatnonzero(pending)
            trial = project_and_clip(x0[idx], x[idx] + scale * update[idx], cfg.eps)
            ft, gt = value_and_grad(trial)
            if not np.all(np.isfinite(ft)):
                raise AttackError(f"non-finite objective at iteration {k}", iteration=k)
            ok = ft >= f[idx]
            x[idx[ok]], f[idx[ok]], g[idx[ok]] = trial[ok], ft[ok], gt[ok]
            pending[idx[ok]] = False
            if not pending.any():
                break
            scale /= 2.0
        trace.append(f.copy())
    return quantize_image(x), trace


# -- INSA --------------------------------------------------------------------

def _user_subset(model, cfg, rng):
    n_users = model.user_visual.shape[0] if hasattr(model, "user_visual") else model.profile_weights.shape[0]
    if cfg.user_batch is None or cfg.user_batch >= n_users:
        return np.arange(n_users)
    return np.sort(rng.choice(n_users, size=cfg.user_batch, replace=False))


def insa_objective(model, users=None):
    """Per-image INSA objective and its feature-space gradient for ``model``.

    The DVBPR objective sum_u exp(s_u) is handled in log space
    (log-sum-exp); that is a monotone transform of the same objective whose
    gradient is the max-shifted, normalized exp-weighted gradient.
    """
    if isinstance(model, SimRankModel):
        w = model.profile_weights if users is None else model.profile_weights[users]
        pull = w.sum(axis=0) @ model.item_features  # sum_u mean_j f_j
        mass = w.sum()

        def fn(feats):
            values = model.feature_scores(feats) if users is None else model.feature_scores(feats)[users]
            return values.sum(axis=0), 2.0 * (pull[None, :] - mass * feats)
        return fn
    if isinstance(model, VBPRModel):
        theta = model.user_visual if users is None else model.user_visual[users]
        direction = model.projection.T @ theta.sum(axis=0)

        def fn(feats):
            return feats @ direction, np.broadcast_to(direction, feats.shape)
        return fn
    if isinstance(model, DVBPRModel):
        theta = model.user_visual if users is None else model.user_visual[users]

        def fn(feats):
            s = feats @ theta.T  # (N, U)
            return logsumexp(s, axis=1), softmax(s, axis=1) @ theta
        return fn
    raise TypeError(f"INSA is not defined for {type(model).__name__}")


def insa_batch(model, images, cfg):
    """INSA against ``model`` (SimRank, VBPR/AMR or DVBPR) for a batch of images.

    With ``cfg.user_batch`` set, every iteration draws a fresh user subset and
    backtracking compares objectives on that subset.
    """
    cfg.check()
    started = time.perf_counter()
    extractor = model.extractor
    rng = np.random.default_rng(cfg.seed)
    current = {"objective": insa_objective(model)}

    def value_and_grad(x):
        holder = {}

        def upstream(feats):
            values, grad = current["objective"](feats)
            holder["values"] = values
            return np.array(grad), None
        _, _, gx, _ = extractor.forward_backward(x, upstream)
        return holder["values"], gx

    def resample():
        current["objective"] = insa_objective(model, _user_subset(model, cfg, rng))

    if cfg.user_batch is not None:
        resample()

    originals = np.asarray(images, dtype=np.float64)
    final, trace = projected_ascent(originals, value_and_grad, cfg,
                                   resample=resample if cfg.user_batch is not None else None)
    return _results(originals, final, trace, started)


def insa(model, image, cfg):
    return insa_batch(model, np.asarray(image)[None], cfg)[0]


# -- EXPA --------------------------------------------------------------------

def feature_distance(extractor, images, hook_image):
    feats = extractor.forward(np.asarray(images).reshape((-1,) + extractor.input_shape))
    return np.linalg.norm(feats - extractor.forward(hook_image), axis=1)


def expa_batch(extractor, images, hook_image, cfg):
    """Pull each image's features toward the hook item's features.

    Maximizes -||phi(x) - phi(hook)||^2 (same minimizer as the L2 distance).
    """
    cfg.check()
    started = time.perf_counter()
    target = extractor.forward(hook_image)

    def value_and_grad(x):
        holder = {}

        def upstream(feats):
            diff = feats - target
            holder["values"] = -np.sum(diff ** 2, axis=1)
            return -2.0 * diff, None
        _, _, gx, _ = extractor.forward_backward(x, upstream)
        return holder["values"], gx

    originals = np.asarray(images, dtype=np.float64)
    final, trace = projected_ascent(originals, value_and_grad, cfg)
    return _results(originals, final, trace, started)


def expa(extractor, image, hook_image, cfg):
    return expa_batch(extractor, np.asarray(image)[None], hook_image, cfg)[0]


# -- c-SEMA ------------------------------------------------------------------

ANCHORS = ("top-left", "top-right", "bottom-left", "bottom-right", "right")


@dataclass(frozen=True)
class Layout:
    scale: float = 0.4
    anchor: str = "right"
    caption: bool = True
    caption_color: tuple = (1.0, 1.0, 1.0)
    caption_rows: int = 3


def nearest_resize(image, height, width):
    h, w = image.shape[:2]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
    return image[rows][:, cols]


def csema(image, hook_image, layout=Layout()):
    """Paste a nearest-neighbour resized hook image as an inset, plus a flat caption band."""
    image = np.asarray(image, dtype=np.float64)
    hook_image = np.asarray(hook_image, dtype=np.float64)
    if layout.anchor not in ANCHORS:
        raise LayoutError(f"unknown anchor {layout.anchor!r}")
    if not 0 < layout.scale <= 1:
        raise LayoutError(f"inset scale must lie in (0, 1], got {layout.scale}")
    if image.shape[2] != hook_image.shape[2]:
        raise LayoutError("image and hook have different channel counts")
    h, w, c = image.shape
    ih, iw = max(1, int(round(layout.scale * h))), max(1, int(round(layout.scale * w)))
    out = image.copy()
    if layout.caption:
        rows = min(layout.caption_rows, h)
        out[h - rows:, :, :] = np.resize(np.asarray(layout.caption_color, dtype=np.float64), c)
    top = {"top-left": 0, "top-right": 0, "bottom-left": h - ih, "bottom-right": h - ih,
           "right": (h - ih) // 2}[layout.anchor]
    left = 0 if layout.anchor in ("top-left", "bottom-left") else w - iw
    out[top:top + ih, left:left + iw, :] = nearest_resize(hook_image, ih, iw)
    return quantize_image(out)


# -- classifier-targeted FGSM / PGD --------------------------------------------

def _targeted_value_and_grad(classifier, target):
    extractor = classifier.extractor

    def value_and_grad(x):
        holder = {}

        def upstream(feats):
            logits = feats @ classifier.weights.T + classifier.bias
            holder["values"] = log_softmax(logits, axis=1)[:, target]  # -cross entropy
            probs = softmax(logits, axis=1)
            onehot = np.zeros_like(probs)
            onehot[:, target] = 1.0
            return (onehot - probs) @ classifier.weights, None
        _, _, gx, _ = extractor.forward_backward(x, upstream)
        return holder["values"], gx
    return value_and_grad


def default_pgd_step(cfg):
    return 2.5 * cfg.eps / 255.0 / cfg.iters


def classifier_targeted_batch(images, classifier, cfg):
    """Signed-gradient steps toward ``cfg.target``; FGSM is one step of eps/255."""
    cfg.check()
    started = time.perf_counter()
    originals = np.asarray(images, dtype=np.float64)
    value_and_grad = _targeted_value_and_grad(classifier, cfg.target)
    if cfg.kind == "fgsm":
        steps, size = 1, cfg.eps / 255.0
    else:
        steps, size = cfg.iters, cfg.step
    x = originals.copy()
    f, g = value_and_grad(x)
    trace = [f]
    for k in range(steps):
        x = project_and_clip(originals, x + size * np.sign(g), cfg.eps)
        f, g = value_and_grad(x)
        if not np.all(np.isfinite(f)):
            raise AttackError(f"non-finite objective at iteration {k}", iteration=k)
        trace.append(f)
    return _results(originals, quantize_image(x), trace, started)


def classifier_targeted(image, classifier, cfg):
    return classifier_targeted_batch(np.asarray(image)[None], classifier, cfg)[0]
