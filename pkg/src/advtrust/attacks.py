"""
Gradient-based attacks used as decision-boundary distance probes.

Both attacks flip against the model's own clean prediction, so a sample the
model already gets wrong is still measured from its predicted class.  The
distance estimate is always the L2 norm of the final displacement, also for
the L-infinity constrained PGD.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import nn
from .errors import ConfigError, NumericError, PreconditionError

# DeepFool lands exactly on the linearised boundary; step slightly past it.
_DF_REL_NUDGE = 1e-4
_DF_ABS_NUDGE = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    max_steps: int = 20
    overshoot: float = 0.02
    pixel_bounds: tuple = (0.0, 1.0)
    random_start: bool = False
    seed: int = 0
    ddb_ceiling: float | None = None

    def __post_init__(self):
        if self.kind not in ("pgd", "deepfool"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ConfigError(f"max_steps must be a positive integer, got {self.max_steps}")
        if self.kind == "pgd":
            # epsilon == 0 is the identity attack (clean-copy augmentation)
            if not self.epsilon >= 0:
                raise ConfigError(f"pgd epsilon must be >= 0, got {self.epsilon}")
            if not self.step_size > 0:
                raise ConfigError(f"pgd step_size must be > 0, got {self.step_size}")
        if not self.overshoot >= 0:
            raise ConfigError(f"overshoot must be >= 0, got {self.overshoot}")
        lo, hi = self.pixel_bounds
        if not lo < hi:
            raise ConfigError(f"pixel_bounds must satisfy lo < hi, got {self.pixel_bounds}")
        if self.ddb_ceiling is not None and not self.ddb_ceiling > 0:
            raise ConfigError("ddb_ceiling must be > 0")
        object.__setattr__(self, "pixel_bounds", (float(lo), float(hi)))
        object.__setattr__(self, "max_steps", int(self.max_steps))

    @classmethod
    def pgd(cls, **kw):
        return cls(kind="pgd", **kw)

    @classmethod
    def deepfool(cls, max_steps=50, overshoot=0.02, **kw):
        return cls(kind="deepfool", max_steps=max_steps, overshoot=overshoot, **kw)

    @property
    def failure_steps(self):
        """Steps value recorded when the attack never flips the prediction."""
        return self.max_steps + 1

    def ceiling(self, pixel_count):
        """DDB reported for a censored (failed) attack."""
        if self.ddb_ceiling is not None:
            return float(self.ddb_ceiling)
        if self.kind == "pgd":
            # largest L2 radius inside the L-infinity ball
            return float(self.epsilon * math.sqrt(pixel_count))
        lo, hi = self.pixel_bounds
        if math.isfinite(hi - lo):
            return float((hi - lo) * math.sqrt(pixel_count))
        return math.inf

    def to_dict(self):
        d = dict(self.__dict__)
        d["pixel_bounds"] = list(self.pixel_bounds)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "pixel_bounds" in d:
            d["pixel_bounds"] = tuple(d["pixel_bounds"])
        return cls(**d)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    steps: int
    delta: float
    original_pred: int
    adversarial_pred: int


@dataclass
class DDBEstimate:
    d_f: float
    censored: bool
    result: AttackResult


def l2_distances(adv, x):
    diff = np.asarray(adv, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return np.sqrt((diff.reshape(diff.shape[0], -1) ** 2).sum(axis=1))


def _check_in_bounds(x, cfg):
    lo, hi = cfg.pixel_bounds
    if np.any(x < lo) or np.any(x > hi):
        raise PreconditionError(f"input pixels outside bounds {cfg.pixel_bounds}")


# ---------------------------------------------------------------------------
# PGD


@dataclass
class BatchAttack:
    """Column-wise attack outcome for a batch of samples."""

    adversarial: np.ndarray
    success: np.ndarray
    steps: np.ndarray
    delta: np.ndarray
    original_pred: np.ndarray
    adversarial_pred: np.ndarray
    kind: str = field(default="pgd")

    def __len__(self):
        return self.success.shape[0]

    def result(self, i):
        return AttackResult(
            self.adversarial[i],
            bool(self.success[i]),
            int(self.steps[i]),
            float(self.delta[i]),
            int(self.original_pred[i]),
            int(self.adversarial_pred[i]),
        )


def pgd_batch(model, images, cfg, labels=None, early_stop=True, callback=None):
    """
    L-infinity PGD on a batch, sign-gradient ascent on the cross-entropy.

    ``labels=None`` attacks the model's own predictions.  With ``early_stop``
    a sample is frozen at the first iteration its prediction flips;
    otherwise every sample runs all ``max_steps`` (adversarial training).
    ``callback(t, x_t)`` sees every iterate.
    """
    if cfg.kind != "pgd":
        raise ConfigError(f"pgd_batch needs a pgd config, got {cfg.kind!r}")
    x0 = np.asarray(images, dtype=model.dtype)
    _check_in_bounds(x0, cfg)
    lo, hi = cfg.pixel_bounds
    n = x0.shape[0]
    orig = np.atleast_1d(nn.predict(model, x0)) if n else np.zeros(0, dtype=np.int64)
    y_ref = orig if labels is None else np.asarray(labels)
    eps = np.asarray(cfg.epsilon, dtype=model.dtype)
    step = np.asarray(cfg.step_size, dtype=model.dtype)
    floor = np.maximum(x0 - eps, lo)
    ceil = np.minimum(x0 + eps, hi)

    x = x0.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        x = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(x.dtype), floor, ceil)

    first_flip = np.full(n, cfg.failure_steps, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for t in range(1, cfg.max_steps + 1):
        idx = np.nonzero(active)[0] if early_stop else np.arange(n)
        if idx.size == 0:
            break
        _, g = nn.cross_entropy(nn.forward(model, x[idx]), y_ref[idx])
        gx, _ = nn.backward_logits(model, x[idx], g)
        if not np.all(np.isfinite(gx)):
            raise NumericError("non-finite input gradient during PGD")
        moved = x[idx] + step * np.sign(gx)
        x[idx] = np.minimum(np.maximum(moved, floor[idx]), ceil[idx])
        pred = np.atleast_1d(nn.predict(model, x[idx]))
        flipped = pred != orig[idx]
        fresh = idx[flipped & (first_flip[idx] == cfg.failure_steps)]
        first_flip[fresh] = t
        if early_stop:
            active[idx[flipped]] = False
        if callback is not None:
            callback(t, x)

    adv_pred = np.atleast_1d(nn.predict(model, x)) if n else orig
    success = adv_pred != orig
    steps = np.where(success, first_flip, cfg.failure_steps)
    return BatchAttack(x, success, steps, l2_distances(x, x0) if n else np.zeros(0), orig, adv_pred, "pgd")


def pgd_attack(model, x, cfg, label=None, callback=None):
    """Single-sample PGD; see :func:`pgd_batch`."""
    labels = None if label is None else np.asarray([label])
    out = pgd_batch(model, np.asarray(x)[None], cfg, labels=labels, callback=callback)
    return out.result(0)


# ---------------------------------------------------------------------------
# DeepFool


def deepfool_attack(model, x, cfg):
    """
    Multiclass DeepFool.

    Each iteration linearises every non-original class margin at the current
    point and takes the minimal L2 step to the nearest linearised boundary.
    The accumulated step is scaled by ``1 + overshoot``.
    """
    if cfg.kind != "deepfool":
        raise ConfigError(f"deepfool_attack needs a deepfool config, got {cfg.kind!r}")
    x0 = np.asarray(x, dtype=model.dtype)
    _check_in_bounds(x0, cfg)
    lo, hi = cfg.pixel_bounds
    p0 = nn.predict(model, x0)
    r_tot = np.zeros(x0.shape, dtype=np.float64)
    xt = x0.copy()
    steps = cfg.failure_steps
    pred = p0

    for t in range(1, cfg.max_steps + 1):
        logits = nn.forward(model, xt).astype(np.float64)
        jac = nn.input_jacobian(model, xt).astype(np.float64)
        if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(logits))):
            raise NumericError("non-finite gradient during DeepFool")
        w = (jac - jac[p0]).reshape(jac.shape[0], -1)
        f = logits - logits[p0]
        norms = np.linalg.norm(w, axis=1)
        norms[p0] = 0.0
        candidates = np.nonzero(norms > 0)[0]
        if candidates.size == 0:
            break
        dist = np.abs(f[candidates]) / norms[candidates]
        best = candidates[int(np.argmin(dist))]
        pert = float(dist.min())
        direction = w[best] / norms[best]
        r_tot += ((pert * (1 + _DF_REL_NUDGE) + _DF_ABS_NUDGE) * direction).reshape(x0.shape)
        xt = np.clip(x0 + (1 + cfg.overshoot) * r_tot, lo, hi).astype(model.dtype)
        pred = nn.predict(model, xt)
        if pred != p0:
            steps = t
            break

    success = pred != p0
    if not success:
        steps = cfg.failure_steps
    delta = float(np.linalg.norm((xt.astype(np.float64) - x0.astype(np.float64)).ravel()))
    return AttackResult(xt, bool(success), int(steps), delta, int(p0), int(pred))


def run_attack(model, x, cfg):
    if cfg.kind == "pgd":
        return pgd_attack(model, x, cfg)
    return deepfool_attack(model, x, cfg)


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def attack_batch(model, images, cfg, threads=1):
    """Run the configured attack over a batch; returns a :class:`BatchAttack`."""
    images = np.asarray(images, dtype=model.dtype)
    if cfg.kind == "pgd":
        return pgd_batch(model, images, cfg)
    results = _map(lambda x: deepfool_attack(model, x, cfg), list(images), threads)
    if not results:
        z = np.zeros(0, dtype=np.int64)
        return BatchAttack(images.copy(), z.astype(bool), z, np.zeros(0), z, z, "deepfool")
    return BatchAttack(
        np.stack([r.adversarial for r in results]),
        np.array([r.success for r in results]),
        np.array([r.steps for r in results], dtype=np.int64),
        np.array([r.delta for r in results]),
        np.array([r.original_pred for r in results], dtype=np.int64),
        np.array([r.adversarial_pred for r in results], dtype=np.int64),
        "deepfool",
    )


# ---------------------------------------------------------------------------
# distance to decision boundary


def estimate_ddb(model, x, cfg):
    """
    Distance-to-boundary estimate from one attack run.

    Failed attacks report ``cfg.ceiling(pixel_count)`` and are marked censored.
    """
    result = run_attack(model, x, cfg)
    if result.success:
        return DDBEstimate(result.delta, False, result)
    return DDBEstimate(cfg.ceiling(int(np.prod(np.shape(x)))), True, result)


def estimate_ddb_batch(model, images, cfg, threads=1):
    """Vectorised :func:`estimate_ddb`; returns ``(d_f, censored, BatchAttack)``."""
    out = attack_batch(model, images, cfg, threads=threads)
    pixels = int(np.prod(np.shape(images)[1:]))
    d_f = np.where(out.success, out.delta, cfg.ceiling(pixels))
    return d_f.astype(np.float64), ~out.success, out


def rank_correlation(a, b):
    """Spearman rank correlation; NaN when either column is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return math.nan
    return float(stats.spearmanr(a, b).statistic)


STEPS_COLUMNS = ("sample_id", "class", "d_f", "censored", "steps", "success", "attack_kind")


@dataclass
class StepsProfile:
    """One row per sample: boundary distance against attack steps."""

    sample_id: np.ndarray
    label: np.ndarray
    d_f: np.ndarray
    censored: np.ndarray
    steps: np.ndarray
    success: np.ndarray
    attack_kind: str
    rank_correlation: float

    def rows(self):
        for i in range(self.sample_id.shape[0]):
            yield {
                "sample_id": int(self.sample_id[i]),
                "class": int(self.label[i]),
                "d_f": float(self.d_f[i]),
                "censored": int(bool(self.censored[i])),
                "steps": int(self.steps[i]),
                "success": int(bool(self.success[i])),
                "attack_kind": self.attack_kind,
            }


def steps_profile(model, images, cfg, labels=None, sample_ids=None, ddb_cfg=None, threads=1):
    """
    Per-sample ``(d_f, steps)`` table for the configured attack.

    ``ddb_cfg`` takes the distance column from a second attack while the
    steps column stays with ``cfg``.
    """
    images = np.asarray(images)
    n = images.shape[0]
    if n == 0:
        raise PreconditionError("steps_profile over an empty dataset")
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    labels = np.full(n, -1) if labels is None else np.asarray(labels)
    d_f, censored, out = estimate_ddb_batch(model, images, cfg, threads=threads)
    if ddb_cfg is not None:
        d_f, censored, _ = estimate_ddb_batch(model, images, ddb_cfg, threads=threads)
    return StepsProfile(
        ids, labels, d_f, censored, out.steps, out.success, cfg.kind,
        rank_correlation(d_f, out.steps),
    )


def write_steps_profile(path, profile):
    from .reports import write_csv

    write_csv(path, list(profile.rows()), STEPS_COLUMNS)
