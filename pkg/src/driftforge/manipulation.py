"""The data manipulation module: transform, curate, normalise, mix, compensate, denormalise.

A manipulated sample follows one (transform i, mix-up j) pair drawn from the
policy matrix ``p`` at strength ``lam[i, j]``. Randomness is derived per sample
from ``(master seed, epoch, sample id)`` so results do not depend on batch
composition or worker count, and every batch is logged for exact replay.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .curation import BinaryMixConfig, binary_mix_weight, curate, rolling_denormalize, rolling_normalize
from .data import CLOSE, ForecastSample, PanelSeries, RollingStats, SampleSet
from .mixups import CointMatrix, MixKind, apply_mixup, sample_mix_target
from .transforms import TransformKind, apply_transform

ALL_TRANSFORMS = tuple(TransformKind)
ALL_MIXUPS = tuple(MixKind)
_SELECT_SALT = 0x5E1EC7
_PARTNER_SALT = 0xFA27


class PolicyError(ValueError):
    pass


class ReplayError(RuntimeError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def derive_seed(master: int, *keys: int) -> int:
    """Stable 64-bit seed from a master seed and integer keys."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ManipulationPolicy:
    """Operation weights ``p`` and strengths ``lam`` over (transform, mix-up) pairs, plus proportion ``alpha``.

    With no mix-ups configured both matrices have a single column.
    """

    p: np.ndarray
    lam: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        p = np.atleast_2d(np.asarray(self.p, dtype=np.float64))
        lam = np.atleast_2d(np.asarray(self.lam, dtype=np.float64))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "alpha", float(self.alpha))
        self.validate()

    def validate(self) -> None:
        if self.p.shape != self.lam.shape:
            raise PolicyError(f"p shape {self.p.shape} differs from lambda shape {self.lam.shape}")
        if not (np.all(np.isfinite(self.p)) and np.all(self.p >= 0)):
            raise PolicyError("p must be finite and non-negative")
        if abs(self.p.sum() - 1.0) > 1e-6:
            raise PolicyError(f"p must sum to 1, sums to {self.p.sum()!r}")
        if not (np.all(self.lam >= 0) and np.all(self.lam <= 1)):
            raise PolicyError("lambda entries must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise PolicyError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.p.shape  # type: ignore[return-value]

    @classmethod
    def uniform(cls, n: int, m: int, alpha: float, lam: float = 0.5) -> "ManipulationPolicy":
        m = max(m, 1)
        return cls(np.full((n, m), 1.0 / (n * m)), np.full((n, m), lam), alpha)

    def with_alpha(self, alpha: float) -> "ManipulationPolicy":
        return ManipulationPolicy(self.p, self.lam, alpha)


@dataclass
class ManipulationContext:
    """Everything the module needs besides the batch: training panel, statistics, partner matrix."""

    panel: PanelSeries
    stats: RollingStats
    coint: CointMatrix | None = None
    transforms: tuple[TransformKind, ...] = ALL_TRANSFORMS
    mixups: tuple[MixKind, ...] = ALL_MIXUPS
    k: int = 3
    binary: BinaryMixConfig = field(default_factory=BinaryMixConfig)
    config_hash: str = ""

    def __post_init__(self) -> None:
        self.transforms = tuple(TransformKind(t) for t in self.transforms)
        self.mixups = tuple(MixKind(m) for m in self.mixups)
        if not self.transforms:
            raise PolicyError("at least one transform is required")
        if self.mixups and self.coint is None:
            raise PolicyError("mix-ups are configured but no cointegration matrix was given")

    @property
    def policy_shape(self) -> tuple[int, int]:
        return len(self.transforms), max(len(self.mixups), 1)

    def check(self, policy: ManipulationPolicy) -> None:
        if policy.shape != self.policy_shape:
            raise PolicyError(f"policy shape {policy.shape} does not match operation set {self.policy_shape}")


@dataclass
class AugmentedBatch:
    windows: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    choices: np.ndarray

    def checksum(self) -> str:
        return batch_checksum(self.windows, self.targets)


def batch_checksum(windows: np.ndarray, targets: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(windows, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(targets, dtype="<f8").tobytes())
    return h.hexdigest()


def _partner(ctx: ManipulationContext, stock: int, end: int, lam: float, length: int, rng: np.random.Generator) -> tuple[np.ndarray, float, int]:
    b = sample_mix_target(stock, lam, ctx.coint, ctx.k, rng)  # type: ignore[arg-type]
    v = ctx.panel.values
    window = v[end - length + 1 : end + 1, b]
    target = (v[end + 1, b, CLOSE] - v[end, b, CLOSE]) / v[end, b, CLOSE]
    return window, float(target), b


def augment_one(
    window: np.ndarray,
    target: float,
    stock: int,
    end: int,
    i: int,
    j: int,
    lam: float,
    ctx: ManipulationContext,
    rng: np.random.Generator,
    partner_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float]:
    """Run one sample through every layer with operation pair (i, j)."""
    L = window.shape[0]
    mean, std = ctx.stats.at(stock, end, L)
    eps = ctx.stats.eps
    x1 = curate(apply_transform(ctx.transforms[i], lam, window, rng))
    z0 = rolling_normalize(window, mean, std, eps)
    z1 = rolling_normalize(x1, mean, std, eps)
    y1 = target
    if ctx.mixups:
        pw, pt, b = _partner(ctx, stock, end, lam, L, partner_rng or rng)
        pmean, pstd = ctx.stats.at(b, end, L)
        zb = rolling_normalize(pw, pmean, pstd, eps)
        z2, y2 = apply_mixup(ctx.mixups[j], lam, (z1, y1), (zb, pt), rng)
    else:
        z2, y2 = z1, y1
    try:
        b_mix, _ = binary_mix_weight(z0, z2, ctx.binary, rng)
    except ValueError:
        b_mix = 0.0
    z3 = b_mix * z0 + (1.0 - b_mix) * z2
    y3 = b_mix * target + (1.0 - b_mix) * y2
    return curate(rolling_denormalize(z3, mean, std, eps)), float(y3)


def n_manipulated(alpha: float, batch_size: int) -> int:
    return min(batch_size, int(math.floor(alpha * batch_size + 0.5)))


def _draw_choice(p: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    flat = np.cumsum(p.ravel())
    idx = int(np.searchsorted(flat, rng.random() * flat[-1], side="right"))
    idx = min(idx, p.size - 1)
    return divmod(idx, p.shape[1])


@dataclass
class ProvenanceRecord:
    step: int
    epoch: int
    sample_ids: list[int]
    alpha: float
    p: list[list[float]]
    lam: list[list[float]]
    choices: list[list[int] | None]
    seeds: list[int]
    config_hash: str
    checksum: str

    def to_json(self) -> str:
        return dumps_exact(self.__dict__)

    @classmethod
    def from_json(cls, line: str) -> "ProvenanceRecord":
        return cls(**json.loads(line))

    @property
    def policy(self) -> ManipulationPolicy:
        return ManipulationPolicy(np.array(self.p), np.array(self.lam), self.alpha)


def _apply_plan(
    batch: SampleSet,
    policy: ManipulationPolicy,
    ctx: ManipulationContext,
    seeds: Sequence[int],
    selected: np.ndarray,
) -> AugmentedBatch:
    windows = batch.windows.copy()
    targets = batch.targets.copy()
    choices = np.full((len(batch), 2), -1, dtype=np.int64)
    for pos in np.flatnonzero(selected):
        rng = np.random.default_rng(seeds[pos])
        i, j = _draw_choice(policy.p, rng)
        choices[pos] = (i, j)
        windows[pos], targets[pos] = augment_one(
            batch.windows[pos], float(batch.targets[pos]), int(batch.stock[pos]), int(batch.end[pos]),
            i, j, float(policy.lam[i, j]), ctx, rng,
        )
    return AugmentedBatch(windows, targets, selected.copy(), choices)


def manipulate(
    batch: SampleSet,
    policy: ManipulationPolicy,
    ctx: ManipulationContext,
    master_seed: int,
    epoch: int = 0,
    step: int = 0,
) -> tuple[AugmentedBatch, ProvenanceRecord]:
    """Manipulate exactly round(alpha * B) uniformly chosen samples of the batch."""
    policy.validate()
    ctx.check(policy)
    B = len(batch)
    sel_rng = np.random.default_rng(derive_seed(master_seed, epoch, step, _SELECT_SALT))
    selected = np.zeros(B, dtype=bool)
    selected[sel_rng.permutation(B)[: n_manipulated(policy.alpha, B)]] = True
    seeds = [derive_seed(master_seed, epoch, int(sid)) for sid in batch.ids]
    out = _apply_plan(batch, policy, ctx, seeds, selected)
    record = ProvenanceRecord(
        step=int(step),
        epoch=int(epoch),
        sample_ids=[int(s) for s in batch.ids],
        alpha=policy.alpha,
        p=policy.p.tolist(),
        lam=policy.lam.tolist(),
        choices=[[int(c[0]), int(c[1])] if m else None for c, m in zip(out.choices, out.mask)],
        seeds=seeds,
        config_hash=ctx.config_hash,
        checksum=out.checksum(),
    )
    return out, record


def replay_record(record: ProvenanceRecord, samples: SampleSet, ctx: ManipulationContext) -> AugmentedBatch:
    if record.config_hash != ctx.config_hash:
        raise ReplayError("config_hash", f"log has {record.config_hash!r}, current configuration is {ctx.config_hash!r}")
    policy = record.policy
    ctx.check(policy)
    pos = {int(s): k for k, s in enumerate(samples.ids)}
    try:
        batch = samples.subset(np.array([pos[s] for s in record.sample_ids], dtype=np.int64))
    except KeyError as exc:
        raise ReplayError("sample_ids", f"unknown sample id {exc.args[0]}") from None
    selected = np.array([c is not None for c in record.choices])
    if selected.sum() != n_manipulated(policy.alpha, len(batch)):
        raise ReplayError("choices", f"{selected.sum()} samples marked but alpha={policy.alpha} implies {n_manipulated(policy.alpha, len(batch))}")
    out = _apply_plan(batch, policy, ctx, record.seeds, selected)
    for k, c in enumerate(record.choices):
        if c is not None and list(out.choices[k]) != list(c):
            raise ReplayError("choices", f"sample {record.sample_ids[k]} drew {list(out.choices[k])}, log says {c}")
    if out.checksum() != record.checksum:
        raise ReplayError("checksum", f"batch at step {record.step} does not match the recorded checksum")
    return out


def replay(records: Iterable[ProvenanceRecord], samples: SampleSet, ctx: ManipulationContext) -> list[AugmentedBatch]:
    """Regenerate every logged batch; raises :class:`ReplayError` on the first divergence."""
    return [replay_record(r, samples, ctx) for r in records]


# ---------------------------------------------------------------------------
# Weighted-sum augmentation for planner updates
# ---------------------------------------------------------------------------


def augment_variants(
    sample: ForecastSample,
    policy: ManipulationPolicy,
    ctx: ManipulationContext,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """All n*m variants of one sample, each combination applied unconditionally.

    The mix partner's random draw is shared by every variant with the same
    mix-up column, so the result is a deterministic function of ``lam``.
    """
    ctx.check(policy)
    n, m = policy.shape
    L, F = sample.window.shape
    vx = np.empty((n, m, L, F))
    vy = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            rng = np.random.default_rng(derive_seed(seed, i, j))
            prng = np.random.default_rng(derive_seed(seed, _PARTNER_SALT, j))
            vx[i, j], vy[i, j] = augment_one(
                sample.window, sample.target, sample.stock, sample.end, i, j, float(policy.lam[i, j]), ctx, rng, prng
            )
    return vx, vy


def blend_variants(p: np.ndarray, vx: np.ndarray, vy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """p-weighted sum over the leading (n, m) axes; works for one sample or a batch."""
    if vy.ndim == 2:
        return np.tensordot(p, vx, axes=([0, 1], [0, 1])), float(np.sum(p * vy))
    return np.einsum("ij,bijlf->blf", p, vx), np.einsum("ij,bij->b", p, vy)


def weighted_sum_augment(
    sample: ForecastSample,
    policy: ManipulationPolicy,
    ctx: ManipulationContext,
    seed: int,
) -> ForecastSample:
    vx, vy = augment_variants(sample, policy, ctx, seed)
    wx, wy = blend_variants(policy.p, vx, vy)
    return ForecastSample(wx, float(wy), sample.stock, sample.end)


# ---------------------------------------------------------------------------
# Log IO
# ---------------------------------------------------------------------------


def dumps_exact(obj) -> str:
    """JSON with floats written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError(f"cannot serialise non-finite number {v}")
        return format(v, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps_exact(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps_exact(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_provenance(records: Iterable[ProvenanceRecord], path: str | Path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_provenance(path: str | Path) -> list[ProvenanceRecord]:
    with open(path) as fh:
        return [ProvenanceRecord.from_json(line) for line in fh if line.strip()]
