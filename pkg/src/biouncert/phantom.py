"""Synthetic organ phantoms and stochastic segmenters.

Each sampler stands in for one family of Bayesian segmentation network and
draws N plausible masks for a phantom:

* ``mc-dropout``: independent voxel flips in a band around the surface.
* ``fully-bayesian``: reparameterised logits ``g = mu + eps * sigma``,
  thresholded at zero.
* ``probabilistic``: one latent vector per sample mapped to a global
  affine warp of the ellipsoid.
* ``hierarchical``: latent vectors at several scales (affine warp, regional
  bulges, local boundary jitter) composed.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    LIVER,
    Cohort,
    ConfidenceKind,
    LabelVolume,
    SampleStack,
    SubjectRecord,
    rng_for,
)

SIM_DIMS = (24, 40, 40)
SIM_SPACING = (3.0, 2.0, 2.0)
# rz : ry : rx of the base organ shape
ORGAN_ASPECT = (0.75, 1.1, 1.2)


class SamplerKind(str, enum.Enum):
    MC_DROPOUT = "mc-dropout"
    FULLY_BAYESIAN = "fully-bayesian"
    PROBABILISTIC = "probabilistic"
    HIERARCHICAL = "hierarchical"


@dataclass(frozen=True, eq=False)
class Phantom:
    truth: LabelVolume
    center_vox: tuple[float, float, float]
    radii_vox: tuple[float, float, float]
    organ_label: int = LIVER


@dataclass(frozen=True, eq=False)
class LogitField:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must share a shape")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be finite")
        if np.any(self.sigma < 0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and nonnegative")


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind = SamplerKind.MC_DROPOUT
    n_samples: int = 10
    seed: int = 0
    dropout_rate: float = 0.2
    noise_std: float = 0.1
    latent_dim: int = 12
    latent_std: float = 1.0
    n_scales: int = 3
    boundary_band_vox: float = 2.0
    # logit slope per mm of signed distance, and width of the sigma band (voxels)
    sharpness: float = 0.05
    noise_band_vox: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.latent_std < 0:
            raise ValueError("latent_std must be nonnegative")
        if self.n_scales < 1:
            raise ValueError("n_scales must be at least 1")
        if self.boundary_band_vox < 0:
            raise ValueError("boundary_band_vox must be nonnegative")
        if not self.sharpness > 0 or not self.noise_band_vox > 0:
            raise ValueError("sharpness and noise_band_vox must be positive")

    @property
    def knob(self) -> float:
        """The parameter that controls how stochastic this sampler is."""
        return {
            SamplerKind.MC_DROPOUT: self.dropout_rate,
            SamplerKind.FULLY_BAYESIAN: self.noise_std,
        }.get(self.kind, self.latent_std)

    def with_knob(self, value: float) -> "SamplerConfig":
        if self.kind is SamplerKind.MC_DROPOUT:
            return replace(self, dropout_rate=min(value, 0.49))
        if self.kind is SamplerKind.FULLY_BAYESIAN:
            return replace(self, noise_std=value)
        return replace(self, latent_std=value)


# --- geometry -------------------------------------------------------------


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")


def make_phantom(dims, spacing, center, radii, organ_label: int = LIVER) -> Phantom:
    """Rasterise an axis-aligned ellipsoid; voxel centres with sum(((p-c)/r)^2) <= 1 are organ."""
    dims = tuple(int(d) for d in dims)
    center = tuple(float(c) for c in center)
    radii = tuple(float(r) for r in radii)
    if any(r <= 0 for r in radii):
        raise ValueError(f"radii must be positive, got {radii}")
    for c, r, n in zip(center, radii, dims):
        if c - r < -0.5 or c + r > n - 0.5:
            raise ValueError(f"ellipsoid (center {center}, radii {radii}) does not fit in grid {dims}")
    q2 = _normalized_radius_sq(dims, center, radii)
    truth = LabelVolume.from_mask(q2 <= 1.0, spacing, organ_label)
    return Phantom(truth, center, radii, organ_label)


def _normalized_radius_sq(dims, center, radii):
    z, y, x = _grid(dims)
    return ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2


def signed_distance_mm(phantom: Phantom) -> np.ndarray:
    """Radial signed distance to the ellipsoid surface in mm, positive inside.

    Measured along the ray from the centre through each voxel centre, so it
    is exactly zero on the surface and grows linearly along every such ray.
    """
    dims = phantom.truth.dims
    spacing = np.array(phantom.truth.spacing_mm)
    grid = _grid(dims)
    offsets = [g - c for g, c in zip(grid, phantom.center_vox)]
    q = np.sqrt(sum((o / r) ** 2 for o, r in zip(offsets, phantom.radii_vox)))
    dist_mm = np.sqrt(sum((o * s) ** 2 for o, s in zip(offsets, spacing)))
    # ellipsoid radius (mm) along each voxel's direction; at the centre use the shortest axis
    with np.errstate(invalid="ignore", divide="ignore"):
        radius_mm = np.where(q > 0, dist_mm / q, min(r * s for r, s in zip(phantom.radii_vox, spacing)))
    return (1.0 - q) * radius_mm


def phantom_logits(phantom: Phantom, sharpness: float = 0.05, noise_band: float = 2.0) -> LogitField:
    """Logit mean ``sharpness * d`` and a Gaussian sigma band around the surface.

    ``noise_band`` is in voxels of the finest spacing; sigma is 1 on the
    surface and about 0.011 at ``noise_band`` voxels away.
    """
    if not sharpness > 0:
        raise ValueError("sharpness must be positive")
    if not noise_band > 0:
        raise ValueError("noise_band must be positive")
    d = signed_distance_mm(phantom)
    band_mm = noise_band * min(phantom.truth.spacing_mm)
    sigma = np.exp(-0.5 * (3.0 * d / band_mm) ** 2)
    return LogitField(mu=sharpness * d, sigma=sigma)


# --- samplers ----------------------------------------------------------------


def reparam_draws(field: LogitField, noise_std: float, rng: np.random.Generator, n_draws: int | None = None) -> np.ndarray:
    """Realisations of ``g = mu + eps * sigma``, ``eps ~ N(0, noise_std)`` i.i.d. per voxel.

    With ``n_draws`` the result gains a leading axis of independent draws.
    """
    if not noise_std > 0:
        raise ValueError("noise_std must be positive")
    shape = field.mu.shape if n_draws is None else (n_draws, *field.mu.shape)
    return field.mu + rng.normal(0.0, noise_std, size=shape) * field.sigma


def sample_reparam(
    field: LogitField,
    noise_std: float = 0.1,
    seed: int = 0,
    spacing=SIM_SPACING,
    organ_label: int = LIVER,
) -> LabelVolume:
    """One thresholded draw: voxels with ``g > 0`` are organ."""
    g = reparam_draws(field, noise_std, rng_for(seed))
    return LabelVolume.from_mask(g > 0, spacing, organ_label)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azimuth = math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(polar), np.sin(polar) * np.sin(azimuth), np.sin(polar) * np.cos(azimuth)], axis=1)


def _latent_to_affine(z: np.ndarray, latent_dim: int) -> np.ndarray:
    """Map a latent vector to 12 affine parameters (3x3 linear part + shift)."""
    if latent_dim == 12:
        return z
    # fixed projection with unit-norm rows keeps each parameter's variance independent of latent_dim
    w = rng_for(0xAFF1E, latent_dim).normal(size=(12, latent_dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return w @ z


class _Warper:
    """Level set of the phantom under latent-driven deformations."""

    LINEAR_SCALE = 0.025
    SHIFT_VOX = 0.5

    def __init__(self, phantom: Phantom, cfg: SamplerConfig):
        self.cfg = cfg
        self.center = np.array(phantom.center_vox)
        self.radii = np.array(phantom.radii_vox)
        grid = _grid(phantom.truth.dims)
        self.offsets = np.stack([g - c for g, c in zip(grid, self.center)], axis=-1)
        self.bump_dirs = _fibonacci_sphere(cfg.latent_dim)

    def affine_q2(self, z: np.ndarray, strength: float = 1.0) -> np.ndarray:
        params = _latent_to_affine(z, self.cfg.latent_dim) * strength
        lin = np.eye(3) + self.LINEAR_SCALE * params[:9].reshape(3, 3)
        shift = self.SHIFT_VOX * params[9:]
        # voxel p is organ if the pre-image A^-1 (p - c - t) lies in the reference ellipsoid
        pre = (self.offsets - shift) @ np.linalg.inv(lin).T
        return np.sum((pre / self.radii) ** 2, axis=-1), pre

    def bulges(self, pre: np.ndarray, z: np.ndarray, width: float, amplitude: float) -> np.ndarray:
        """Relative radial displacement of the surface from latent-weighted bumps."""
        u = pre / self.radii
        norm = np.linalg.norm(u, axis=-1, keepdims=True)
        direction = np.divide(u, norm, out=np.zeros_like(u), where=norm > 0)
        out = np.zeros(pre.shape[:-1])
        for d, a in zip(self.bump_dirs, amplitude * z):
            chord2 = np.sum((direction - d) ** 2, axis=-1)
            out += a * np.exp(-chord2 / (2 * width**2))
        return out


def _probabilistic_mask(warper: _Warper, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(0.0, 1.0, warper.cfg.latent_dim) * warper.cfg.latent_std
    q2, _ = warper.affine_q2(z)
    return q2 <= 1.0


def _hierarchical_mask(warper: _Warper, rng: np.random.Generator) -> np.ndarray:
    cfg = warper.cfg
    zs = rng.normal(0.0, 1.0, (cfg.n_scales, cfg.latent_dim)) * cfg.latent_std
    q2, pre = warper.affine_q2(zs[0], strength=0.6)
    levels = range(1, cfg.n_scales)
    amplitudes = [0.03 / level for level in levels]
    # bumps are bounded by sum |a|, so only a shell around the surface can change
    reach = sum(a * float(np.abs(zs[level]).sum()) for a, level in zip(amplitudes, levels))
    q = np.sqrt(q2)
    shell = np.abs(q - 1.0) <= reach
    radius = np.ones(int(shell.sum()))
    for amplitude, level in zip(amplitudes, levels):
        # regional bulges first, then progressively finer boundary jitter
        width = 0.6 / 2 ** (level - 1)
        radius += warper.bulges(pre[shell], zs[level], width, amplitude)
    mask = q <= 1.0
    mask[shell] = q[shell] <= np.maximum(radius, 0.0)
    return mask


def _band_mask(phantom: Phantom, band_vox: float) -> np.ndarray:
    d = signed_distance_mm(phantom)
    return np.abs(d) <= band_vox * min(phantom.truth.spacing_mm)


def sample_stack(phantom: Phantom, cfg: SamplerConfig, subject_id: str = "s0", subject_index: int = 0) -> SampleStack:
    """Draw ``cfg.n_samples`` masks; sample k uses stream ``(cfg.seed, subject_index, k)``."""
    truth = phantom.truth.mask(phantom.organ_label)
    kind = cfg.kind
    if kind is SamplerKind.MC_DROPOUT:
        band = _band_mask(phantom, cfg.boundary_band_vox)
    elif kind is SamplerKind.FULLY_BAYESIAN:
        field = phantom_logits(phantom, cfg.sharpness, cfg.noise_band_vox)
    else:
        warper = _Warper(phantom, cfg)

    masks = []
    for k in range(cfg.n_samples):
        rng = rng_for(cfg.seed, subject_index, k)
        if kind is SamplerKind.MC_DROPOUT:
            flips = band & (rng.random(truth.shape) < cfg.dropout_rate)
            mask = truth ^ flips
        elif kind is SamplerKind.FULLY_BAYESIAN:
            mask = reparam_draws(field, cfg.noise_std, rng) > 0
        elif kind is SamplerKind.PROBABILISTIC:
            mask = _probabilistic_mask(warper, rng)
        else:
            mask = _hierarchical_mask(warper, rng)
        masks.append(LabelVolume.from_mask(mask, phantom.truth.spacing_mm, phantom.organ_label))
    return SampleStack(subject_id, tuple(masks), phantom.organ_label)


# --- cohort simulation -------------------------------------------------------


@dataclass(frozen=True)
class EffectSpec:
    """Planted linear volume model on standardized age/BMI, raw sex/diabetes.

    Volumes are in mm^3. ``difficulty_sd`` spreads each subject's sampler
    knob by a log-normal factor, and ``diabetic_difficulty`` multiplies it
    further for diabetic subjects, so segmentation confidence can differ
    between groups.
    """

    intercept: float = 60000.0
    age: float = -1500.0
    sex: float = 4000.0
    bmi: float = 3000.0
    diabetes: float = 6000.0
    noise_sd: float = 4000.0
    age_mean: float = 55.0
    age_sd: float = 10.0
    bmi_mean: float = 27.0
    bmi_sd: float = 4.0
    difficulty_sd: float = 0.3
    diabetic_difficulty: float = 1.5

    @property
    def betas(self) -> dict[str, float]:
        return {
            "beta_0": self.intercept,
            "beta_1": self.age,
            "beta_2": self.sex,
            "beta_3": self.bmi,
            "beta_4": self.diabetes,
        }


@dataclass(frozen=True)
class SimulatedCohort:
    stacks: tuple[SampleStack, ...]
    cohort: Cohort
    phantoms: tuple[Phantom, ...]
    planted: dict = field(default_factory=dict)


def radii_for_volume(volume_mm3: float, spacing, aspect=ORGAN_ASPECT) -> tuple[float, float, float]:
    """Ellipsoid radii (voxels) with the given aspect and analytic volume."""
    if not volume_mm3 > 0:
        raise ValueError(f"volume must be positive, got {volume_mm3}")
    voxels = volume_mm3 / float(np.prod(spacing))
    scale = (3.0 * voxels / (4.0 * math.pi * float(np.prod(aspect)))) ** (1.0 / 3.0)
    return tuple(scale * a for a in aspect)


def simulate_cohort(
    n_subjects: int,
    diabetic_fraction: float,
    effect_spec: EffectSpec,
    cfg: SamplerConfig,
    seed: int,
    *,
    dims=SIM_DIMS,
    spacing=SIM_SPACING,
    jobs: int = 1,
) -> SimulatedCohort:
    """Draw covariates, plant volumes via the linear model, and sample a stack per subject.

    Covariates and planted volumes depend only on ``seed``, never on the
    sampler, so different samplers can be compared on the same subjects.
    Sampling noise uses ``cfg.seed``.
    """
    if n_subjects < 10:
        raise ValueError("n_subjects must be at least 10")
    if not 0 < diabetic_fraction < 1:
        raise ValueError("diabetic_fraction must lie in (0, 1)")
    rng = rng_for(seed)
    n_diabetic = int(round(n_subjects * diabetic_fraction))
    diabetes = np.zeros(n_subjects, dtype=int)
    diabetes[:n_diabetic] = 1
    rng.shuffle(diabetes)
    age = rng.normal(effect_spec.age_mean, effect_spec.age_sd, n_subjects)
    sex = rng.integers(0, 2, n_subjects)
    bmi = rng.normal(effect_spec.bmi_mean, effect_spec.bmi_sd, n_subjects)
    noise = rng.normal(0.0, effect_spec.noise_sd, n_subjects) if effect_spec.noise_sd > 0 else np.zeros(n_subjects)
    difficulty = np.exp(rng.normal(0.0, effect_spec.difficulty_sd, n_subjects)) if effect_spec.difficulty_sd > 0 else np.ones(n_subjects)
    difficulty = difficulty * np.where(diabetes == 1, effect_spec.diabetic_difficulty, 1.0)

    planted = (
        effect_spec.intercept
        + effect_spec.age * (age - effect_spec.age_mean) / effect_spec.age_sd
        + effect_spec.sex * sex
        + effect_spec.bmi * (bmi - effect_spec.bmi_mean) / effect_spec.bmi_sd
        + effect_spec.diabetes * diabetes
        + noise
    )
    if np.any(planted <= 0):
        raise ValueError("effect spec implies nonpositive organ volumes")
    center = tuple((n - 1) / 2 for n in dims)
    width = len(str(n_subjects - 1))
    ids = [f"s{i:0{width}d}" for i in range(n_subjects)]

    def one(i):
        phantom = make_phantom(dims, spacing, center, radii_for_volume(planted[i], spacing), LIVER)
        subject_cfg = cfg.with_knob(cfg.knob * difficulty[i])
        return phantom, sample_stack(phantom, subject_cfg, ids[i], i)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(n_subjects)))
    else:
        results = [one(i) for i in range(n_subjects)]
    phantoms = tuple(p for p, _ in results)
    stacks = tuple(s for _, s in results)

    records = []
    for i, ph in enumerate(phantoms):
        true_volume = int(np.count_nonzero(ph.truth.labels)) * ph.truth.voxel_volume_mm3
        records.append(
            SubjectRecord(
                subject_id=ids[i],
                age_years=float(age[i]),
                sex=int(sex[i]),
                bmi=float(bmi[i]),
                diabetes=int(diabetes[i]),
                volume_mm3=true_volume,
                confidence=1.0,
                confidence_kind=ConfidenceKind.IOU,
                extras={"true_volume_mm3": true_volume, "planted_volume_mm3": float(planted[i])},
            )
        )
    truth = {
        "seed": int(seed),
        "n_subjects": int(n_subjects),
        "n_diabetic": int(n_diabetic),
        "sampler": cfg.kind.value,
        "betas_mm3": effect_spec.betas,
        "noise_sd": effect_spec.noise_sd,
        "covariate_standardization": {
            "age": [effect_spec.age_mean, effect_spec.age_sd],
            "bmi": [effect_spec.bmi_mean, effect_spec.bmi_sd],
        },
        "planted_volume_mm3": {sid: float(v) for sid, v in zip(ids, planted)},
    }
    return SimulatedCohort(stacks, Cohort(tuple(records)), phantoms, truth)
