"""Differentiable toy generator with ground-truth warps.

The generator decodes a latent vector into an image of a textured sprite over
a procedural background. The latent splits into contiguous per-layer blocks;
the first half of the layers controls pose (a similarity transform plus a
small smooth articulation field) and the second half controls appearance
(sprite palette and background pattern). Geometry depends only on the pose
half and coloring only on the appearance half, exactly.

Because the image is produced by bilinearly resampling a canonical scene, the
exact reverse-sampling grid is available for every sample, which gives
ground-truth dense correspondence between any two generated images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import warp


@dataclass(frozen=True)
class LatentBasis:
    """Empirical mean plus orthonormal principal directions of a latent pool."""

    mean: torch.Tensor        # (D,)
    directions: torch.Tensor  # (D, D), rows orthonormal, by decreasing variance
    eigenvalues: torch.Tensor  # (D,), nonincreasing, >= 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def project(self, latent: torch.Tensor, n: int) -> torch.Tensor:
        """Coefficients of (latent - mean) on the first n directions."""
        return (latent - self.mean) @ self.directions[:n].T


@dataclass
class TargetLatent:
    """Learned latent parameterized as mean + sum of coefficient * direction."""

    basis: LatentBasis
    coefficients: torch.Tensor  # (N,), the learnable degrees of freedom

    def __post_init__(self):
        if self.coefficients.ndim != 1:
            raise ValueError("coefficients must be a 1-D tensor")
        if self.coefficients.shape[0] > self.basis.dim:
            raise ValueError("more coefficients than basis directions")

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]

    def materialize(self) -> torch.Tensor:
        if self.n == 0:
            return self.basis.mean
        return self.basis.mean + self.coefficients @ self.basis.directions[: self.n]


@dataclass(frozen=True)
class MixedLatent:
    """Latent whose layers before `cutoff` read the pose source and the rest
    read the appearance source."""

    pose_source: object       # (D,) tensor or TargetLatent
    appearance_source: torch.Tensor  # (D,)
    cutoff: int


def mix(pose, appearance: torch.Tensor, cutoff: int, layers: int) -> MixedLatent:
    """Style-mixing latent: first `cutoff` of `layers` blocks from `pose`."""
    if not 0 <= cutoff <= layers:
        raise ValueError(f"cutoff must be in [0, {layers}], got {cutoff}")
    return MixedLatent(pose, appearance, cutoff)


def fit_pca(pool: torch.Tensor) -> LatentBasis:
    """Principal directions of a latent pool (rows), via covariance eigensolve.

    Directions are sign-fixed so each one's largest-magnitude entry is positive.
    """
    if pool.ndim != 2 or pool.shape[0] < 2:
        raise ValueError("PCA pool must be (n >= 2, D)")
    x = pool.double()
    mean = x.mean(dim=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = torch.linalg.eigh(cov)
    order = torch.argsort(eigvals, descending=True)
    eigvals = eigvals[order].clamp_min(0.0)
    directions = eigvecs.T[order]
    lead = directions.gather(1, directions.abs().argmax(dim=1, keepdim=True))
    directions = directions * torch.sign(lead)
    dtype = pool.dtype
    return LatentBasis(mean.to(dtype), directions.to(dtype), eigvals.to(dtype))


@dataclass(frozen=True)
class ToyGeneratorConfig:
    dim: int = 512
    layers: int = 8
    resolution: int = 64
    seed: int = 0
    rotation_range: float = math.pi / 4
    log_scale_range: float = math.log(1.6)
    shift_range: float = 0.5
    articulation_amplitude: float = 0.1
    articulation_count: int = 4

    def __post_init__(self):
        if self.dim % self.layers:
            raise ValueError("latent dim must divide evenly into layers")
        if self.layers % 2:
            raise ValueError("layer count must be even (half pose, half appearance)")


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((dim, count))
    q, _ = np.linalg.qr(m)
    return q.T[:count]


class ToyGenerator:
    """Procedural sprite generator; pure and immutable after construction."""

    def __init__(self, config: ToyGeneratorConfig | None = None, **overrides):
        if config is None:
            config = ToyGeneratorConfig(**overrides)
        elif overrides:
            raise ValueError("pass either a config or keyword overrides, not both")
        self.config = config
        self.dim = config.dim
        self.layers = config.layers
        self.block = config.dim // config.layers
        self.pose_dims = self.block * (config.layers // 2)
        self.resolution = config.resolution

        rng = np.random.default_rng(config.seed)
        n_pose = 4 + config.articulation_count
        self._pose_proj = torch.tensor(
            _orthonormal_rows(rng, n_pose, self.pose_dims), dtype=torch.float64)
        self._app_proj = torch.tensor(
            _orthonormal_rows(rng, 8, self.dim - self.pose_dims), dtype=torch.float64)
        self._cache = {}

    # ------------------------------------------------------------------
    # latents
    # ------------------------------------------------------------------

    def sample_latent(self, rng_seed: int) -> torch.Tensor:
        """Standard-normal latent, deterministic in the seed."""
        rng = np.random.default_rng(rng_seed)
        return torch.tensor(rng.standard_normal(self.dim), dtype=torch.float32)

    def sample_latents(self, rng: np.random.Generator, count: int) -> torch.Tensor:
        return torch.tensor(rng.standard_normal((count, self.dim)), dtype=torch.float32)

    def flatten_latent(self, latent) -> torch.Tensor:
        """Resolve a tensor / TargetLatent / MixedLatent to a flat (D,) vector."""
        if isinstance(latent, TargetLatent):
            return latent.materialize()
        if isinstance(latent, MixedLatent):
            pose = self.flatten_latent(latent.pose_source)
            app = latent.appearance_source
            split = latent.cutoff * self.block
            return torch.cat([pose[:split], app[split:]])
        latent = torch.as_tensor(latent)
        if latent.shape != (self.dim,):
            raise ValueError(f"latent must have shape ({self.dim},)")
        return latent

    def flatten_batch(self, latents) -> torch.Tensor:
        if isinstance(latents, torch.Tensor) and latents.ndim == 2:
            return latents
        return torch.stack([self.flatten_latent(l) for l in latents])

    def pose_latent(self, rotation=0.0, scale=1.0, shift=(0.0, 0.0),
                    articulation=None) -> torch.Tensor:
        """Latent whose pose half decodes to the given parameters exactly
        (appearance half zero). Inverse of the pose decoder; test plumbing."""
        cfg = self.config

        def inv(value, rng_):
            t = value / rng_
            if not -1 < t < 1:
                raise ValueError(f"pose parameter {value} outside decodable range")
            return math.atanh(t)

        z = [inv(rotation, cfg.rotation_range),
             inv(math.log(scale), cfg.log_scale_range),
             inv(shift[0], cfg.shift_range),
             inv(shift[1], cfg.shift_range)]
        art = articulation if articulation is not None else [0.0] * cfg.articulation_count
        per = cfg.articulation_amplitude / cfg.articulation_count
        z.extend(inv(a, per) for a in art)
        pose = torch.tensor(np.array(z) @ self._pose_proj.numpy(), dtype=torch.float32)
        out = torch.zeros(self.dim)
        out[: self.pose_dims] = pose
        return out

    # ------------------------------------------------------------------
    # decoding
    # ------------------------------------------------------------------

    def _decode_pose(self, flat: torch.Tensor):
        """(N, D) -> similarity matrices (N, 3, 3) + articulation coeffs (N, A)."""
        cfg = self.config
        pose = flat[:, : self.pose_dims]
        z = pose @ self._pose_proj.T.to(flat.dtype)
        r = cfg.rotation_range * torch.tanh(z[:, 0])
        s = torch.exp(cfg.log_scale_range * torch.tanh(z[:, 1]))
        tx = cfg.shift_range * torch.tanh(z[:, 2])
        ty = cfg.shift_range * torch.tanh(z[:, 3])
        cos, sin = torch.cos(r), torch.sin(r)
        zero, one = torch.zeros_like(r), torch.ones_like(r)
        m = torch.stack([s * cos, -s * sin, tx,
                         s * sin, s * cos, ty,
                         zero, zero, one], dim=-1).reshape(-1, 3, 3)
        per = cfg.articulation_amplitude / cfg.articulation_count
        art = per * torch.tanh(z[:, 4:4 + cfg.articulation_count])
        return m, art

    def _decode_appearance(self, flat: torch.Tensor):
        q = flat[:, self.pose_dims:] @ self._app_proj.T.to(flat.dtype)
        return {
            "bg_phase": math.pi * torch.tanh(q[:, 0]),
            "bg_angle": 0.5 * math.pi * torch.tanh(q[:, 1]),
            "bg_shift": 0.18 * torch.tanh(q[:, 2:5]),
            "pal_shift": 0.25 * torch.tanh(q[:, 5:8]),
        }

    def _lattice(self, dtype):
        key = ("lat", dtype)
        if key not in self._cache:
            n = self.resolution
            ident = warp.identity_grid(n, n, dtype=dtype)
            x = ident.coords[..., 0]
            y = ident.coords[..., 1]
            art = torch.stack([
                torch.stack([torch.sin(2.2 * y + 0.4) * torch.cos(1.1 * x),
                             torch.zeros_like(x)], dim=-1),
                torch.stack([torch.zeros_like(x),
                             torch.sin(2.2 * x - 0.3) * torch.cos(1.1 * y)], dim=-1),
                torch.stack([torch.sin(1.3 * x) * torch.sin(1.7 * y),
                             torch.cos(1.3 * x) * torch.sin(1.1 * y)], dim=-1),
                torch.stack([torch.cos(1.9 * y) * torch.sin(0.7 * x),
                             torch.sin(1.9 * x) * torch.cos(0.8 * y)], dim=-1),
            ])[: self.config.articulation_count]

            blob = (torch.exp(-(x ** 2 / 0.30 + (y - 0.05) ** 2 / 0.16))
                    + 0.9 * torch.exp(-((x - 0.38) ** 2 + (y + 0.18) ** 2) / 0.055)
                    + 0.55 * torch.exp(-((x - 0.50) ** 2 + (y + 0.40) ** 2) / 0.012)
                    + 0.6 * torch.exp(-((x + 0.45) ** 2 / 0.045 + (y - 0.28) ** 2 / 0.012)))
            alpha = torch.sigmoid(9.0 * (blob - 0.32))
            stripes = 0.5 + 0.5 * torch.sin(4.3 * x - 2.6 * y + 1.1)
            rings = 0.5 + 0.5 * torch.cos(5.1 * ((x - 0.1) ** 2 + (y + 0.05) ** 2))
            texture = 0.6 * stripes + 0.4 * rings
            eye = 0.9 * torch.exp(-((x - 0.42) ** 2 + (y + 0.22) ** 2) / 0.006)
            self._cache[key] = {
                "ident": ident.coords, "x": x, "y": y, "art": art,
                "alpha": alpha.unsqueeze(-1), "texture": texture.unsqueeze(-1),
                "eye": eye.unsqueeze(-1),
            }
        return self._cache[key]

    # ------------------------------------------------------------------
    # rendering
    # ------------------------------------------------------------------

    def ground_truth_grids(self, latents) -> torch.Tensor:
        """Exact reverse-sampling grids (N, H, W, 2) used to render the batch."""
        flat = self.flatten_batch(latents)
        self._check_finite(flat)
        lat = self._lattice(flat.dtype)
        m, art = self._decode_pose(flat)
        p = lat["ident"]
        x, y = p[..., 0], p[..., 1]
        base = torch.stack([
            m[:, 0, 0, None, None] * x + m[:, 0, 1, None, None] * y + m[:, 0, 2, None, None],
            m[:, 1, 0, None, None] * x + m[:, 1, 1, None, None] * y + m[:, 1, 2, None, None],
        ], dim=-1)
        disp = torch.einsum("na,ahwc->nhwc", art, lat["art"].to(flat.dtype))
        return base + disp

    def ground_truth_grid(self, latent) -> warp.SamplingGrid:
        """The exact grid behind synthesize(latent)."""
        return warp.SamplingGrid(self.ground_truth_grids([latent])[0])

    def canonical_scenes(self, latents) -> torch.Tensor:
        """Unwarped sprite-over-background scenes (N, H, W, 3), values in [-1, 1]."""
        flat = self.flatten_batch(latents)
        self._check_finite(flat)
        lat = self._lattice(flat.dtype)
        app = self._decode_appearance(flat)
        x, y = lat["x"], lat["y"]

        angle = app["bg_angle"][:, None, None]
        phase = app["bg_phase"][:, None, None]
        wave = torch.sin(2.6 * (x * torch.cos(angle) + y * torch.sin(angle)) + phase)
        bg_dir = torch.tensor([0.5, 0.7, 1.0], dtype=flat.dtype)
        bg_base = torch.tensor([-0.45, -0.25, 0.05], dtype=flat.dtype)
        bg = (bg_base + app["bg_shift"][:, None, None, :]
              + 0.18 * wave.unsqueeze(-1) * bg_dir + 0.08 * y.unsqueeze(-1))

        pal_a = torch.tensor([0.62, 0.18, -0.32], dtype=flat.dtype) \
            + app["pal_shift"][:, None, None, :]
        pal_b = torch.tensor([-0.12, -0.42, 0.24], dtype=flat.dtype) \
            - app["pal_shift"][:, None, None, :]
        t = lat["texture"]
        sprite = pal_a * t + pal_b * (1.0 - t)
        eye_color = torch.tensor([-0.85, -0.85, -0.8], dtype=flat.dtype)
        e = lat["eye"]
        sprite = sprite * (1.0 - e) + eye_color * e

        alpha = lat["alpha"]
        return alpha * sprite + (1.0 - alpha) * bg

    def canonical_scene(self, latent) -> torch.Tensor:
        return self.canonical_scenes([latent])[0]

    def synthesize_batch(self, latents) -> torch.Tensor:
        flat = self.flatten_batch(latents)
        scenes = self.canonical_scenes(flat)
        grids = self.ground_truth_grids(flat)
        return warp.sample_batch(scenes, grids, "reflection")

    def synthesize(self, latent) -> torch.Tensor:
        """Render one latent to an (H, W, 3) image in [-1, 1]."""
        return self.synthesize_batch([latent])[0]

    def silhouettes(self, latents) -> torch.Tensor:
        """Warped sprite alpha masks (N, H, W, 1); depend only on the pose half."""
        flat = self.flatten_batch(latents)
        self._check_finite(flat)
        alpha = self._lattice(flat.dtype)["alpha"].unsqueeze(0).expand(
            flat.shape[0], -1, -1, -1)
        grids = self.ground_truth_grids(flat)
        return warp.sample_batch(alpha, grids, "reflection")

    def silhouette(self, latent) -> torch.Tensor:
        return self.silhouettes([latent])[0]

    @staticmethod
    def _check_finite(flat: torch.Tensor):
        if not torch.isfinite(flat).all():
            raise ValueError("latent entries must be finite")
