from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class TrainConfig:
    phase1_iters: int = 30000
    phase2_iters: int = 7000
    lambda_ssim: float = 0.2
    lambda_s: float = 0.1
    lambda_c: float = 0.05
    gamma: float = 0.3
    tau: float = 0.1
    knn_k: int = 5
    t_frac: float = 0.001
    sparse_loss_every: int = 10
    recluster_every: int = 500
    lr_gauss: float = 0.0025
    lr_head: float = 0.0001
    pos_sim_threshold: float = 0.9
    feature_dim: int = 128
    min_mask_area: int = 16
    group_samples: int = 256
    # the instance-level target needs this many groups; a lone group would pull every object toward one class
    min_instance_groups: int = 2
    # phase-1 learning rate of each Gaussian attribute, as a multiple of lr_gauss
    lr_scale_position: float = 0.1
    lr_scale_rotation: float = 0.4
    lr_scale_scale: float = 2.0
    lr_scale_opacity: float = 10.0
    lr_scale_color: float = 1.0
    seed: int = 42

    def __post_init__(self):
        for name in ("phase1_iters", "phase2_iters", "sparse_loss_every", "recluster_every", "knn_k", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("lambda_ssim", "lambda_s", "lambda_c", "gamma", "t_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_ssim > 1:
            raise ValueError("lambda_ssim must be <= 1")

    def sample_count(self, n: int) -> int:
        """Number of Gaussians sampled by the smoothing loss."""
        return min(n, max(1, round(self.t_frac * n)))

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]
