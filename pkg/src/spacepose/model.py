"""Recurrent convolutional pose network: trunk, recurrent stack and per-stage heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spacepose import geometry as geo
from spacepose.backbone import Backbone, BackboneConfig
from spacepose.diff import ops
from spacepose.diff.node import Node, detach
from spacepose.diff.rng import Rng
from spacepose.errors import ConfigError
from spacepose.nn import Module
from spacepose.recurrent import RecurrentStack, RecurrentState, ZoneoutConfig, stacked_forward

TRUNK_PREFIXES = ("backbone.", "recurrent.")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hidden: int = 128
    layers: int = 2
    grid: geo.ViewsphereGrid = field(default_factory=geo.ViewsphereGrid)
    cnn_only: bool = False
    zoneout: ZoneoutConfig = field(default_factory=ZoneoutConfig)


class Head(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype, std: float = 0.01):
        super().__init__()
        self.weight = self.param("weight", rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype))
        self.bias = self.param("bias", np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Node) -> Node:
        return ops.linear(x, self.weight, self.bias)


class PoseNet(Module):
    """Shared trunk with classification heads (stage 1) and 6D/position regression heads (stages 2-3).

    Stage 1 reads the pooled features directly. Stages 2-3 read the recurrent
    output, or the pooled features when ``cnn_only`` is set.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg, self.dtype = cfg, dtype
        self.intrinsics = None   # set by training; evaluation warns on a mismatch
        rng = Rng(seed)
        c = cfg.backbone.out_channels
        self.backbone = self.child("backbone", Backbone(cfg.backbone, rng.child(1), dtype))
        self.recurrent = self.child("recurrent", RecurrentStack(c, cfg.hidden, cfg.layers, rng.child(2), dtype))
        self.cls_head = self.child("s1_cls", Head(c, cfg.grid.num_classes, rng.child(3), dtype))
        self.pos1_head = self.child("s1_pos", Head(c, 3, rng.child(4), dtype))
        d_seq = c if cfg.cnn_only else cfg.hidden
        self.att_head = self.child("seq_att", Head(d_seq, 6, rng.child(5), dtype))
        self.pos_head = self.child("seq_pos", Head(d_seq, 3, rng.child(6), dtype))
        zeros = np.zeros(1, dtype=dtype)
        self.log_sigma = {name: self.param(f"log_sigma_{name}", zeros.copy()) for name in ("a", "t1", "r", "t2")}

    # -------------------------------------------------------------- parameter groups

    def trunk_parameters(self) -> dict[str, Node]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("backbone.")}

    def stage_parameters(self, stage: int, freeze_trunk: bool = False) -> dict[str, Node]:
        params = self.named_parameters()
        if stage == 1:
            keep = ("backbone.", "s1_cls.", "s1_pos.", "log_sigma_a", "log_sigma_t1")
        elif stage == 2:
            keep = ("backbone.", "recurrent.", "seq_att.", "seq_pos.", "log_sigma_r", "log_sigma_t2")
        elif stage == 3:
            keep = ("backbone.", "recurrent.", "seq_att.", "seq_pos.")
        else:
            raise ConfigError(f"unknown stage {stage}")
        if self.cfg.cnn_only:
            keep = tuple(k for k in keep if k != "recurrent.")
        if freeze_trunk:
            keep = tuple(k for k in keep if k != "backbone.")
        return {k: v for k, v in params.items() if k.startswith(keep)}

    def init_position_bias(self, mean_t) -> None:
        self.pos1_head.bias.value[...] = mean_t
        self.pos_head.bias.value[...] = mean_t

    def init_attitude_bias(self, mean_r6) -> None:
        self.att_head.bias.value[...] = mean_r6

    # -------------------------------------------------------------- forward passes

    def pooled(self, images, train: bool, rng=None, freeze_trunk: bool = False, dropout: float | None = None,
               batch_stats: bool | None = None) -> Node:
        # RGBT data feeds RGB-only models through their first channels.
        images = np.asarray(images)[:, :self.cfg.backbone.in_channels]
        if freeze_trunk:
            return detach(self.backbone(images, False).pooled)
        return self.backbone(images, train, rng, dropout, batch_stats).pooled

    def stage1(self, images, train: bool, rng=None, dropout: float | None = None) -> tuple[Node, Node]:
        feats = self.pooled(images, train, rng, dropout=dropout)
        return self.cls_head(feats), self.pos1_head(feats)

    def sequence(self, frames, state: RecurrentState | None, train: bool, rng=None, freeze_trunk: bool = False,
                 export_step: int | None = None, dropout: float | None = None,
                 zoneout: ZoneoutConfig | None = None, batch_stats: bool | None = None):
        """Run a window of frames [T, N, C, H, W] in time order.

        Returns (r_hat [T*N, 6], t_hat [T*N, 3], final state, exported state)
        with rows ordered time-major. In ``cnn_only`` mode states are passed through untouched.
        ``dropout``, ``zoneout`` and ``batch_stats`` override the configured behaviour for this call.
        """
        frames = np.asarray(frames)
        if frames.ndim != 5:
            raise ConfigError(f"expected [T, N, C, H, W] frames, got {frames.shape}")
        t_len, n = frames.shape[:2]
        feats = self.pooled(frames.reshape(t_len * n, *frames.shape[2:]), train, rng, freeze_trunk, dropout,
                            batch_stats)
        if self.cfg.cnn_only:
            return self.att_head(feats), self.pos_head(feats), state, state
        if state is None:
            state = self.recurrent.zero_state(n, self.dtype)
        steps = [feats[t * n:(t + 1) * n] for t in range(t_len)]
        mode = "train" if train else "infer"
        zrng = rng.child(7) if (train and rng is not None) else None
        outs, final, exported = stacked_forward(self.recurrent, steps, state, zoneout or self.cfg.zoneout, zrng,
                                                mode, export_step)
        y = ops.concat(outs, axis=0)
        return self.att_head(y), self.pos_head(y), final, exported

    def predict_pose(self, r6: np.ndarray, t: np.ndarray) -> geo.Pose:
        return geo.Pose(geo.sixd_to_rotation(r6), t)
