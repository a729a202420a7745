"""Multi-modal scanning policy: image/pose/wrench encoders, action head, quality head.

The probe position carried on an Observation is never read here.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Action
from .nn import LayerSpec, ParamGroup, Sequential, ShapeMismatch, softmax

FRONT = ("front.image", "front.pose", "front.force")
ACTION_HEAD = "action_head"
QUALITY_HEAD = "quality_head"
GROUP_NAMES = FRONT + (ACTION_HEAD, QUALITY_HEAD)
STD_FLOOR = 1e-6


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    image_hw: int = 64
    conv_channels: tuple = (8, 16)
    conv_kernel: int = 3
    conv_stride: int = 2
    feature_dim: int = 32
    pose_hidden: int = 32
    force_hidden: int = 32
    action_hidden: tuple = (64,)
    quality_hidden: tuple = (32,)

    def __post_init__(self):
        for name in ("conv_channels", "action_hidden", "quality_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        ints = [self.image_hw, self.conv_kernel, self.conv_stride, self.feature_dim,
                self.pose_hidden, self.force_hidden, *self.conv_channels,
                *self.action_hidden, *self.quality_hidden]
        if any(v <= 0 for v in ints) or not self.conv_channels:
            raise InvalidConfig("all architecture sizes must be positive")
        if self.conv_out_hw() <= 0:
            raise InvalidConfig("image too small for the conv stack")

    @classmethod
    def full_scale(cls) -> "ArchConfig":
        return cls(image_hw=224, conv_channels=(16, 32, 64), feature_dim=128,
                   pose_hidden=128, force_hidden=128, action_hidden=(256,),
                   quality_hidden=(128,))

    @property
    def concat_width(self) -> int:
        return 3 * self.feature_dim

    def conv_out_hw(self) -> int:
        hw = self.image_hw
        for _ in self.conv_channels:
            hw = (hw - self.conv_kernel) // self.conv_stride + 1
        return hw

    def to_dict(self) -> dict:
        return asdict(self)

    def image_specs(self):
        specs, c_in = [], 1
        for c in self.conv_channels:
            specs += [LayerSpec("conv2d", c_in, c, self.conv_kernel, self.conv_stride), LayerSpec("relu")]
            c_in = c
        flat = c_in * self.conv_out_hw() ** 2
        return specs + [LayerSpec("flatten"), LayerSpec("dense", flat, self.feature_dim), LayerSpec("relu")]

    def vector_specs(self, n_in, hidden):
        return [LayerSpec("dense", n_in, hidden), LayerSpec("relu"),
                LayerSpec("dense", hidden, self.feature_dim), LayerSpec("relu")]

    def head_specs(self, widths, n_out):
        specs, n = [], self.concat_width
        for w in widths:
            specs += [LayerSpec("dense", n, w), LayerSpec("relu")]
            n = w
        return specs + [LayerSpec("dense", n, n_out)]


@dataclass
class Normalizer:
    """Per-dimension standardization of network inputs and action targets."""

    image_mean: float = 0.0
    image_std: float = 1.0
    pose_mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    pose_std: np.ndarray = field(default_factory=lambda: np.ones(4))
    force_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    force_std: np.ndarray = field(default_factory=lambda: np.ones(6))
    action_mean: np.ndarray = field(default_factory=lambda: np.zeros(7))
    action_std: np.ndarray = field(default_factory=lambda: np.ones(7))

    @classmethod
    def fit(cls, images, poses, forces, actions) -> "Normalizer":
        def stats(a):
            return a.mean(axis=0), np.maximum(a.std(axis=0), STD_FLOOR)

        pm, ps = stats(poses)
        fm, fs = stats(forces)
        am, as_ = stats(actions)
        return cls(float(images.mean()), float(max(images.std(), STD_FLOOR)), pm, ps, fm, fs, am, as_)

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.image_mean, self.image_std], self.pose_mean, self.pose_std,
                               self.force_mean, self.force_std, self.action_mean, self.action_std])

    @classmethod
    def from_vector(cls, v) -> "Normalizer":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (36,):
            raise ValueError("normalizer vector must have 36 entries")
        return cls(float(v[0]), float(v[1]), v[2:6], v[6:10], v[10:16], v[16:22], v[22:29], v[29:36])


@dataclass
class Batch:
    """Network inputs stacked along axis 0."""

    images: np.ndarray  # (N, H, W)
    poses: np.ndarray  # (N, 4)
    forces: np.ndarray  # (N, 6)

    @classmethod
    def from_observations(cls, observations) -> "Batch":
        return cls(
            np.stack([o.image for o in observations]),
            np.stack([o.orientation for o in observations]),
            np.stack([o.wrench.as_vector() for o in observations]),
        )

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.images[idx], self.poses[idx], self.forces[idx])


class PolicyParams:
    """All trainable weights, partitioned into named ParamGroups."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.groups = {
            "front.image": ParamGroup("front.image", Sequential.from_specs(cfg.image_specs(), rng, np.sqrt(2.0))),
            "front.pose": ParamGroup("front.pose", Sequential.from_specs(cfg.vector_specs(4, cfg.pose_hidden), rng, np.sqrt(2.0))),
            "front.force": ParamGroup("front.force", Sequential.from_specs(cfg.vector_specs(6, cfg.force_hidden), rng, np.sqrt(2.0))),
            ACTION_HEAD: ParamGroup(ACTION_HEAD, Sequential.from_specs(cfg.head_specs(cfg.action_hidden, 7), rng, 0.1)),
            QUALITY_HEAD: ParamGroup(QUALITY_HEAD, Sequential.from_specs(cfg.head_specs(cfg.quality_hidden, 2), rng, 0.1)),
        }
        self.norm = Normalizer()
        self.quality_trained = False

    # -- parameter enumeration -------------------------------------------------

    def group_list(self, names=GROUP_NAMES) -> list[ParamGroup]:
        return [self.groups[n] for n in names]

    def tensors(self) -> list[np.ndarray]:
        """Every parameter tensor in declaration order."""
        return [t for g in self.group_list() for t in g.tensors]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def snapshot(self, names=GROUP_NAMES) -> dict:
        return {n: [t.copy() for t in self.groups[n].tensors] for n in names}

    def set_trainable(self, names):
        for n, g in self.groups.items():
            g.trainable = n in names

    def copy(self) -> "PolicyParams":
        other = PolicyParams.__new__(PolicyParams)
        other.cfg, other.seed = self.cfg, self.seed
        other.groups = {}
        for n, g in self.groups.items():
            other.groups[n] = ParamGroup(n, copy.deepcopy(g.module), g.trainable)
        other.norm = Normalizer.from_vector(self.norm.vector())
        other.quality_trained = self.quality_trained
        return other

    # -- batched forward/backward ---------------------------------------------

    def _inputs(self, batch: Batch):
        hw = self.cfg.image_hw
        if batch.images.ndim != 3 or batch.images.shape[1:] != (hw, hw):
            raise ShapeMismatch(f"expected images of shape (N, {hw}, {hw}), got {batch.images.shape}")
        nm = self.norm
        img = ((batch.images - nm.image_mean) / nm.image_std)[:, None, :, :]
        pose = (batch.poses - nm.pose_mean) / nm.pose_std
        force = (batch.forces - nm.force_mean) / nm.force_std
        return img, pose, force

    def encode_batch(self, batch: Batch):
        caches = []
        feats = []
        for name, x in zip(FRONT, self._inputs(batch)):
            f, c = self.groups[name].module.forward(x)
            feats.append(f)
            caches.append(c)
        return np.concatenate(feats, axis=1), caches

    def backward_front(self, dfeat, caches):
        d = self.cfg.feature_dim
        grads = {}
        for k, name in enumerate(FRONT):
            _, grads[name] = self.groups[name].module.backward(dfeat[:, k * d:(k + 1) * d], caches[k])
        return grads

    def action_forward(self, batch: Batch):
        """Standardized action predictions and caches for backward."""
        feat, fcache = self.encode_batch(batch)
        out, hcache = self.groups[ACTION_HEAD].module.forward(feat)
        return out, (fcache, hcache)

    def action_backward(self, dout, cache, through_front=True):
        fcache, hcache = cache
        dfeat, hgrad = self.groups[ACTION_HEAD].module.backward(dout, hcache)
        grads = {ACTION_HEAD: hgrad}
        if through_front:
            grads.update(self.backward_front(dfeat, fcache))
        return grads

    def quality_forward(self, batch: Batch):
        feat, fcache = self.encode_batch(batch)
        logits, hcache = self.groups[QUALITY_HEAD].module.forward(feat)
        return logits, (fcache, hcache)

    def quality_backward(self, dlogits, cache, through_front=False):
        fcache, hcache = cache
        dfeat, hgrad = self.groups[QUALITY_HEAD].module.backward(dlogits, hcache)
        grads = {QUALITY_HEAD: hgrad}
        if through_front:
            grads.update(self.backward_front(dfeat, fcache))
        return grads

    def predict_actions(self, batch: Batch) -> np.ndarray:
        out, _ = self.action_forward(batch)
        return out * self.norm.action_std + self.norm.action_mean

    def confidences(self, batch: Batch) -> np.ndarray:
        logits, _ = self.quality_forward(batch)
        return softmax(logits)[:, 1]

    def grads_for(self, grads: dict, names) -> list:
        return [grads.get(n) for n in names]

    # -- single-observation API -----------------------------------------------

    def encode(self, obs) -> np.ndarray:
        feat, _ = self.encode_batch(Batch.from_observations([obs]))
        return feat[0]

    def predict_action(self, obs) -> Action:
        return Action.from_vector(self.predict_actions(Batch.from_observations([obs]))[0])

    def quality_probs(self, obs) -> np.ndarray:
        logits, _ = self.quality_forward(Batch.from_observations([obs]))
        return softmax(logits)[0]

    def quality(self, obs) -> float:
        return float(self.quality_probs(obs)[1])


def init_policy(cfg: ArchConfig | None = None, seed: int = 0) -> PolicyParams:
    return PolicyParams(cfg or ArchConfig(), seed)
