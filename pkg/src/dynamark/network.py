"""Multi-scale multi-task network.

Three parallel branches encode the (F, T) feature matrix at temporal
lengths T, T/s and T/s^2 (strided max-pooling down, transposed
convolution back up) and are fused by elementwise sum into a shared
T x 8 latent sequence.  A pool of 8 convolutional experts with four
softmax gates forms per-task features, and four linear heads emit the
dynamics (6-class), change-point, beat and downbeat logits.

Branch internals: ``blocks_per_branch`` residual 3x3 conv blocks over
the (band, time) plane, a frequency-collapsing linear map down to
``channels``, one temporal self-attention block, then a linear map to
the 8 latent channels.  Branch fusion is a sum so the latent width
stays exactly 8.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ParameterStore, Tensor
from .errors import ConfigError
from .objectives import N_DYNAMIC_CLASSES, TASKS

LATENT_DIM = 8
NUM_EXPERTS = 8


@dataclass
class ModelConfig:
    input_bins: int = 22
    scaling_factor: int = 5
    channels: int = 20
    blocks_per_branch: int = 2
    attention_dim: int = 8
    num_dynamic_classes: int = N_DYNAMIC_CLASSES
    use_mmoe: bool = True

    latent_dim: int = LATENT_DIM
    num_experts: int = NUM_EXPERTS
    num_tasks: int = len(TASKS)

    def __post_init__(self):
        if self.scaling_factor < 1:
            raise ConfigError(f"scaling_factor must be >= 1, got {self.scaling_factor}")
        if self.latent_dim != LATENT_DIM or self.num_experts != NUM_EXPERTS:
            raise ConfigError("latent_dim and num_experts are fixed at 8")
        if self.num_dynamic_classes != N_DYNAMIC_CLASSES:
            raise ConfigError(f"num_dynamic_classes is fixed at {N_DYNAMIC_CLASSES}")
        if min(self.channels, self.blocks_per_branch, self.attention_dim, self.input_bins) < 1:
            raise ConfigError("all widths must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentSequence:
    """Shared encoder output, (B, T, 8)."""

    values: Tensor


@dataclass
class TaskLogits:
    """Raw per-frame logits; dynamics is (B, T, 6), the rest (B, T)."""

    dynamics: Tensor
    change_point: Tensor
    beat: Tensor
    downbeat: Tensor


@dataclass
class GateWeights:
    """Per-task softmax gate rows, each (B, T, 8)."""

    per_task: dict[str, Tensor] = field(default_factory=dict)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class DynamicsModel:
    """Owns the parameter store, batchnorm state and the forward pass."""

    def __init__(self, cfg: ModelConfig, seed: int = 86):
        self.cfg = cfg
        self.params = ParameterStore()
        self.bn_state: dict[str, BatchNormState] = {}
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------

    def _conv2d(self, rng, name, cin, cout, k):
        self.params.add(f"{name}.w", _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _conv1d(self, rng, name, cin, cout, k):
        self.params.add(f"{name}.w", _kaiming_uniform(rng, (cout, cin, k), cin * k))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _convt1d(self, rng, name, cin, cout, k):
        self.params.add(f"{name}.w", _kaiming_uniform(rng, (cin, cout, k), cin * k))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def _linear(self, rng, name, din, dout):
        self.params.add(f"{name}.w", _kaiming_uniform(rng, (dout, din), din))
        self.params.add(f"{name}.b", np.zeros(dout, dtype=np.float32))

    def _bn(self, name, channels):
        self.params.add(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.params.add(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self.bn_state[name] = BatchNormState(channels)

    def _build(self, rng):
        cfg = self.cfg
        self._bn("input_bn", cfg.input_bins)
        for b in range(3):
            prefix = f"branch{b}"
            cin = 1
            for blk in range(cfg.blocks_per_branch):
                self._conv2d(rng, f"{prefix}.block{blk}.conv", cin, cfg.channels, 3)
                if cin != cfg.channels:
                    self._conv2d(rng, f"{prefix}.block{blk}.proj", cin, cfg.channels, 1)
                self._bn(f"{prefix}.block{blk}.bn", cfg.channels)
                cin = cfg.channels
            self._linear(rng, f"{prefix}.collapse", cfg.channels * cfg.input_bins, cfg.channels)
            for w in ("wq", "wk", "wv"):
                self._linear(rng, f"{prefix}.attn.{w}", cfg.channels, cfg.attention_dim)
            self._linear(rng, f"{prefix}.attn.wo", cfg.attention_dim, cfg.channels)
            self.params.add(f"{prefix}.attn.ln.gamma", np.ones(cfg.channels, dtype=np.float32))
            self.params.add(f"{prefix}.attn.ln.beta", np.zeros(cfg.channels, dtype=np.float32))
            self._linear(rng, f"{prefix}.out", cfg.channels, LATENT_DIM)
            for stage in range(b):
                self._convt1d(rng, f"{prefix}.up{stage}", LATENT_DIM, LATENT_DIM,
                              max(cfg.scaling_factor, 1))
        if cfg.use_mmoe:
            for e in range(NUM_EXPERTS):
                self._conv1d(rng, f"expert{e}.conv0", LATENT_DIM, LATENT_DIM, 3)
                self._conv1d(rng, f"expert{e}.conv1", LATENT_DIM, LATENT_DIM, 3)
            for task in TASKS:
                self._linear(rng, f"gate_{task}", LATENT_DIM, NUM_EXPERTS)
        for task in TASKS:
            out = cfg.num_dynamic_classes if task == "dynamics" else 1
            self._linear(rng, f"head_{task}", LATENT_DIM, out)

    # -- forward -------------------------------------------------------------

    def _apply_linear(self, name, x):
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _apply_bn(self, name, x, training):
        return ad.batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              state=self.bn_state[name], training=training)

    def _branch(self, x4d: Tensor, b: int, training: bool) -> Tensor:
        cfg = self.cfg
        s = cfg.scaling_factor
        prefix = f"branch{b}"
        h = ad.maxpool1d(x4d, s ** b) if s ** b > 1 else x4d
        for blk in range(cfg.blocks_per_branch):
            name = f"{prefix}.block{blk}"
            y = ad.conv2d(h, self.params[f"{name}.conv.w"], self.params[f"{name}.conv.b"])
            if f"{name}.proj.w" in self.params:
                res = ad.conv2d(h, self.params[f"{name}.proj.w"], self.params[f"{name}.proj.b"])
            else:
                res = h
            h = self._apply_bn(f"{name}.bn", ad.relu(ad.add(y, res)), training)
        bsz, c, f, t = h.shape
        h = ad.reshape(ad.transpose(h, (0, 3, 1, 2)), (bsz, t, c * f))
        h = self._apply_linear(f"{prefix}.collapse", h)
        q = self._apply_linear(f"{prefix}.attn.wq", h)
        k = self._apply_linear(f"{prefix}.attn.wk", h)
        v = self._apply_linear(f"{prefix}.attn.wv", h)
        att = self._apply_linear(f"{prefix}.attn.wo", ad.attention(q, k, v))
        h = ad.layernorm(ad.add(h, att), self.params[f"{prefix}.attn.ln.gamma"],
                         self.params[f"{prefix}.attn.ln.beta"])
        h = self._apply_linear(f"{prefix}.out", h)  # (B, t, 8)
        h = ad.transpose(h, (0, 2, 1))  # (B, 8, t)
        for stage in range(b):
            h = ad.conv_transpose1d(h, self.params[f"{prefix}.up{stage}.w"],
                                    self.params[f"{prefix}.up{stage}.b"], stride=s)
        return h  # (B, 8, T_padded)

    def encode(self, features: np.ndarray | Tensor, training: bool = False) -> LatentSequence:
        """(B, F, T) or (F, T) features -> shared latent (B, T, 8).

        The input is right-padded with zeros to a multiple of s^2 and
        the padding is cropped from the output.
        """
        cfg = self.cfg
        data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        bsz, f, t = data.shape
        if f != cfg.input_bins:
            raise ConfigError(f"encode: expected {cfg.input_bins} feature bins, got {f}")
        block = cfg.scaling_factor ** 2
        t_pad = -(-t // block) * block
        if t_pad != t:
            data = np.pad(data, ((0, 0), (0, 0), (0, t_pad - t)))
        x = Tensor(data)
        # per-band normalisation: treat the F bins as batchnorm channels
        x4d = ad.reshape(x, (bsz, f, 1, t_pad))
        x4d = self._apply_bn("input_bn", x4d, training)
        x4d = ad.transpose(x4d, (0, 2, 1, 3))  # (B, 1, F, T)
        fused = self._branch(x4d, 0, training)
        fused = ad.add(fused, self._branch(x4d, 1, training))
        fused = ad.add(fused, self._branch(x4d, 2, training))
        if t_pad != t:
            fused = ad.narrow(fused, 2, 0, t)
        return LatentSequence(values=ad.transpose(fused, (0, 2, 1)))

    def mmoe(self, latent: LatentSequence) -> tuple[dict[str, Tensor], GateWeights]:
        """Experts + per-task gates; returns task features and gate rows."""
        if not self.cfg.use_mmoe:
            raise ConfigError("mmoe called on a model configured without MMoE")
        z = latent.values  # (B, T, 8)
        zc = ad.transpose(z, (0, 2, 1))  # (B, 8, T)
        experts = []
        for e in range(NUM_EXPERTS):
            h = ad.conv1d(zc, self.params[f"expert{e}.conv0.w"], self.params[f"expert{e}.conv0.b"])
            h = ad.conv1d(ad.relu(h), self.params[f"expert{e}.conv1.w"], self.params[f"expert{e}.conv1.b"])
            experts.append(ad.transpose(h, (0, 2, 1)))  # (B, T, 8)
        gates = GateWeights()
        task_features: dict[str, Tensor] = {}
        for task in TASKS:
            w = ad.softmax(self._apply_linear(f"gate_{task}", z))  # (B, T, 8)
            gates.per_task[task] = w
            mixed = None
            for e in range(NUM_EXPERTS):
                we = ad.narrow(w, 2, e, 1)  # (B, T, 1)
                contrib = ad.mul(experts[e], we)
                mixed = contrib if mixed is None else ad.add(mixed, contrib)
            task_features[task] = mixed
        return task_features, gates

    def forward(self, features, training: bool = False, return_gates: bool = False):
        """Full pass: features -> TaskLogits (optionally with gates)."""
        latent = self.encode(features, training=training)
        if self.cfg.use_mmoe:
            task_features, gates = self.mmoe(latent)
        else:
            task_features = {task: latent.values for task in TASKS}
            gates = GateWeights()
        heads = {}
        for task in TASKS:
            out = self._apply_linear(f"head_{task}", task_features[task])
            if task != "dynamics":
                out = ad.reshape(out, out.shape[:-1])
            heads[task] = out
        logits = TaskLogits(dynamics=heads["dynamics"], change_point=heads["change_point"],
                            beat=heads["beat"], downbeat=heads["downbeat"])
        return (logits, gates) if return_gates else logits

    # -- bookkeeping ----------------------------------------------------------

    def param_count(self) -> int:
        return self.params.total_parameters()

    def bn_state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in sorted(self.bn_state.items()):
            out[f"{name}.running_mean"] = state.running_mean.copy()
            out[f"{name}.running_var"] = state.running_var.copy()
        return out

    def load_bn_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, bn in self.bn_state.items():
            bn.running_mean = np.asarray(state[f"{name}.running_mean"], dtype=np.float32).copy()
            bn.running_var = np.asarray(state[f"{name}.running_var"], dtype=np.float32).copy()


def param_count(cfg: ModelConfig) -> int:
    """Exact number of trainable scalars for a configuration."""
    return DynamicsModel(cfg, seed=0).param_count()
