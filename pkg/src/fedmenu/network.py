"""Multi-encoder U-shaped segmentation network.

M structurally identical sub-encoders feed one shared decoder through
channel concatenation at every scale; a small generic decoder head per
configured encoder level produces binary per-organ maps used only as a
training regularizer. The parameter set is partitioned into
{subenc1..subencM, decoder, agd} so local training can freeze the groups a
client has no labels for.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConfigurationError,
    GradTape,
    Tensor,
    concat_channels,
    conv2d,
    instance_norm,
    leaky_relu,
    maxpool2,
    softmax_channels,
    upsample2,
)

GROUP_DECODER = "decoder"
GROUP_AGD = "agd"


def subenc_group(m: int) -> str:
    return f"subenc{m}"


class StructureMismatchError(ConfigurationError):
    """Two parameter sets (or a checkpoint) disagree structurally."""


@dataclass(frozen=True)
class NetworkConfig:
    num_organs: int = 3
    levels: int = 3
    base_channels: int = 4
    agd_levels: tuple = (1, 2, 3)
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    # number of sub-encoders; defaults to num_organs. 1 gives the
    # single-encoder baseline used in ablations.
    num_encoders: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "agd_levels", tuple(sorted(self.agd_levels)))
        if self.num_organs < 1:
            raise ConfigurationError("num_organs must be >= 1")
        if self.levels < 2:
            raise ConfigurationError("levels must be >= 2")
        if self.base_channels < 2:
            raise ConfigurationError("base_channels must be >= 2")
        if any(l < 1 or l > self.levels for l in self.agd_levels):
            raise ConfigurationError(f"agd_levels {self.agd_levels} outside 1..{self.levels}")
        if self.num_encoders is not None and self.num_encoders not in (1, self.num_organs):
            raise ConfigurationError("num_encoders must be 1 or num_organs")

    @property
    def encoders(self) -> int:
        return self.num_organs if self.num_encoders is None else self.num_encoders

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)


class ParameterSet:
    """Named tensors partitioned into sub-encoder, decoder and head groups."""

    def __init__(self, groups: dict):
        self.groups = groups

    @property
    def group_ids(self) -> list[str]:
        return list(self.groups.keys())

    def named_tensors(self):
        for gid, tensors in self.groups.items():
            for name, t in tensors.items():
                yield gid, name, t

    def flat(self) -> dict:
        return {f"{gid}/{name}": t for gid, name, t in self.named_tensors()}

    def tensors(self) -> list[Tensor]:
        return [t for _, _, t in self.named_tensors()]

    def copy(self) -> "ParameterSet":
        return ParameterSet({
            gid: {name: t.copy() for name, t in tensors.items()}
            for gid, tensors in self.groups.items()
        })

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def same_structure(self, other: "ParameterSet") -> bool:
        if self.group_ids != other.group_ids:
            return False
        for gid in self.groups:
            a, b = self.groups[gid], other.groups[gid]
            if list(a.keys()) != list(b.keys()):
                return False
            if any(a[n].shape != b[n].shape for n in a):
                return False
        return True

    def require_same_structure(self, other: "ParameterSet") -> None:
        if not self.same_structure(other):
            raise StructureMismatchError("parameter sets are structurally different")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for gid, name, t in self.named_tensors():
            h.update(f"{gid}/{name}".encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def clear_grads(self) -> None:
        for t in self.tensors():
            t.grad = None

    def to_arrays(self) -> dict:
        return {name: t.data for name, t in self.flat().items()}

    def load_arrays(self, arrays: dict) -> None:
        flat = self.flat()
        if set(arrays.keys()) != set(flat.keys()):
            raise StructureMismatchError("array names do not match the parameter set")
        for name, arr in arrays.items():
            if flat[name].shape != arr.shape:
                raise StructureMismatchError(
                    f"shape mismatch for {name}: {flat[name].shape} vs {arr.shape}")
            flat[name].data = np.asarray(arr, dtype=np.float64).copy()


@dataclass
class ForwardOutput:
    logits: Tensor                 # [B, M+1, H, W]
    probabilities: Tensor          # [B, M+1, H, W]
    agd_probs: dict = field(default_factory=dict)  # (organ, level) -> [B,2,H,W]


class MenuNet:
    """Builds and runs the network for one NetworkConfig."""

    def __init__(self, config: NetworkConfig):
        self.config = config

    # -- construction -------------------------------------------------------

    def build(self, seed: int) -> ParameterSet:
        """Xavier-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero
        biases, deterministic in seed."""
        cfg = self.config
        rng = np.random.default_rng(seed)
        groups: dict = {}
        for m in range(1, cfg.encoders + 1):
            enc: dict = {}
            cin = 1
            for level in range(1, cfg.levels + 1):
                cout = cfg.width(level)
                self._add_conv(enc, f"level{level}_conv1", cin, cout, 3, rng)
                self._add_conv(enc, f"level{level}_conv2", cout, cout, 3, rng)
                cin = cout
            groups[subenc_group(m)] = enc

        dec: dict = {}
        cin = cfg.encoders * cfg.width(cfg.levels)
        for level in range(cfg.levels - 1, 0, -1):
            cout = cfg.width(level)
            skip = cfg.encoders * cfg.width(level)
            self._add_conv(dec, f"level{level}_conv1", cin + skip, cout, 3, rng)
            self._add_conv(dec, f"level{level}_conv2", cout, cout, 3, rng)
            cin = cout
        self._add_conv(dec, "final", cfg.width(1), cfg.num_organs + 1, 1, rng)
        groups[GROUP_DECODER] = dec

        agd: dict = {}
        for level in cfg.agd_levels:
            c = cfg.width(level)
            self._add_conv(agd, f"level{level}_conv1", c, c, 3, rng)
            self._add_conv(agd, f"level{level}_conv2", c, c, 3, rng)
            self._add_conv(agd, f"level{level}_head", c, 2, 1, rng)
        groups[GROUP_AGD] = agd
        return ParameterSet(groups)

    @staticmethod
    def _add_conv(store: dict, name: str, cin: int, cout: int, k: int, rng) -> None:
        fan_in = cin * k * k
        fan_out = cout * k * k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        store[f"{name}/weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)))
        store[f"{name}/bias"] = Tensor(np.zeros(cout))

    # -- forward ------------------------------------------------------------

    def forward(self, params: ParameterSet, x: Tensor, with_agd: bool = False,
                tape: GradTape | None = None, agd_organs=None,
                frozen_encoders=frozenset()) -> ForwardOutput:
        cfg = self.config
        b, cin, h, w = x.shape
        if cin != 1:
            raise ConfigurationError(f"forward: expected 1 input channel, got {cin}")
        div = 2 ** (cfg.levels - 1)
        if h % div or w % div:
            raise ConfigurationError(
                f"forward: spatial size {h}x{w} not divisible by {div}")

        features: dict = {}
        for m in range(1, cfg.encoders + 1):
            enc = params.groups[subenc_group(m)]
            # frozen sub-encoders carry no trainable state this round, so
            # recording their backward rules would only burn time
            enc_tape = None if m in frozen_encoders else tape
            cur = x
            level_feats = []
            for level in range(1, cfg.levels + 1):
                cur = self._block(enc, f"level{level}_conv1", cur, enc_tape)
                cur = self._block(enc, f"level{level}_conv2", cur, enc_tape)
                level_feats.append(cur)
                if level < cfg.levels:
                    cur = maxpool2(cur, enc_tape)
            features[m] = level_feats

        dec = params.groups[GROUP_DECODER]
        d = concat_channels([features[m][cfg.levels - 1]
                             for m in range(1, cfg.encoders + 1)], tape)
        for level in range(cfg.levels - 1, 0, -1):
            d = upsample2(d, tape)
            skips = [features[m][level - 1] for m in range(1, cfg.encoders + 1)]
            d = concat_channels([d] + skips, tape)
            d = self._block(dec, f"level{level}_conv1", d, tape)
            d = self._block(dec, f"level{level}_conv2", d, tape)
        logits = conv2d(d, dec["final/weight"], dec["final/bias"], tape=tape)
        probabilities = softmax_channels(logits, tape)

        agd_probs: dict = {}
        if with_agd:
            agd = params.groups[GROUP_AGD]
            organs = range(1, cfg.encoders + 1) if agd_organs is None else \
                sorted(m for m in agd_organs if 1 <= m <= cfg.encoders)
            for m in organs:
                for level in cfg.agd_levels:
                    a = features[m][level - 1]
                    a = self._block(agd, f"level{level}_conv1", a, tape)
                    a = self._block(agd, f"level{level}_conv2", a, tape)
                    a = conv2d(a, agd[f"level{level}_head/weight"],
                               agd[f"level{level}_head/bias"], tape=tape)
                    a = softmax_channels(a, tape)
                    for _ in range(level - 1):
                        a = upsample2(a, tape)
                    agd_probs[(m, level)] = a
        return ForwardOutput(logits=logits, probabilities=probabilities,
                             agd_probs=agd_probs)

    def _block(self, store: dict, name: str, x: Tensor,
               tape: GradTape | None) -> Tensor:
        cfg = self.config
        k = store[f"{name}/weight"]
        pad = k.shape[2] // 2
        x = conv2d(x, k, store[f"{name}/bias"], padding=pad, tape=tape)
        x = instance_norm(x, cfg.norm_eps, tape)
        return leaky_relu(x, cfg.leaky_slope, tape)

    # -- parameter partition ------------------------------------------------

    def trainable_groups(self, labeled_organs) -> frozenset:
        """Groups a client with these labels may tune: its sub-encoders plus
        the shared decoder and generic heads; everything else stays frozen."""
        cfg = self.config
        labeled = frozenset(int(m) for m in labeled_organs)
        if not labeled:
            raise ConfigurationError("each client must label at least one organ")
        if any(m < 1 or m > cfg.num_organs for m in labeled):
            raise ConfigurationError(
                f"labeled organs {sorted(labeled)} outside 1..{cfg.num_organs}")
        if cfg.encoders == 1:
            encs = {subenc_group(1)}
        else:
            encs = {subenc_group(m) for m in labeled}
        return frozenset(encs | {GROUP_DECODER, GROUP_AGD})
