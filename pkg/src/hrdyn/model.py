"""HR-history-conditioned encoder-decoder estimator.

``encoder_decoder``
    xi -> per-step Linear(1 -> 50) -> ReLU -> encoder LSTM.  The encoder's
    final (h, c) initializes the decoder LSTM, which reads the PPG features
    produced by conv blocks (conv -> batch norm -> ReLU -> max-pool 2).
    The decoder's last hidden state goes through Linear(-> 1).
``mlp_concat``
    xi -> two-layer MLP; its output is concatenated with the decoder's last
    hidden state (decoder starts from zeros) before the output layer.
``none``
    Decoder starts from zeros and xi is ignored, i.e. plain p(y | x).

Heart rates enter and leave the network through the fixed affine map
``(bpm - 100) / 60``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import ConfigurationError, ShapeError
from .nn.functional import conv1d_output_length

CONDITIONING_MODES = ("encoder_decoder", "mlp_concat", "none")
XI_ORDERS = ("oldest_first", "newest_first")
HR_CENTER_BPM = 100.0
HR_SCALE_BPM = 60.0


def xi_scaling(xi_bpm):
    return (np.asarray(xi_bpm, dtype=np.float64) - HR_CENTER_BPM) / HR_SCALE_BPM


def xi_unscaling(z):
    return np.asarray(z, dtype=np.float64) * HR_SCALE_BPM + HR_CENTER_BPM


@dataclass(frozen=True)
class ModelConfig:
    k_history: int = 5
    xi_embed_dim: int = 50
    encoder_hidden: int = 64
    conv_channels: tuple = (16, 32)
    conv_kernels: tuple = (7, 5)
    decoder_hidden: int = 64
    conditioning: str = "encoder_decoder"
    xi_order: str = "oldest_first"
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.xi_order not in XI_ORDERS:
            raise ConfigurationError(f"xi_order must be one of {XI_ORDERS}")
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ConfigurationError(
                f"conv_channels ({len(self.conv_channels)}) and conv_kernels "
                f"({len(self.conv_kernels)}) must have equal length")
        dims = (self.xi_embed_dim, self.encoder_hidden, self.decoder_hidden,
                *self.conv_channels, *self.conv_kernels)
        if any(d <= 0 for d in dims):
            raise ConfigurationError("all model dimensions must be positive")
        if self.conditioning != "none" and self.k_history < 1:
            raise ConfigurationError("conditioned models need k_history >= 1")
        if self.k_history < 0:
            raise ConfigurationError("k_history must be >= 0")
        if self.conditioning == "encoder_decoder" and self.encoder_hidden != self.decoder_hidden:
            raise ConfigurationError(
                "encoder_hidden must equal decoder_hidden: the encoder state seeds the decoder")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def sequence_length(self, segment_len):
        """Decoder sequence length for input windows of ``segment_len`` samples."""
        length = segment_len
        for k in self.conv_kernels:
            length = conv1d_output_length(length, k) // 2
        return length


PRESETS = {
    "desk": ModelConfig(),
    # three conv blocks and 176 hidden units: ~427k parameters
    "paper-scale": ModelConfig(encoder_hidden=176, decoder_hidden=176,
                               conv_channels=(32, 64, 128), conv_kernels=(7, 5, 5)),
    # small and quick, for laptop-scale LOSO benchmarks
    "bench": ModelConfig(encoder_hidden=32, decoder_hidden=32,
                         conv_channels=(8, 16, 16), conv_kernels=(7, 5, 5)),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return cfg.replace(**overrides) if overrides else cfg


def param_count(config):
    """Closed-form number of trainable scalars for ``config``."""
    E, H, D = config.xi_embed_dim, config.encoder_hidden, config.decoder_hidden
    total = 0
    if config.conditioning == "encoder_decoder":
        total += 2 * E                      # Linear(1 -> E)
        total += 4 * H * (E + H) + 4 * H    # encoder LSTM
    elif config.conditioning == "mlp_concat":
        K = config.k_history
        total += K * E + E + E * E + E      # two-layer MLP
    c_in = 1
    for c, k in zip(config.conv_channels, config.conv_kernels):
        total += c * c_in * k + c + 2 * c   # kernel, bias, BN gamma/beta
        c_in = c
    total += 4 * D * (c_in + D) + 4 * D     # decoder LSTM
    head_in = D + (E if config.conditioning == "mlp_concat" else 0)
    total += head_in + 1
    return total


class HRNet:
    """Trainable parameters, buffers and the forward/backward passes."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        E, H, D = config.xi_embed_dim, config.encoder_hidden, config.decoder_hidden
        self.modules = {}
        if config.conditioning == "encoder_decoder":
            self.modules["xi_embed"] = nn.Linear(1, E, rng)
            self.modules["encoder"] = nn.LSTM(E, H, rng)
        elif config.conditioning == "mlp_concat":
            self.modules["xi_fc1"] = nn.Linear(config.k_history, E, rng)
            self.modules["xi_fc2"] = nn.Linear(E, E, rng)
        self._xi_relus = [nn.ReLU(), nn.ReLU()]
        self._blocks = []
        c_in = 1
        for i, (c, k) in enumerate(zip(config.conv_channels, config.conv_kernels)):
            conv = nn.Conv1d(c_in, c, k, rng)
            bn = nn.BatchNorm1d(c, momentum=config.bn_momentum)
            self.modules[f"conv{i}"] = conv
            self.modules[f"bn{i}"] = bn
            self._blocks.append((conv, bn, nn.ReLU(), nn.MaxPool1d(2)))
            c_in = c
        self.modules["decoder"] = nn.LSTM(c_in, D, rng)
        head_in = D + (E if config.conditioning == "mlp_concat" else 0)
        self.modules["head"] = nn.Linear(head_in, 1, rng)

    # ---- parameter access

    def named_parameters(self):
        return {f"{m}.{p}": arr for m, mod in self.modules.items() for p, arr in mod.params.items()}

    def named_gradients(self):
        return {f"{m}.{p}": arr for m, mod in self.modules.items() for p, arr in mod.grads.items()}

    def named_buffers(self):
        return {f"{m}.{b}": arr for m, mod in self.modules.items() for b, arr in mod.buffers.items()}

    def state_dict(self):
        state = {k: v.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state):
        targets = {**self.named_parameters(), **self.named_buffers()}
        missing = set(targets) - set(state)
        if missing:
            raise ShapeError(f"state is missing tensors: {sorted(missing)}")
        for name, arr in targets.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {arr.shape}, got {value.shape}")
            arr[...] = value

    def n_parameters(self):
        return sum(a.size for a in self.named_parameters().values())

    def zero_grad(self):
        for mod in self.modules.values():
            mod.zero_grad()

    def save(self, path, extra=None):
        nn.save_checkpoint(path, self.config.to_dict(), self.state_dict(),
                           extra={"seed": self.seed, **(extra or {})})

    @classmethod
    def load(cls, path):
        config, tensors, _, extra = nn.load_checkpoint(path)
        net = cls(ModelConfig.from_dict(config), seed=extra.get("seed", 0))
        net.load_state_dict(tensors)
        return net

    # ---- passes

    def _check_inputs(self, x, xi):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[1] != 1:
            raise ShapeError(f"segments must be (n, len) or (n, 1, len), got {x.shape}")
        n = x.shape[0]
        if self.config.conditioning == "none":
            return x, None
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape != (n, self.config.k_history):
            raise ShapeError(f"xi must have shape ({n}, {self.config.k_history}), got {xi.shape}")
        z = xi_scaling(xi)
        if self.config.xi_order == "newest_first":
            z = z[:, ::-1]
        return x, np.ascontiguousarray(z)

    def forward(self, x, xi=None, train=False):
        """Normalized prediction (n,) for segments ``x`` and HR history ``xi`` (bpm)."""
        x, z = self._check_inputs(x, xi)
        n = x.shape[0]
        mode = self.config.conditioning
        h0 = c0 = None
        mlp_feat = None
        if mode == "encoder_decoder":
            K = z.shape[1]
            e = self.modules["xi_embed"].forward(z.reshape(n * K, 1))
            e = self._xi_relus[0].forward(e).reshape(n, K, -1)
            _, h0, c0 = self.modules["encoder"].forward(e)
        elif mode == "mlp_concat":
            a = self._xi_relus[0].forward(self.modules["xi_fc1"].forward(z))
            mlp_feat = self._xi_relus[1].forward(self.modules["xi_fc2"].forward(a))
        a = x
        for conv, bn, relu, pool in self._blocks:
            a = pool.forward(relu.forward(bn.forward(conv.forward(a), train=train)))
        _, h_last, _ = self.modules["decoder"].forward(a.transpose(0, 2, 1), h0, c0)
        feat = h_last if mlp_feat is None else np.concatenate([h_last, mlp_feat], axis=1)
        return self.modules["head"].forward(feat)[:, 0]

    def backward(self, dout):
        """Accumulate parameter gradients given d(loss)/d(forward output)."""
        mode = self.config.conditioning
        D = self.config.decoder_hidden
        dfeat = self.modules["head"].backward(np.asarray(dout, dtype=np.float64)[:, None])
        dx_seq, dh0, dc0 = self.modules["decoder"].backward(dh_last=dfeat[:, :D])
        da = dx_seq.transpose(0, 2, 1)
        for conv, bn, relu, pool in reversed(self._blocks):
            da = conv.backward(bn.backward(relu.backward(pool.backward(da))))
        if mode == "encoder_decoder":
            de, _, _ = self.modules["encoder"].backward(dh_last=dh0, dc_last=dc0)
            n, K, E = de.shape
            de = self._xi_relus[0].backward(de.reshape(n * K, E))
            self.modules["xi_embed"].backward(de)
        elif mode == "mlp_concat":
            dm = self._xi_relus[1].backward(dfeat[:, D:])
            da = self._xi_relus[0].backward(self.modules["xi_fc2"].backward(dm))
            self.modules["xi_fc1"].backward(da)


def build(config, seed=0):
    return HRNet(config, seed)


def zero_parameters(net):
    for arr in net.named_parameters().values():
        arr.fill(0.0)
    return net


def forward(net, segments, xi=None):
    """Eval-mode prediction in bpm."""
    return xi_unscaling(net.forward(segments, xi, train=False))
