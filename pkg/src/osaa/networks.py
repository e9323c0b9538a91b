"""Encoder, decoder, task classifier and conditional domain discriminator.

All four networks draw their initial weights and dropout masks from their own
seeded streams, so adding or removing one network never shifts another's
random numbers.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autodiff import (
    PoolIndices,
    Tensor,
    adaptive_avg_pool1d,
    concat,
    conv1d,
    conv_transpose1d,
    dropout,
    grad_reverse,
    linear,
    maxpool1d,
    maxunpool1d,
    relu,
    reshape,
)

CHECKPOINT_MAGIC = b"OSAA1"

# stream keys for np.random.default_rng([seed, key])
_INIT_KEYS = {"encoder": 1, "decoder": 2, "classifier": 3, "discriminator": 4}
_DROPOUT_KEY = 10


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class Module:
    """Named parameter container with a train/eval switch."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.training = True

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Encoder(Module):
    """Three conv(K) -> relu -> dropout -> maxpool(2) blocks, then adaptive pooling.

    Convolutions pad ``K // 2`` on both sides so only pooling changes the
    length. The last feature map is average-pooled to ``feature_dim //
    channels`` positions and flattened into a ``feature_dim`` vector.
    """

    def __init__(self, channels: int = 64, kernel: int = 9, p_drop: float = 0.4, feature_dim: int = 128,
                 n_blocks: int = 3, pool: int = 2, seed: int = 0, dtype=np.float32):
        super().__init__()
        if feature_dim % channels:
            raise ValueError(f"feature_dim {feature_dim} must be a multiple of channels {channels}")
        self.channels, self.kernel, self.p_drop = channels, kernel, p_drop
        self.feature_dim, self.n_blocks, self.pool = feature_dim, n_blocks, pool
        rng = np.random.default_rng([seed, _INIT_KEYS["encoder"]])
        c_in = 1
        for i in range(n_blocks):
            self.params[f"conv{i + 1}.weight"] = _uniform(rng, (channels, c_in, kernel), c_in * kernel, dtype)
            self.params[f"conv{i + 1}.bias"] = _zeros(channels, dtype)
            c_in = channels
        self.dropout_rngs = [np.random.default_rng([seed, _DROPOUT_KEY, i]) for i in range(n_blocks)]

    @property
    def min_length(self) -> int:
        return self.pool ** self.n_blocks * self.kernel

    def __call__(self, x: Tensor) -> tuple[Tensor, list[PoolIndices]]:
        return self.encode(x)

    def encode(self, x: Tensor, record: Optional[list] = None) -> tuple[Tensor, list[PoolIndices]]:
        if x.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"encoder input must be [B, 1, m], got shape {x.shape}")
        if x.shape[2] < self.min_length:
            raise ValueError(f"signal length {x.shape[2]} is shorter than the required minimum {self.min_length}")
        indices = []
        pad = self.kernel // 2
        for i in range(self.n_blocks):
            x = conv1d(x, self.params[f"conv{i + 1}.weight"], self.params[f"conv{i + 1}.bias"], padding=pad)
            if record is not None:
                record.append(x)
            x = relu(x)
            x = dropout(x, self.p_drop, self.dropout_rngs[i], training=self.training)
            x, idx = maxpool1d(x, self.pool)
            indices.append(idx)
        x = adaptive_avg_pool1d(x, self.feature_dim // self.channels)
        return reshape(x, (x.shape[0], self.feature_dim)), indices


def pooled_length(length: int, pool: int = 2, n_blocks: int = 3) -> int:
    for _ in range(n_blocks):
        length = -(-length // pool)
    return length


class Decoder(Module):
    """Bridge linear back to the last pooled map, then (unpool -> transposed conv) x 3.

    Unpooling reuses the encoder's argmax positions in reverse order; the last
    transposed conv maps to a single channel, so the output shape equals the
    encoder input shape.
    """

    def __init__(self, signal_length: int, channels: int = 64, kernel: int = 9, feature_dim: int = 128,
                 n_blocks: int = 3, pool: int = 2, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.signal_length, self.channels, self.kernel = signal_length, channels, kernel
        self.n_blocks = n_blocks
        self.bottom_len = pooled_length(signal_length, pool, n_blocks)
        rng = np.random.default_rng([seed, _INIT_KEYS["decoder"]])
        width = channels * self.bottom_len
        self.params["bridge.weight"] = _uniform(rng, (width, feature_dim), feature_dim, dtype)
        self.params["bridge.bias"] = _zeros(width, dtype)
        for i in range(n_blocks):
            c_out = 1 if i == n_blocks - 1 else channels
            self.params[f"deconv{i + 1}.weight"] = _uniform(rng, (channels, c_out, kernel), channels * kernel, dtype)
            self.params[f"deconv{i + 1}.bias"] = _zeros(c_out, dtype)

    def __call__(self, h: Tensor, indices: list[PoolIndices]) -> Tensor:
        return self.decode(h, indices)

    def decode(self, h: Tensor, indices: list[PoolIndices]) -> Tensor:
        if len(indices) != self.n_blocks:
            raise ValueError(f"decoder needs {self.n_blocks} pool index sets, got {len(indices)}")
        B = h.shape[0]
        last = indices[-1].index.shape
        if last != (B, self.channels, self.bottom_len):
            raise ValueError(
                f"pool indices {last} do not match decoder geometry {(B, self.channels, self.bottom_len)}")
        x = linear(h, self.params["bridge.weight"], self.params["bridge.bias"])
        x = reshape(x, (B, self.channels, self.bottom_len))
        pad = self.kernel // 2
        for i, idx in enumerate(reversed(indices)):
            x = maxunpool1d(x, idx)
            x = conv_transpose1d(x, self.params[f"deconv{i + 1}.weight"], self.params[f"deconv{i + 1}.bias"],
                                 padding=pad)
            if i < self.n_blocks - 1:
                x = relu(x)
        return x


class Classifier(Module):
    def __init__(self, n_classes: int, feature_dim: int = 128, hidden: int = 128, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.n_classes = n_classes
        rng = np.random.default_rng([seed, _INIT_KEYS["classifier"]])
        self.params["fc1.weight"] = _uniform(rng, (hidden, feature_dim), feature_dim, dtype)
        self.params["fc1.bias"] = _zeros(hidden, dtype)
        self.params["fc2.weight"] = _uniform(rng, (n_classes, hidden), hidden, dtype)
        self.params["fc2.bias"] = _zeros(n_classes, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        x = relu(linear(h, self.params["fc1.weight"], self.params["fc1.bias"]))
        return linear(x, self.params["fc2.weight"], self.params["fc2.bias"])


class Discriminator(Module):
    """Domain discriminator over features conditioned on class probabilities.

    ``conditioning="concat"`` feeds ``[h, p]``; ``"outer"`` feeds the
    flattened outer product ``h p^T``. The class probabilities condition the
    discriminator but are treated as constants, so only the features carry the
    adversarial gradient; otherwise the classifier could fool the
    discriminator by predicting one class everywhere. The conditioned input
    passes through a gradient-reversal layer before the hidden layer, so a
    single backward pass trains the discriminator and pushes the encoder the
    other way.
    """

    def __init__(self, n_classes: int, feature_dim: int = 128, hidden: int = 128, conditioning: str = "concat",
                 seed: int = 0, dtype=np.float32):
        super().__init__()
        if conditioning not in ("concat", "outer"):
            raise ValueError(f"unknown conditioning {conditioning!r}; expected 'concat' or 'outer'")
        self.n_classes, self.feature_dim, self.conditioning = n_classes, feature_dim, conditioning
        rng = np.random.default_rng([seed, _INIT_KEYS["discriminator"]])
        width = feature_dim + n_classes if conditioning == "concat" else feature_dim * n_classes
        self.params["fc1.weight"] = _uniform(rng, (hidden, width), width, dtype)
        self.params["fc1.bias"] = _zeros(hidden, dtype)
        self.params["fc2.weight"] = _uniform(rng, (1, hidden), hidden, dtype)
        self.params["fc2.bias"] = _zeros(1, dtype)

    def __call__(self, h: Tensor, probs: Tensor, coeff: float = 1.0) -> Tensor:
        if probs.ndim != 2 or probs.shape[1] != self.n_classes:
            raise ValueError(f"discriminator expects {self.n_classes} class probabilities, got shape {probs.shape}")
        if probs.shape[0] != h.shape[0]:
            raise ValueError(f"feature batch {h.shape[0]} and probability batch {probs.shape[0]} differ")
        probs = probs.detach()
        if self.conditioning == "concat":
            z = concat([h, probs], axis=1)
        else:
            B = h.shape[0]
            z = reshape(reshape(h, (B, -1, 1)) * reshape(probs, (B, 1, self.n_classes)),
                        (B, self.feature_dim * self.n_classes))
        z = grad_reverse(z, coeff)
        z = relu(linear(z, self.params["fc1.weight"], self.params["fc1.bias"]))
        return linear(z, self.params["fc2.weight"], self.params["fc2.bias"])


class OSAANetworks:
    """One parameter store shared by the source, intermediate and target passes."""

    def __init__(self, signal_length: int, n_classes: int, channels: int = 64, kernel: int = 9,
                 p_drop: float = 0.4, feature_dim: int = 128, hidden: int = 128, conditioning: str = "concat",
                 seed: int = 0, dtype=np.float32, with_decoder: bool = True, with_discriminator: bool = True):
        self.signal_length, self.n_classes = signal_length, n_classes
        self.arch = dict(channels=channels, kernel=kernel, p_drop=p_drop, feature_dim=feature_dim, hidden=hidden,
                         conditioning=conditioning)
        self.encoder = Encoder(channels, kernel, p_drop, feature_dim, seed=seed, dtype=dtype)
        if signal_length < self.encoder.min_length:
            raise ValueError(
                f"signal length {signal_length} is shorter than the required minimum {self.encoder.min_length}")
        self.classifier = Classifier(n_classes, feature_dim, hidden, seed=seed, dtype=dtype)
        self.decoder = Decoder(signal_length, channels, kernel, feature_dim, seed=seed,
                               dtype=dtype) if with_decoder else None
        self.discriminator = Discriminator(n_classes, feature_dim, hidden, conditioning, seed=seed,
                                           dtype=dtype) if with_discriminator else None
        # z-score statistics of the target data the networks were adapted to
        self.input_norm = (np.float32(0.0), np.float32(1.0))

    def modules(self) -> dict[str, Module]:
        mods = {"encoder": self.encoder, "decoder": self.decoder, "classifier": self.classifier,
                "discriminator": self.discriminator}
        return {k: v for k, v in mods.items() if v is not None}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, mod in self.modules().items():
            for name, p in mod.named_parameters():
                yield f"{prefix}.{name}", p

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def train(self, mode: bool = True) -> "OSAANetworks":
        for mod in self.modules().values():
            mod.train(mode)
        return self

    def eval(self) -> "OSAANetworks":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits for signals ``x [N, m]``; restores the previous mode."""
        was_training = self.encoder.training
        self.eval()
        dtype = self.encoder.params["conv1.weight"].dtype
        try:
            out = []
            for start in range(0, len(x), batch_size):
                chunk = Tensor(np.asarray(x[start:start + batch_size], dtype=dtype)[:, None, :])
                h, _ = self.encoder(chunk)
                out.append(self.classifier(h).data)
            return np.concatenate(out, axis=0) if out else np.zeros((0, self.n_classes), dtype=dtype)
        finally:
            self.train(was_training)

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str | Path) -> None:
        meta = {"signal_length": self.signal_length, "n_classes": self.n_classes,
                "conditioning": 1 if self.arch["conditioning"] == "outer" else 0,
                "p_drop": self.arch["p_drop"], "hidden": self.arch["hidden"],
                "input_mean": self.input_norm[0], "input_std": self.input_norm[1]}
        entries = {f"meta.{k}": np.array([v], dtype=np.float32) for k, v in meta.items()}
        entries.update({name: p.data for name, p in self.named_parameters()})
        save_checkpoint(path, entries)

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "OSAANetworks":
        entries = load_checkpoint(path)
        try:
            m = int(entries["meta.signal_length"][0])
            c = int(entries["meta.n_classes"][0])
            conv1 = entries["encoder.conv1.weight"]
            feature_dim = entries["classifier.fc1.weight"].shape[1]
        except KeyError as exc:
            raise ValueError(f"checkpoint {path} is missing entry {exc.args[0]}") from None
        nets = cls(m, c, channels=conv1.shape[0], kernel=conv1.shape[2], p_drop=float(entries["meta.p_drop"][0]),
                   feature_dim=feature_dim, hidden=int(entries["meta.hidden"][0]),
                   conditioning="outer" if entries["meta.conditioning"][0] else "concat", dtype=dtype,
                   with_decoder="decoder.bridge.weight" in entries,
                   with_discriminator="discriminator.fc1.weight" in entries)
        if "meta.input_mean" in entries:
            nets.input_norm = (np.float32(entries["meta.input_mean"][0]), np.float32(entries["meta.input_std"][0]))
        for name, p in nets.named_parameters():
            if name not in entries:
                raise ValueError(f"checkpoint {path} is missing parameter {name}")
            if entries[name].shape != p.shape:
                raise ValueError(f"checkpoint parameter {name} has shape {entries[name].shape}, expected {p.shape}")
            p.data = entries[name].astype(dtype)
        return nets


def save_checkpoint(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    """Write ``OSAA1`` then, per entry: u32 name length, UTF-8 name, u32 rank,
    u32 extents, float32 values; all little-endian, values row-major."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not an OSAA1 checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    entries = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise ValueError(f"checkpoint {path} is truncated inside entry {name!r}")
            entries[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error:
        raise ValueError(f"checkpoint {path} is truncated") from None
    return entries

