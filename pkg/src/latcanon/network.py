"""Encoder, decoder, linear classifier and linear canonicalizers.

Encoder: ``enc_blocks`` blocks of ``convs_per_block`` x (3x3 conv, batch norm,
leaky ReLU 0.1), each block followed by 2x2 max pool and dropout 0.5, then a
global spatial max pool down to the latent vector. The last conv outputs
``latent_dim`` channels.

Decoder: the latent is tiled to a small spatial seed and passed through
transposed convs (each doubling H and W) with batch norm + ReLU, and a final
transposed conv to ``image_channels`` followed by ReLU.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, functional as F, seeded_init
from .autodiff.init import generator

GROUPS = ("encoder", "decoder", "classifier", "canon", "rot_head")


@dataclass(frozen=True)
class ArchConfig:
    latent_dim: int = 64
    enc_blocks: int = 3
    convs_per_block: int = 3
    channels: int = 64
    dec_channels: tuple[int, ...] = (64, 64, 32)
    image_size: int = 32
    image_channels: int = 3
    profile: str = "paper"
    n_canon: int = 6
    n_classes: int = 10
    canon_affine: bool = False
    dropout: float = 0.5

    @classmethod
    def paper(cls, **kw) -> "ArchConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "ArchConfig":
        base = dict(latent_dim=16, enc_blocks=2, channels=16, dec_channels=(32, 32, 16),
                    image_size=16, dropout=0.1, profile="desk")
        base.update(kw)
        return cls(**base)

    @property
    def dec_seed_size(self) -> int:
        return self.image_size // 2 ** (len(self.dec_channels) + 1)

    def validate(self) -> None:
        if self.profile not in ("paper", "desk"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.image_size % 2 ** self.enc_blocks:
            raise ValueError(f"image_size {self.image_size} is not divisible by 2^{self.enc_blocks}")
        n_up = len(self.dec_channels) + 1
        if self.image_size % 2 ** n_up or self.dec_seed_size < 1:
            raise ValueError(f"image_size {self.image_size} cannot be reached by {n_up} doublings")
        if self.profile == "desk" and (self.latent_dim < 8 or self.image_size not in (16, 32)):
            raise ValueError("desk profile needs latent_dim >= 8 and image_size in {16, 32}")
        if self.canon_affine:
            raise ValueError("affine canonicalizers are not supported; canonicalizers are pure linear maps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dec_channels"] = list(self.dec_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["dec_channels"] = tuple(d["dec_channels"])
        return cls(**d)


@dataclass
class ModelBundle:
    cfg: ArchConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def is_frozen(self, name: str) -> bool:
        return self.group_of(name) in self.frozen

    def group(self, *groups: str) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if self.group_of(k) in groups}

    def trainable(self, groups) -> dict[str, Tensor]:
        return {k: p for k, p in self.group(*groups).items() if not self.is_frozen(k)}

    def canon(self, j: int) -> Tensor:
        if not 0 <= j < self.cfg.n_canon:
            raise ValueError(f"canonicalizer id {j} out of range [0, {self.cfg.n_canon})")
        return self.params[f"canon.{j}"]

    def clone(self) -> "ModelBundle":
        params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        return ModelBundle(self.cfg, params, {k: v.copy() for k, v in self.buffers.items()}, set(self.frozen))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reinit_group(self, group: str, seed: int) -> None:
        """Draw fresh values for one parameter group (e.g. a new classifier)."""
        fresh = build_model(self.cfg, seed)
        for k, p in fresh.group(group).items():
            self.params[k] = p


def _conv_names(cfg: ArchConfig):
    for b in range(cfg.enc_blocks):
        for c in range(cfg.convs_per_block):
            yield b, c, f"encoder.b{b}.c{c}"


def build_model(cfg: ArchConfig, seed: int = 0) -> ModelBundle:
    cfg.validate()
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    counter = iter(range(10_000))

    def init(shape, scheme="uniform_fan_in", fan=None):
        return seeded_init(shape, scheme, seed=_subseed(seed, next(counter)), fan=fan)

    n_convs = cfg.enc_blocks * cfg.convs_per_block
    in_ch = cfg.image_channels
    for i, (b, c, name) in enumerate(_conv_names(cfg)):
        out_ch = cfg.latent_dim if i == n_convs - 1 else cfg.channels
        params[f"{name}.w"] = init((out_ch, in_ch, 3, 3))
        params[f"{name}.b"] = init((out_ch,), fan=in_ch * 9)
        params[f"{name}.gamma"] = init((out_ch,), "ones")
        params[f"{name}.beta"] = init((out_ch,), "zeros")
        buffers[f"{name}.mean"] = np.zeros(out_ch, dtype=np.float32)
        buffers[f"{name}.var"] = np.ones(out_ch, dtype=np.float32)
        in_ch = out_ch

    chans = [cfg.latent_dim, *cfg.dec_channels, cfg.image_channels]
    for i in range(len(chans) - 1):
        name = f"decoder.t{i}"
        cin, cout = chans[i], chans[i + 1]
        params[f"{name}.w"] = init((cin, cout, 3, 3), fan=cout * 9)
        params[f"{name}.b"] = init((cout,), fan=cout * 9)
        if i < len(chans) - 2:
            params[f"{name}.gamma"] = init((cout,), "ones")
            params[f"{name}.beta"] = init((cout,), "zeros")
            buffers[f"{name}.mean"] = np.zeros(cout, dtype=np.float32)
            buffers[f"{name}.var"] = np.ones(cout, dtype=np.float32)

    params["classifier.w"] = init((cfg.latent_dim, cfg.n_classes))
    params["classifier.b"] = init((cfg.n_classes,), fan=cfg.latent_dim)
    params["rot_head.w"] = init((cfg.latent_dim, 4))
    params["rot_head.b"] = init((4,), fan=cfg.latent_dim)

    rng = generator(seed, 0xCA70)
    for j in range(cfg.n_canon):
        noise = rng.uniform(-0.01, 0.01, size=(cfg.latent_dim, cfg.latent_dim))
        params[f"canon.{j}"] = Tensor((np.eye(cfg.latent_dim) + noise).astype(np.float32), requires_grad=True)
    return ModelBundle(cfg, params, buffers)


def _subseed(seed: int, k: int) -> int:
    return (int(seed) * 1_000_003 + k) % 2**63


def _bn(m: ModelBundle, x: Tensor, name: str, mode: str) -> Tensor:
    return F.batchnorm2d(x, m.params[f"{name}.gamma"], m.params[f"{name}.beta"],
                         m.buffers[f"{name}.mean"], m.buffers[f"{name}.var"], mode)


def _as_input(x, m: ModelBundle) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    cfg = m.cfg
    want = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ValueError(f"input of shape {x.shape} does not match model geometry (N, {want[0]}, {want[1]}, {want[2]})")
    return x


def encode(m: ModelBundle, x, mode: str = "eval", seed: int = 0, step: int = 0) -> Tensor:
    """Image batch (N, C, H, W) -> latent z (N, latent_dim).

    Dropout masks are keyed by (seed, step, block) so a train-mode call is
    reproducible.
    """
    cfg = m.cfg
    h = _as_input(x, m)
    for b, c, name in _conv_names(cfg):
        h = F.conv2d(h, m.params[f"{name}.w"], m.params[f"{name}.b"])
        h = F.leaky_relu(_bn(m, h, name, mode), 0.1)
        if c == cfg.convs_per_block - 1:
            h = F.maxpool2d(h)
            rng = generator(seed, step, b, 0xD0) if mode == "train" else None
            h = F.dropout(h, cfg.dropout, mode, rng)
    return F.global_maxpool(h)


def decode(m: ModelBundle, z, mode: str = "eval") -> Tensor:
    cfg = m.cfg
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise ValueError(f"latent of shape {z.shape} does not match latent_dim {cfg.latent_dim}")
    h = F.tile_spatial(z, cfg.dec_seed_size)
    n_layers = len(cfg.dec_channels) + 1
    for i in range(n_layers):
        name = f"decoder.t{i}"
        h = F.conv2d_transpose(h, m.params[f"{name}.w"], m.params[f"{name}.b"])
        if i < n_layers - 1:
            h = _bn(m, h, name, mode)
        h = F.relu(h)
    return h


def classify(m: ModelBundle, z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] != m.cfg.latent_dim:
        raise ValueError(f"latent of shape {z.shape} does not match latent_dim {m.cfg.latent_dim}")
    return F.linear(z, m.params["classifier.w"], m.params["classifier.b"])


def rotation_logits(m: ModelBundle, z: Tensor) -> Tensor:
    return F.linear(z, m.params["rot_head.w"], m.params["rot_head.b"])


def encoder_param_count(cfg: ArchConfig) -> int:
    return sum(p.size for k, p in build_model(cfg, 0).group("encoder").items())


# ---------------------------------------------------------------------------
# LCCK checkpoints
# ---------------------------------------------------------------------------
#
# b"LCCK", u32 version, u32 meta length, utf-8 JSON meta (arch config, frozen
# groups, free-form extras), u32 record count, records, then the footer:
# b"ADAM", u64 step, u32 moment-record count, moment records.
# A record is: u16 name length, utf-8 name, u8 dtype tag (0 float32,
# 1 float64), u8 rank, u32 dims[rank], raw little-endian payload.

CK_MAGIC = b"LCCK"
CK_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAGS[arr.dtype]
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def _unpack_records(buf: bytes, pos: int, count: int):
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        tag, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dt = _DTYPES[tag]
        n = math.prod(dims)
        out[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
        pos += n * dt.itemsize
    return out, pos


def save_checkpoint(path, m: ModelBundle, optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    meta = {"arch": m.cfg.to_dict(), "frozen": sorted(m.frozen), "extra": extra or {}}
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays = m.state_arrays()
    parts = [CK_MAGIC, struct.pack("<II", CK_VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    parts += [_pack_record(k, v) for k, v in arrays.items()]
    opt = optimizer_state or {"t": 0, "m": {}, "v": {}}
    moments = [(f"m:{k}", v) for k, v in opt["m"].items()] + [(f"v:{k}", v) for k, v in opt["v"].items()]
    parts += [b"ADAM", struct.pack("<QI", int(opt["t"]), len(moments))]
    parts += [_pack_record(k, v) for k, v in moments]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelBundle, dict, dict]:
    """Returns (model, optimizer state, extra metadata)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CK_MAGIC:
        raise ValueError(f"{path}: not an LCCK checkpoint")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != CK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf[12:12 + meta_len].decode("utf-8"))
    pos = 12 + meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    arrays, pos = _unpack_records(buf, pos + 4, count)
    if buf[pos:pos + 4] != b"ADAM":
        raise ValueError(f"{path}: missing optimizer footer")
    step, n_mom = struct.unpack_from("<QI", buf, pos + 4)
    moments, pos = _unpack_records(buf, pos + 16, n_mom)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("buffer:")}
    buffers = {k[len("buffer:"):]: v for k, v in arrays.items() if k.startswith("buffer:")}
    model = ModelBundle(ArchConfig.from_dict(meta["arch"]), params, buffers, set(meta["frozen"]))
    opt = {"t": int(step),
           "m": {k[2:]: v for k, v in moments.items() if k.startswith("m:")},
           "v": {k[2:]: v for k, v in moments.items() if k.startswith("v:")}}
    return model, opt, meta["extra"]


def snapshot(m: ModelBundle) -> ModelBundle:
    return copy.deepcopy(m)
