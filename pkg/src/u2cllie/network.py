"""U-shaped assembly, checkpoint format, and the small-scale trainer.

Encoder levels run the scan block and downsample by strided 2x2 convs; the
bottleneck runs the uncertainty block once (global attention stays cheap at
the coarsest grid); decoder levels upsample, fuse the skip, and run the
calibration block. The network predicts a residual on top of the
luminance-boosted input and clamps to [0, 1].

Checkpoint layout: magic "U2CW", one version byte, a 4-byte little-endian
header length, a UTF-8 JSON header (config echo plus a name/shape/offset
manifest), then the raw little-endian float32 payload.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import blocks, engine as en
from .causal import AscParams, NecoParams, asc_forward, init_asc, init_neco, neco_forward
from .engine import EngineError, Params, ShapeError, Tensor
from .image_io import luminance_diff_target, rgb_to_ycrcb, crop_flip_augment
from .len_net import LenParams, apply_luminance_prior, init_len, len_forward
from .objective import LossWeights, make_feature_extractor, psnr, ssim_metric, total_loss
from .uad import UadParams, init_uad, uad_forward

CHECKPOINT_MAGIC = b"U2CW"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, truncated, or config-incompatible checkpoint file."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    depth: int = 3
    multipliers: tuple = (1, 2, 4)
    d_head: int = 64
    asc_k: int = 8
    asc_patch: int = 5
    dropout: float = 0.1
    seed: int = 0
    enable_len: bool = True
    enable_neco: bool = True
    enable_uad: bool = True
    enable_asc: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise EngineError(f"depth must be >= 1, got {self.depth}")
        if len(self.multipliers) != self.depth:
            raise EngineError(f"need {self.depth} multipliers, got {self.multipliers}")
        if min(self.level_channels()) < 2:
            raise EngineError("all channel counts must be >= 2")

    def level_channels(self):
        return tuple(self.base_channels * m for m in self.multipliers)

    def as_dict(self):
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "multipliers" in d:
            d["multipliers"] = tuple(d["multipliers"])
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    base = dict(base_channels=8, depth=2, multipliers=(1, 2), d_head=8)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Model:
    config: ModelConfig
    arrays: dict

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def _module_configs(config: ModelConfig):
    ch = config.level_channels()
    bottleneck = ch[-1]
    necos = [NecoParams(channels=ch[i], prefix=f"enc{i}.neco") for i in range(config.depth)]
    ascs = [AscParams(channels=ch[i], k=config.asc_k, patch=config.asc_patch,
                      prefix=f"dec{i}.asc") for i in range(config.depth)]
    uad = UadParams(channels=bottleneck, d_head=config.d_head,
                    dropout=config.dropout, prefix="uad")
    len_cfg = LenParams(channels=config.base_channels, prefix="len")
    return len_cfg, necos, uad, ascs


def _component_rng(seed: int, name: str) -> np.random.Generator:
    """One independent stream per named component.

    Keyed streams keep the shared skeleton bit-identical across ablation
    variants: toggling a module on or off must not shift the draws of any
    other component.
    """
    key = zlib.crc32(name.encode("ascii"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, key))))


def build_model(config: ModelConfig) -> Model:
    """Seeded deterministic initialization of every parameter the config needs.

    Each optional block is wired in through a zero 1x1 injection conv, so a
    freshly built model computes exactly the same function as one built with
    the block disabled. Training then opens only the branches that help.
    """
    ch = config.level_channels()
    bottleneck = ch[-1]
    len_cfg, necos, uad_cfg, ascs = _module_configs(config)
    store = {}

    def rng_for(name):
        return _component_rng(config.seed, name)

    if config.enable_len:
        store.update(init_len(len_cfg, rng_for("len")))
        store["boost.inj.w"] = blocks.zeros(3, 3, 1, 1)
    blocks.init_conv(store, rng_for("stem"), "stem", ch[0], 3, 3)
    for i in range(config.depth):
        if config.enable_neco:
            store.update(init_neco(necos[i], rng_for(f"enc{i}.neco")))
            store[f"enc{i}.inj.w"] = blocks.zeros(ch[i], ch[i], 1, 1)
        nxt = ch[i + 1] if i + 1 < config.depth else bottleneck
        blocks.init_conv(store, rng_for(f"down{i}"), f"down{i}", nxt, ch[i], 2)
    if config.enable_uad:
        store.update(init_uad(uad_cfg, rng_for("uad")))
        store["uad.inj.w"] = blocks.zeros(bottleneck, bottleneck, 1, 1)
    prev = bottleneck
    for i in range(config.depth - 1, -1, -1):
        blocks.init_conv(store, rng_for(f"up{i}"), f"up{i}", ch[i], prev, 1)
        blocks.init_conv(store, rng_for(f"skipfuse{i}"), f"skipfuse{i}", ch[i], 2 * ch[i], 1)
        if config.enable_asc:
            store.update(init_asc(ascs[i], rng_for(f"dec{i}.asc")))
            store[f"dec{i}.inj.w"] = blocks.zeros(ch[i], ch[i], 1, 1)
        prev = ch[i]
    # zero residual head: the first forward pass returns the input untouched;
    # a random head saturates the output clamp and stalls descent
    store["head.w"] = blocks.zeros(3, ch[0], 3, 3)
    store["head.b"] = blocks.zeros(3)
    return Model(config=config, arrays=store)


def forward(model: Model, i_low: Tensor, tape=None, dtype=None, train: bool = False,
            dropout_seed=None, entropy_scale=None, want_aux: bool = False):
    """Run the network; with want_aux also return prior and entropy tensors."""
    config = model.config
    if i_low.ndim != 4 or i_low.shape[1] != 3:
        raise ShapeError(f"expected [N,3,H,W] input, got {i_low.shape}")
    n, _, h, w = i_low.shape
    factor = 2 ** config.depth
    if h % factor or w % factor:
        raise ShapeError(
            f"extents {h}x{w} must divide by {factor}; pad by "
            f"({(-h) % factor}, {(-w) % factor}) (reflect) and crop the output back")
    p = Params(model.arrays, tape, dtype=dtype)
    len_cfg, necos, uad_cfg, ascs = _module_configs(config)

    prior = None
    x_in = i_low
    if config.enable_len:
        prior = len_forward(i_low, p, len_cfg)
        boosted = apply_luminance_prior(i_low, prior)
        x_in = en.add(i_low, en.conv2d(boosted, p("boost.inj.w")))

    x = blocks.conv(x_in, p, "stem", pad=1)
    skips = []
    for i in range(config.depth):
        if config.enable_neco:
            x = en.add(x, en.conv2d(neco_forward(x, p, necos[i]), p(f"enc{i}.inj.w")))
        skips.append(x)
        x = blocks.conv(x, p, f"down{i}", stride=2)

    entropy = None
    if config.enable_uad:
        att, uad_aux = uad_forward(x, p, uad_cfg, entropy_scale=entropy_scale,
                                   train=train, dropout_seed=dropout_seed, want_aux=True)
        entropy = uad_aux["entropy"]
        x = en.add(x, en.conv2d(att, p("uad.inj.w")))

    for i in range(config.depth - 1, -1, -1):
        x = blocks.conv(en.upsample_nearest(x), p, f"up{i}")
        x = blocks.conv(en.concat([x, skips[i]], axis=1), p, f"skipfuse{i}")
        if config.enable_asc:
            x = en.add(x, en.conv2d(asc_forward(x, p, ascs[i]), p(f"dec{i}.inj.w")))

    delta = blocks.conv(x, p, "head", pad=1)
    out = en.clamp(en.add(x_in, delta), 0.0, 1.0)
    if want_aux:
        return out, {"prior": prior, "entropy": entropy, "boosted": x_in}
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    names = sorted(model.arrays)
    manifest = []
    offset = 0
    chunks = []
    for name in names:
        arr = np.asarray(model.arrays[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    header = json.dumps({"config": model.config.as_dict(), "manifest": manifest},
                        sort_keys=True).encode("utf-8")
    blob = (CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION])
            + len(header).to_bytes(4, "little") + header + b"".join(chunks))
    Path(path).write_bytes(blob)


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if raw[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {raw[4]}")
    header_len = int.from_bytes(raw[5:9], "little")
    try:
        header = json.loads(raw[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config.as_dict() != stored.as_dict():
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    payload = raw[9 + header_len:]
    expected = 0
    for entry in sorted(header["manifest"], key=lambda e: e["offset"]):
        if entry["offset"] != expected:
            raise CheckpointError(f"{path}: manifest offsets do not tile the payload "
                                  f"(gap before {entry['name']})")
        expected += int(np.prod(entry["shape"], dtype=np.int64)) * 4 if entry["shape"] else 4
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest says {expected}")
    arrays = {}
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + size * 4], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32).copy()
    reference = build_model(stored)
    if set(arrays) != set(reference.arrays):
        raise CheckpointError(f"{path}: parameter names do not match the config")
    for name, arr in arrays.items():
        if arr.shape != reference.arrays[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    return Model(config=stored, arrays=arrays)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 200
    lr: float = 2.5e-4
    beta1: float = 0.95
    beta2: float = 0.99
    eps: float = 1e-8
    milestones: tuple = (0.6, 0.85)
    lr_factor: float = 0.5
    crop: int = 32
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    bins: int = 32
    extractor_seed: int = 1234


@dataclass
class TrainState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, arrays: dict) -> "TrainState":
        return cls(step=0,
                   m={k: np.zeros_like(a) for k, a in arrays.items()},
                   v={k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(arrays: dict, grads: dict, state: TrainState, lr: float,
              beta1: float, beta2: float, eps: float) -> None:
    """One in-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        g32 = g.astype(np.float32, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g32
        v *= beta2
        v += (1.0 - beta2) * (g32 * g32)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        arrays[name] -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))


def _step_seeds(seed: int, step: int):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(step,))
    pick, crop_seed, drop_seed = (int(x) for x in ss.generate_state(3))
    return pick, crop_seed, drop_seed


def _pair_tensors(low: np.ndarray, high: np.ndarray):
    low_t = Tensor(low[None])
    high_t = Tensor(high[None])
    target = luminance_diff_target(rgb_to_ycrcb(high).y, rgb_to_ycrcb(low).y)
    return low_t, high_t, Tensor(target[None, None])


def lr_at(tcfg: TrainerConfig, step: int) -> float:
    cuts = [int(round(f * tcfg.steps)) for f in tcfg.milestones]
    return tcfg.lr * tcfg.lr_factor ** sum(step >= c for c in cuts)


def train_toy(model: Model, dataset, tcfg: TrainerConfig):
    """Seeded small-scale training; returns the per-step loss history.

    dataset: list of (low, high) float arrays, each [3,H,W] in [0,1]. The
    model's arrays are updated in place.
    """
    if not dataset:
        raise EngineError("dataset is empty")
    extractor = make_feature_extractor(seed=tcfg.extractor_seed)
    state = TrainState.fresh(model.arrays)
    history = []
    for step in range(tcfg.steps):
        pick, crop_seed, drop_seed = _step_seeds(tcfg.seed, step)
        low, high = dataset[pick % len(dataset)]
        low, high = crop_flip_augment((low, high), tcfg.crop, seed=crop_seed)
        low_t, high_t, target = _pair_tensors(low, high)
        tape = en.Tape()
        out, aux = forward(model, low_t, tape=tape, train=True,
                           dropout_seed=drop_seed, want_aux=True)
        total, report = total_loss(out, high_t, aux["prior"], target,
                                   weights=tcfg.loss_weights, extractor=extractor,
                                   bins=tcfg.bins)
        if not np.isfinite(report.total):
            raise DivergenceError(step)
        grads = tape.backward(total)
        adam_step(model.arrays, grads, state, lr_at(tcfg, step),
                  tcfg.beta1, tcfg.beta2, tcfg.eps)
        history.append(report)
    return history


def evaluate(model: Model, dataset):
    """Mean PSNR/SSIM of enhanced outputs and of the untouched inputs."""
    rows = []
    for low, high in dataset:
        out = forward(model, Tensor(low[None])).data[0]
        rows.append({
            "psnr_out": psnr(out, high),
            "psnr_in": psnr(low, high),
            "ssim_out": ssim_metric(out[None], high[None]),
        })
    return {
        "psnr_out": float(np.mean([r["psnr_out"] for r in rows])),
        "psnr_in": float(np.mean([r["psnr_in"] for r in rows])),
        "psnr_gain": float(np.mean([r["psnr_out"] - r["psnr_in"] for r in rows])),
        "ssim_out": float(np.mean([r["ssim_out"] for r in rows])),
        "count": len(rows),
    }


# ---------------------------------------------------------------------------
# footprint


def flops_estimate(config: ModelConfig, h: int, w: int) -> float:
    """Static multiply-accumulate estimate (in GFLOPs, 2 ops per MAC).

    Counts convolutions, channel linears, attention matmuls, the four scans,
    and the FFT stages; indexing/activation traffic is ignored.
    """
    ch = config.level_channels()
    cb = ch[-1]
    total = 0.0

    def conv(cout, cin, k, hh, ww, groups=1):
        return 2.0 * cout * (cin / groups) * k * k * hh * ww

    if config.enable_len:
        c1 = config.base_channels
        total += conv(c1, 3, 1, h, w) + conv(c1, 1, 3, h, w)
        total += 6 * conv(c1, c1, 3, h, w) + conv(1, c1, 3, h, w)
    total += conv(ch[0], 3, 3, h, w)
    hh, ww = h, w
    for i in range(config.depth):
        c = ch[i]
        if config.enable_neco:
            total += 2 * conv(c, 1, 3, hh, ww) * 1  # depthwise pair
            total += 3 * conv(c, c, 1, hh, ww)       # in/gate/out channel mixes
            total += 2.0 * 4 * 8 * c * hh * ww       # four directional scans
        else:
            total += conv(c, 1, 3, hh, ww) + conv(c, c, 1, hh, ww)
        nxt = ch[i + 1] if i + 1 < config.depth else cb
        total += conv(nxt, c, 2, hh // 2, ww // 2)
        hh, ww = hh // 2, ww // 2
    if config.enable_uad:
        tokens = hh * ww
        d = config.d_head
        total += 2.0 * 5 * cb * tokens * max(np.log2(tokens), 1)      # fft pair
        total += conv(cb, cb, 3, hh, ww) + conv(cb, 2 * cb, 1, hh, ww)
        total += 2 * conv(cb, cb, 1, hh, ww)                          # spatial branch
        total += 3 * 2.0 * d * cb * tokens                            # q/k/v projections
        total += 2 * 2.0 * d * tokens * tokens                        # logits + mix
        total += 2.0 * (cb * d + d * d + cb * d) * tokens             # gate + l2g
        total += conv(2 * cb, 1, 3, hh, ww) + conv(2 * cb, 2 * cb, 1, hh, ww)
        total += conv(cb, 2 * cb, 1, hh, ww)
    else:
        total += conv(cb, 1, 3, hh, ww) + conv(cb, cb, 1, hh, ww)
    prev = cb
    for i in range(config.depth - 1, -1, -1):
        hh, ww = hh * 2, ww * 2
        c = ch[i]
        total += conv(c, prev, 1, hh, ww) + conv(c, 2 * c, 1, hh, ww)
        if config.enable_asc:
            kk = config.asc_k
            mid = max(c // 2, 4)
            total += 2.0 * c * c * kk * hh * ww                        # csco
            total += 2.0 * (mid * 2 * c + c * mid) * 3 * kk * hh * ww  # neighbor convs
            total += conv(c, 2 * c, 1, hh, ww)
        else:
            total += conv(c, 1, 3, hh, ww) + conv(c, c, 1, hh, ww)
        prev = c
    total += conv(3, ch[0], 3, h, w)
    return total / 1e9
