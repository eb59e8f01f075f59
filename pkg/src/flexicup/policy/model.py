"""Diffusion-policy network: observation encoders, attention fusion, denoiser.

Per observation step the conditioning vector is
``[f_workspace | fused(f_central, f_peripheral) | f_state]``; ``H_o`` steps
are concatenated and fed, with the flattened noisy action chunk and a
sinusoidal step embedding, to a three-layer perceptron that predicts the
noise. The noisy chunk enters divided by its noise level sqrt(1 - abar_t)
and the step embedding carries the signal-to-noise ratio
sqrt(abar_t / (1 - abar_t)) next to the sinusoids; with both, the noise target
at small steps is an affine function of the inputs instead of a product.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .nn import MLP, ImageEncoder, Linear, MultiHeadSelfAttention, ParamStore, timestep_embedding, zero_grads

ABLATIONS = ("full", "no-attn", "no-peripheral", "no-central", "workspace-only")
ACTION_DIM = 6
STATE_DIM = 8
# fixed affine normalisation of s_t = [x, y, z, tilt, led, valve, pressure, attached]
STATE_OFFSET = (10.0, 10.0, 0.0, 0.0, 0.0, 0.0, 101.325, 0.0)
STATE_SCALE = (10.0, 10.0, 5.0, 15.0, 1.0, 1.0, 50.0, 1.0)
IMAGE_STREAMS = ("workspace", "central", "peripheral")
IMAGE_MIN_STD = 0.05


class ShapeError(ValueError):
    pass


def cosine_alphas_bar(T: int, s: float = 0.008) -> np.ndarray:
    """Cosine schedule normalised so that step 0 is noise-free."""
    if T < 2:
        raise ValueError("need at least two diffusion steps")
    t = np.arange(T, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    return np.clip(f / f[0], 1e-8, 1.0)


@dataclass(frozen=True)
class ObservationBundle:
    workspace_img: np.ndarray
    central_img: np.ndarray
    peripheral_img: np.ndarray
    state_vec: np.ndarray

    def __post_init__(self):
        for name in ("workspace_img", "central_img", "peripheral_img"):
            a = getattr(self, name)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ShapeError(f"{name} must be a square 2-D image, got {a.shape}")
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise ShapeError(f"{name} must be normalised to [0, 1]")
        if np.shape(self.state_vec) != (STATE_DIM,):
            raise ShapeError(f"state_vec must have length {STATE_DIM}")


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 32
    heads: int = 4
    history: int = 2      # H_o
    horizon: int = 8      # H_p
    img: int = 64
    channels: tuple = (8, 16, 16)
    hidden: int = 256
    t_embed: int = 32
    diffusion_steps: int = 50
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")

    @classmethod
    def hardware_scale(cls, **kw) -> "PolicyConfig":
        """512-d features, 8 heads, 8-step history, 48-step horizon."""
        return cls(**{"d": 512, "heads": 8, "history": 8, "horizon": 48, **kw})

    @classmethod
    def micro(cls, **kw) -> "PolicyConfig":
        """Tiny configuration for finite-difference gradient checks."""
        return cls(**{"d": 4, "heads": 2, "history": 2, "horizon": 2, "img": 8, "channels": (2, 2),
                      "hidden": 12, "t_embed": 4, **kw})

    @property
    def uses_central(self) -> bool:
        return self.ablation in ("full", "no-attn", "no-peripheral")

    @property
    def uses_peripheral(self) -> bool:
        return self.ablation in ("full", "no-attn", "no-central")

    @property
    def uses_attention(self) -> bool:
        return self.ablation in ("full", "no-peripheral", "no-central")

    @property
    def chunk_size(self) -> int:
        return self.horizon * ACTION_DIM

    @property
    def cond_size(self) -> int:
        return self.history * 3 * self.d


class DiffusionPolicy:
    def __init__(self, config: PolicyConfig | None = None):
        self.config = cfg = config or PolicyConfig()
        store = ParamStore(np.random.default_rng(cfg.seed))
        self.enc_ws = ImageEncoder(store, "enc_workspace", cfg.img, cfg.channels, cfg.d)
        self.enc_c = ImageEncoder(store, "enc_central", cfg.img, cfg.channels, cfg.d) if cfg.uses_central else None
        self.enc_p = (ImageEncoder(store, "enc_peripheral", cfg.img, cfg.channels, cfg.d)
                      if cfg.uses_peripheral else None)
        self.enc_s = MLP(store, "enc_state", (STATE_DIM, cfg.d, cfg.d))
        self.attn = None
        self.fuse_lin = None
        if cfg.ablation == "no-attn":
            self.fuse_lin = Linear(store, "fuse_linear", 2 * cfg.d, cfg.d, init="xavier")
        elif cfg.uses_attention:
            self.attn = MultiHeadSelfAttention(store, "attention", cfg.d, cfg.heads)
        n_in = cfg.cond_size + cfg.chunk_size + cfg.t_embed + 1
        self.denoiser = MLP(store, "denoiser", (n_in, cfg.hidden, cfg.hidden, cfg.chunk_size), last_init="xavier")
        self.params = store.params
        self.state_offset = np.array(STATE_OFFSET)
        self.state_scale = np.array(STATE_SCALE)
        # per-pixel image standardisation; identity until fitted on data
        self.buffers = {f"norm.{k}.{m}": np.full((cfg.img, cfg.img), 0.0 if m == "mean" else 1.0)
                        for k in IMAGE_STREAMS for m in ("mean", "std")}
        ab = cosine_alphas_bar(cfg.diffusion_steps)
        sd = np.sqrt(1.0 - ab)
        sd[0] = sd[1]  # step 0 is noise-free; reuse the smallest nonzero level
        self.noise_std = sd
        self.signal_ratio = np.sqrt(ab) / sd

    # -- bookkeeping -------------------------------------------------------
    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def param_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for k, v in self.params.items():
            mod = k.split(".")[0]
            out[mod] = out.get(mod, 0) + v.size
        return out

    def zero_biases(self):
        for k, v in self.params.items():
            if k.endswith(".bias"):
                v[...] = 0.0

    # -- observation encoding ------------------------------------------------
    def _encode_images(self, enc, imgs, caches, key):
        if enc is None:
            return np.zeros((imgs.shape[0], self.config.d))
        f, c = enc.forward(self.params, imgs)
        caches[key] = c
        return f

    def fit_normalizer(self, obs, min_std: float = IMAGE_MIN_STD):
        """Per-pixel mean and std of each image stream over a batch of observation histories."""
        for k in IMAGE_STREAMS:
            a = np.asarray(obs[k], dtype=np.float64)
            a = a.reshape(-1, *a.shape[-2:])
            self._check_img(a[0])
            self.buffers[f"norm.{k}.mean"] = a.mean(axis=0)
            self.buffers[f"norm.{k}.std"] = np.maximum(a.std(axis=0), min_std)

    def _normalise(self, key, imgs):
        return (imgs - self.buffers[f"norm.{key}.mean"]) / self.buffers[f"norm.{key}.std"]

    def encode(self, ws, central, peripheral, state):
        """Feature vectors for flat batches of observations (N, ...)."""
        caches = {}
        ws = self._normalise("workspace", ws)
        central = self._normalise("central", central)
        peripheral = self._normalise("peripheral", peripheral)
        f_ws = self._encode_images(self.enc_ws, ws, caches, "ws")
        f_c = self._encode_images(self.enc_c, central, caches, "c")
        f_p = self._encode_images(self.enc_p, peripheral, caches, "p")
        s = (np.asarray(state, dtype=np.float64) - self.state_offset) / self.state_scale
        f_s, caches["s"] = self.enc_s.forward(self.params, s)
        return (f_ws, f_c, f_p, f_s), caches

    def encode_observation(self, obs: ObservationBundle):
        """(f_workspace, f_central, f_peripheral, f_state) for one observation."""
        self._check_img(obs.workspace_img)
        feats, _ = self.encode(obs.workspace_img[None], obs.central_img[None], obs.peripheral_img[None],
                               np.asarray(obs.state_vec)[None])
        return tuple(f[0] for f in feats)

    def _check_img(self, a):
        if a.shape != (self.config.img, self.config.img):
            raise ShapeError(f"expected {self.config.img}x{self.config.img} images, got {a.shape}")

    def fuse(self, f_c, f_p):
        """Fused central/peripheral vector per the ablation, plus cache."""
        if self.attn is not None:
            tokens = np.stack([f_c, f_p], axis=1)  # (N, 2, d)
            y, ac = self.attn.forward(self.params, tokens)
            return y.mean(axis=1), ("attn", ac)
        if self.fuse_lin is not None:
            y, lc = self.fuse_lin.forward(self.params, np.concatenate([f_c, f_p], axis=1))
            return y, ("lin", lc)
        return np.zeros_like(f_c), ("none", None)

    def attention_fuse(self, f_central, f_peripheral):
        """Fused vector and per-head attention weights for single feature vectors."""
        if self.attn is None:
            raise ValueError(f"ablation {self.config.ablation!r} has no attention block")
        y, (_, cache) = self.fuse(np.asarray(f_central)[None], np.asarray(f_peripheral)[None])
        return y[0], MultiHeadSelfAttention.weights(cache)[0]

    # -- full forward / backward ---------------------------------------------
    def condition(self, obs):
        """Conditioning matrix (B, H_o * 3d) from stacked observation histories.

        ``obs`` is a dict with "workspace", "central", "peripheral" of shape
        (B, H_o, S, S) and "state" of shape (B, H_o, 8).
        """
        cfg = self.config
        ws = np.asarray(obs["workspace"], dtype=np.float64)
        b, h = ws.shape[:2]
        if h != cfg.history:
            raise ShapeError(f"expected history {cfg.history}, got {h}")
        flat = lambda a: np.asarray(a, dtype=np.float64).reshape(b * h, *np.shape(a)[2:])
        (f_ws, f_c, f_p, f_s), caches = self.encode(flat(obs["workspace"]), flat(obs["central"]),
                                                    flat(obs["peripheral"]), flat(obs["state"]))
        fused, fc = self.fuse(f_c, f_p)
        cond = np.concatenate([f_ws, fused, f_s], axis=1).reshape(b, h * 3 * cfg.d)
        return cond, (caches, fc, b, h)

    def forward(self, obs, x_t, t, cond=None):
        cfg = self.config
        b = x_t.shape[0]
        ccache = None
        if cond is None:
            cond, ccache = self.condition(obs)
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 0) or np.any(t >= cfg.diffusion_steps):
            raise ValueError(f"diffusion step out of range [0, {cfg.diffusion_steps})")
        temb = np.concatenate([timestep_embedding(t, cfg.t_embed), self.signal_ratio[t][:, None]], axis=1)
        if temb.shape[0] == 1 and b > 1:
            temb = np.repeat(temb, b, axis=0)
        sd = self.noise_std[t].reshape(-1, 1)
        inp = np.concatenate([cond, x_t.reshape(b, -1) / sd, temb], axis=1)
        out, dc = self.denoiser.forward(self.params, inp)
        return out.reshape(x_t.shape), (ccache, dc)

    def backward(self, cache, d_out):
        cfg = self.config
        ccache, dc = cache
        grads = zero_grads(self.params)
        b = d_out.shape[0]
        d_inp = self.denoiser.backward(self.params, grads, dc, d_out.reshape(b, -1))
        if ccache is None:
            return grads
        caches, fc, b, h = ccache
        d_cond = d_inp[:, :cfg.cond_size].reshape(b * h, 3, cfg.d)
        d_ws, d_fused, d_s = d_cond[:, 0], d_cond[:, 1], d_cond[:, 2]
        kind, c = fc
        d_c = d_p = None
        if kind == "attn":
            dy = np.repeat(d_fused[:, None, :] / 2.0, 2, axis=1)
            dtok = self.attn.backward(self.params, grads, c, dy)
            d_c, d_p = dtok[:, 0], dtok[:, 1]
        elif kind == "lin":
            dcat = self.fuse_lin.backward(self.params, grads, c, d_fused)
            d_c, d_p = dcat[:, :cfg.d], dcat[:, cfg.d:]
        self.enc_ws.backward(self.params, grads, caches["ws"], d_ws)
        if self.enc_c is not None:
            self.enc_c.backward(self.params, grads, caches["c"], d_c)
        if self.enc_p is not None:
            self.enc_p.backward(self.params, grads, caches["p"], d_p)
        self.enc_s.backward(self.params, grads, caches["s"], d_s)
        return grads

    def loss_and_grads(self, obs, x0, t, noise, schedule):
        """Noise-prediction MSE and its gradient for given diffusion steps and noise."""
        from .diffusion import forward_diffuse
        self.check_schedule(schedule)
        x_t = forward_diffuse(x0, t, noise, schedule)
        pred, cache = self.forward(obs, x_t, t)
        diff = pred - noise
        loss = float(np.mean(diff ** 2))
        grads = self.backward(cache, 2.0 * diff / diff.size)
        return loss, grads

    def check_schedule(self, schedule):
        if schedule.T != self.config.diffusion_steps:
            raise ValueError(f"schedule has {schedule.T} steps, policy was built for {self.config.diffusion_steps}")

    # -- persistence -----------------------------------------------------------
    def save(self, path):
        """Write little-endian float64 parameters plus a JSON sidecar header."""
        path = Path(path)
        names = list(self.params)
        bufs = list(self.buffers)
        header = {"format": "flexicup-policy", "version": 1, "config": _config_dict(self.config),
                  "layers": [{"name": k, "shape": list(self.params[k].shape)} for k in names],
                  "buffers": [{"name": k, "shape": list(self.buffers[k].shape)} for k in bufs]}
        with open(path, "wb") as fh:
            for k in names:
                fh.write(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
            for k in bufs:
                fh.write(np.ascontiguousarray(self.buffers[k], dtype="<f8").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(header, indent=1))

    @classmethod
    def load(cls, path) -> "DiffusionPolicy":
        path = Path(path)
        side = Path(str(path) + ".json")
        if not path.exists() or not side.exists():
            raise FileNotFoundError(f"parameter file {path} or its sidecar is missing")
        header = json.loads(side.read_text())
        cfg = _config_from(header["config"])
        pol = cls(cfg)
        raw = np.frombuffer(path.read_bytes(), dtype="<f8")
        off = 0
        for store, key in ((pol.params, "layers"), (pol.buffers, "buffers")):
            for layer in header.get(key, []):
                name, shape = layer["name"], tuple(layer["shape"])
                if name not in store or store[name].shape != shape:
                    raise ShapeError(f"{key[:-1]} {name}{shape} does not match the configuration")
                n = int(np.prod(shape))
                if off + n > raw.size:
                    raise ShapeError("parameter file is shorter than its header")
                store[name][...] = raw[off:off + n].reshape(shape)
                off += n
        if off != raw.size:
            raise ShapeError("parameter file length does not match its header")
        return pol


def _config_dict(cfg: PolicyConfig) -> dict:
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    return d


def _config_from(d: dict) -> PolicyConfig:
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    return PolicyConfig(**d)


def with_ablation(cfg: PolicyConfig, ablation: str) -> PolicyConfig:
    return replace(cfg, ablation=ablation)
