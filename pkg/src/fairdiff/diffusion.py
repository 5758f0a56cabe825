"""Denoising diffusion over boundary point clouds, one model per sensitive group."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .codec import BoundaryPointCloud
from .nn import Adam, Dense, Module, autograd as ag, checkpoint, sinusoidal_embed

log = logging.getLogger(__name__)


class MissingModelError(KeyError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    @property
    def beta_start(self):
        return float(self.betas[0])

    @property
    def beta_end(self):
        return float(self.betas[-1])

    def to_text(self):
        return f"T {self.T}\nbeta_start {self.beta_start:.17g}\nbeta_end {self.beta_end:.17g}\n"

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split() for line in text.strip().splitlines())
        return make_schedule(int(kv["T"]), float(kv["beta_start"]), float(kv["beta_end"]))


def make_schedule(T=100, beta_start=1e-4, beta_end=0.02):
    """Linear variance schedule ``beta_1..beta_T``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def _points(x):
    return x.points if isinstance(x, BoundaryPointCloud) else np.asarray(x, dtype=np.float64)


def _check_t(t, schedule):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of [1, {schedule.T}]: {t}")
    return t


def q_sample(x0, t, eps, schedule):
    """Closed-form forward marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is 1-based; for a batch ``(B, N, 3)`` it may be a length-B array.
    """
    x0 = _points(x0)
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars[t - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev, t, eps, schedule):
    """One forward transition ``q(x_t | x_{t-1})``."""
    b = schedule.betas[t - 1]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps


class Denoiser(Module):
    """Shared per-point MLP predicting the injected noise.

    Each point sees its coordinates and the time embedding; after two layers the
    per-point features are mean-pooled into a global feature that joins the
    time embedding and shape latent before the last hidden layer. Per-cloud
    inputs are projected once per cloud and broadcast over points, which is
    the same affine map as concatenating them to every point. All operations
    are per-point or symmetric, so the network is permutation equivariant.
    """

    def __init__(self, hidden=128, time_dim=32, latent_dim=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.time_dim = time_dim
        self.latent_dim = latent_dim
        self.inp = Dense(3, hidden, rng)
        self.inp_t = Dense(time_dim, hidden, rng)
        self.mid = Dense(hidden, hidden, rng)
        self.fuse = Dense(hidden, hidden, rng)
        self.fuse_ctx = Dense(hidden + time_dim + latent_dim, hidden, rng)
        self.out = Dense(hidden, 3, rng)

    def __call__(self, x_t, t, z=None):
        x = np.asarray(x_t, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        b, n, _ = x.shape
        temb = sinusoidal_embed(np.broadcast_to(np.asarray(t), (b,)), self.time_dim)
        tproj = ag.reshape(self.inp_t(temb), (b, 1, -1))
        h = ag.leaky_relu(ag.add(self.inp(x), tproj))
        h = ag.leaky_relu(self.mid(h))
        g = ag.mean(h, axis=1)
        if z is None:
            z = np.zeros((b, self.latent_dim))
        z = ag.as_tensor(z)
        if z.ndim == 1:
            z = ag.reshape(z, (1, -1))
        ctx = ag.concat([g, ag.as_tensor(temb), ag.broadcast_to(z, (b, self.latent_dim))], axis=-1)
        ctx = ag.reshape(self.fuse_ctx(ctx), (b, 1, -1))
        h = ag.leaky_relu(ag.add(self.fuse(h), ctx))
        out = self.out(h)
        return ag.reshape(out, (n, 3)) if squeeze else out


class ShapeEncoder(Module):
    """Per-point MLP mean-pooled into a single latent vector."""

    def __init__(self, latent_dim=16, hidden=64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.l1 = Dense(3, hidden, rng)
        self.l2 = Dense(hidden, latent_dim, rng)

    def __call__(self, x0):
        x = ag.as_tensor(_points(x0))
        h = ag.leaky_relu(self.l1(x))
        return ag.mean(self.l2(h), axis=-2)


def encode_shape(x0, encoder=None, latent_dim=16):
    """Shape latent for a cloud (or batch); zero vector when no encoder is given."""
    if encoder is None:
        pts = _points(x0)
        lead = pts.shape[:-2]
        return np.zeros(lead + (latent_dim,))
    return encoder(x0).data


def _predict(denoiser, x_t, t, z):
    out = denoiser(x_t, t, z)
    return out if isinstance(out, ag.Tensor) else ag.Tensor(out)


def training_loss(x0, denoiser, schedule, z, rng):
    """Noise-prediction MSE averaged over points and coordinates."""
    x0 = _points(x0)
    batch = x0[None] if x0.ndim == 2 else x0
    t = rng.integers(1, schedule.T + 1, size=len(batch))
    eps = rng.standard_normal(batch.shape)
    x_t = q_sample(batch, t, eps, schedule)
    pred = _predict(denoiser, x_t, t, z)
    if pred.shape != batch.shape:
        pred = ag.reshape(pred, batch.shape)
    return ag.mean(ag.square(ag.sub(pred, eps)))


def p_sample_step(x_t, t, denoiser, schedule, z, rng):
    """Ancestral step ``x_{t-1} ~ N(mu_theta(x_t, t, z), beta_t I)``; no noise at t = 1."""
    _check_t(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = _predict(denoiser, x_t, t, z).data.reshape(x_t.shape)
    if not np.all(np.isfinite(eps_hat)):
        bad = int(np.size(eps_hat) - np.isfinite(eps_hat).sum())
        raise SamplingError(f"denoiser produced {bad} non-finite values at t={t}")
    beta = schedule.betas[t - 1]
    alpha = 1.0 - beta
    abar = schedule.alpha_bars[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t > 1:
        return mean + np.sqrt(beta) * rng.standard_normal(x_t.shape)
    return mean


def reverse_chain(denoiser, schedule, z, shape, rng):
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        x = p_sample_step(x, t, denoiser, schedule, z, rng)
    return x


def snap_cloud(raw, z0, record=(0.0, 0.0, 1.0), group=None):
    """Snap z to +/-z0 by sign and re-centre/re-scale x, y to the unit box."""
    pts = np.array(raw, dtype=np.float64)
    pts[:, 2] = np.where(pts[:, 2] > 0, z0, -z0)
    xy = pts[:, :2] - pts[:, :2].mean(axis=0)
    extent = np.abs(xy).max()
    if extent > 0:
        xy = xy / extent
    pts[:, :2] = xy
    cx, cy, scale = record
    return BoundaryPointCloud(pts, (cx, cy), scale, z0, group)


def _decodable(cloud):
    n_cup = int(cloud.cup_mask.sum())
    return n_cup >= 3 and cloud.n - n_cup >= 3


def sample_many(denoiser, schedule, count, n_points=codec.DEFAULT_POINTS, z=None, rng=None,
                z0=codec.DEFAULT_Z0, records=None, group=None, max_retries=5):
    """Run ``count`` reverse chains jointly; clouds lacking either class are redrawn."""
    rng = rng if rng is not None else np.random.default_rng()
    latent_dim = getattr(denoiser, "latent_dim", 16)
    if z is None:
        z = np.zeros((count, latent_dim))
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = np.broadcast_to(z, (count, z.shape[0]))
    if records is None:
        records = np.tile([0.0, 0.0, 1.0], (count, 1))
    out = [None] * count
    todo = list(range(count))
    for _ in range(max_retries + 1):
        if not todo:
            break
        raw = reverse_chain(denoiser, schedule, z[todo], (len(todo), n_points, 3), rng)
        still = []
        for i, pts in zip(todo, raw):
            cloud = snap_cloud(pts, z0, records[i], group)
            if _decodable(cloud):
                out[i] = cloud
            else:
                still.append(i)
        todo = still
    if todo:
        raise SamplingError(f"{len(todo)} of {count} samples lacked a class after {max_retries} retries")
    return out


def sample(denoiser, schedule, z=None, n_points=codec.DEFAULT_POINTS, rng=None, z0=codec.DEFAULT_Z0,
           record=(0.0, 0.0, 1.0), group=None, max_retries=5):
    zz = None if z is None else np.asarray(z, dtype=np.float64).reshape(1, -1)
    return sample_many(denoiser, schedule, 1, n_points, zz, rng, z0, np.asarray([record]), group,
                       max_retries)[0]


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    hidden: int = 128
    time_dim: int = 32
    latent_dim: int = 16
    latent_mode: str = "zero"  # "zero" | "encoder"
    n_points: int = codec.DEFAULT_POINTS
    z0: float = codec.DEFAULT_Z0
    min_group_size: int = 5
    seed: int = 0


@dataclass
class GroupModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    records: np.ndarray  # (K, 3) normalisation records (cx, cy, scale) seen in training
    z0: float = codec.DEFAULT_Z0
    n_points: int = codec.DEFAULT_POINTS
    encoder: ShapeEncoder | None = None
    latent_bank: np.ndarray | None = None
    attribute: str | None = None
    group: str | None = None
    losses: list = field(default_factory=list)

    def sample(self, count, rng, max_retries=5):
        """Draw ``count`` clouds, each paired with a training normalisation record."""
        idx = rng.integers(0, len(self.records), size=count)
        z = None
        if self.encoder is not None and self.latent_bank is not None:
            z = self.latent_bank[rng.integers(0, len(self.latent_bank), size=count)]
        return sample_many(self.denoiser, self.schedule, count, self.n_points, z, rng, self.z0,
                           self.records[idx], self.group, max_retries)

    def to_arrays(self):
        arrays = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        if self.encoder is not None:
            arrays.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
            arrays["meta.latent_bank"] = self.latent_bank
        arrays["meta.z0"] = np.array(self.z0)
        arrays["meta.n_points"] = np.array(float(self.n_points))
        arrays["meta.time_dim"] = np.array(float(self.denoiser.time_dim))
        arrays["meta.records"] = np.asarray(self.records, dtype=np.float64)
        return arrays

    @classmethod
    def from_arrays(cls, arrays, schedule, attribute=None, group=None):
        time_dim = int(arrays["meta.time_dim"])
        hidden = arrays["denoiser.inp.weight"].shape[1]
        latent_dim = arrays["denoiser.fuse_ctx.weight"].shape[0] - hidden - time_dim
        den = Denoiser(hidden, time_dim, latent_dim)
        den.load_state_dict({k[9:]: v for k, v in arrays.items() if k.startswith("denoiser.")})
        enc = None
        bank = None
        if "encoder.l1.weight" in arrays:
            enc = ShapeEncoder(latent_dim, arrays["encoder.l1.weight"].shape[1])
            enc.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("encoder.")})
            bank = arrays["meta.latent_bank"]
        return cls(den, schedule, arrays["meta.records"], float(arrays["meta.z0"]),
                   int(arrays["meta.n_points"]), enc, bank, attribute, group)


def train_diffusion(clouds, config=None, rng=None, attribute=None, group=None, callback=None):
    """Fit one noise-prediction model on a list of :class:`BoundaryPointCloud`."""
    config = config or DiffusionConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    data = np.stack([c.points for c in clouds])
    records = np.array([[c.center[0], c.center[1], c.scale] for c in clouds])
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    init_rng = np.random.default_rng(rng.integers(2**63))
    den = Denoiser(config.hidden, config.time_dim, config.latent_dim, init_rng)
    params = {f"denoiser.{k}": p for k, p in den.named_parameters().items()}
    enc = None
    if config.latent_mode == "encoder":
        enc = ShapeEncoder(config.latent_dim, rng=init_rng)
        params.update({f"encoder.{k}": p for k, p in enc.named_parameters().items()})
    elif config.latent_mode != "zero":
        raise ValueError(f"unknown latent_mode {config.latent_mode!r}")
    opt = Adam(params, lr=config.lr)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(data), size=min(config.batch_size, len(data)))
        x0 = data[idx]
        z = enc(x0) if enc is not None else None
        loss = training_loss(x0, den, schedule, z, rng)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite diffusion loss at step {step}")
        ag.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if callback is not None:
            callback(step, losses[-1])
    bank = enc(data).data if enc is not None else None
    return GroupModel(den, schedule, records, config.z0, config.n_points, enc, bank,
                      attribute, group, losses)


class GroupModelRegistry:
    """Mapping ``(attribute, group) -> GroupModel``."""

    def __init__(self):
        self.models = {}

    def __len__(self):
        return len(self.models)

    def __contains__(self, key):
        return key in self.models

    def __iter__(self):
        return iter(self.models)

    def add(self, model):
        self.models[(model.attribute, model.group)] = model

    def get(self, attribute, group):
        try:
            return self.models[(attribute, group)]
        except KeyError:
            raise MissingModelError(f"no diffusion model trained for {attribute}={group}") from None

    def __getitem__(self, key):
        return self.get(*key)

    def groups(self, attribute):
        return sorted(g for a, g in self.models if a == attribute)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for (attribute, group), model in sorted(self.models.items()):
            stem = model_stem(attribute, group)
            checkpoint.save(directory / f"{stem}.fdnn", model.to_arrays())
            (directory / f"{stem}.sched").write_text(model.schedule.to_text())

    @classmethod
    def load(cls, directory):
        reg = cls()
        for path in sorted(Path(directory).glob("*.fdnn")):
            if "__" not in path.stem:
                continue
            attribute, group = path.stem.split("__", 1)
            sched = NoiseSchedule.from_text(path.with_suffix(".sched").read_text())
            reg.add(GroupModel.from_arrays(checkpoint.load(path), sched, attribute, group))
        return reg


def model_stem(attribute, group):
    for part in (attribute, group):
        if "/" in part or "__" in part or not part:
            raise ValueError(f"name {part!r} cannot be used in a model filename")
    return f"{attribute}__{group}"


def train_group_models(rows, attribute, config=None, groups=None, callback=None):
    """Train one model per group of ``attribute`` over the train rows of a manifest.

    ``rows`` need ``attributes``, ``mask`` (path) and ``split``. Groups smaller
    than ``config.min_group_size`` are skipped with a warning.
    """
    config = config or DiffusionConfig()
    rows = [r for r in rows if r.split == "train"]
    if not rows or any(attribute not in r.attributes for r in rows):
        raise KeyError(f"attribute {attribute!r} missing from manifest rows")
    by_group = {}
    for r in rows:
        by_group.setdefault(r.attributes[attribute], []).append(r)
    reg = GroupModelRegistry()
    master = np.random.default_rng(config.seed)
    for group in sorted(by_group):
        seed = master.integers(2**63)
        if groups is not None and group not in groups:
            continue
        members = by_group[group]
        if len(members) < config.min_group_size:
            log.warning("skipping %s=%s: %d rows < minimum %d", attribute, group, len(members),
                        config.min_group_size)
            continue
        clouds = [codec.encode_mask(codec.read_mask_png(r.mask), config.n_points, config.z0)
                  for r in members]
        cb = None if callback is None else (lambda s, v, g=group: callback(g, s, v))
        reg.add(train_diffusion(clouds, config, np.random.default_rng(seed), attribute, group, cb))
    return reg
