"""Conditional diffusion policy over wrench-pose action chunks.

An observation is a fixed-size point cloud plus a short tcp pose history.
The policy encodes the cloud with a per-point MLP followed by a
coordinate-wise max-pool, concatenates the flattened normalized history,
and conditions a residual-MLP denoiser on the result. Actions are chunks
of ``horizon`` steps, each step 15 numbers: position (3), rotation as the
first two rotation-matrix columns (6), force (3), torque (3), with the
wrench expressed in the tcp frame.

Denoising diffusion with a linear beta schedule and an epsilon-prediction
MSE objective; gradients are written out by hand and checked against
central finite differences in the test suite. Training uses the in-repo
adaptive-moment optimizer, no external learning framework.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import FrameError, ParseError, TrainingDivergedError, ValidationError
from .nn import Adam, linear_init, swish, swish_grad, timestep_embedding
from .transforms import Frame, Pose, Wrench, quat_from_rot6d, rot6d_from_quat

_STD_FLOOR = 1e-8


@dataclass
class PolicyConfig:
    horizon: int = 20           # action steps per chunk
    action_dim: int = 15        # pos 3 + rot6d 6 + force 3 + torque 3
    history: int = 2            # tcp poses fed as condition
    cloud_size: int = 10_000    # points per observation
    enc_widths: tuple = (64, 128, 256)
    hidden: int = 512
    n_res_blocks: int = 3
    temb_dim: int = 64
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    predict_target: str = "epsilon"  # "epsilon" or "sample"

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.action_dim

    @property
    def cond_dim(self) -> int:
        return self.enc_widths[-1] + self.history * 9

    def __post_init__(self):
        if self.predict_target not in ("epsilon", "sample"):
            raise ValidationError(f"unknown predict_target {self.predict_target!r}")
        # params files hold float32 tensors, so snap the schedule endpoints
        # to float32 here; a saved-then-loaded config is then equal to this
        # one and rebuilds the beta schedule bit for bit
        self.beta_start = float(np.float32(self.beta_start))
        self.beta_end = float(np.float32(self.beta_end))


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 2
    learning_rate: float = 1e-3
    noise_draws: int = 8        # (t, eps) pairs per sample per step
    seed: int = 0
    shuffle: bool = True
    advance: int = 3            # action window lead used when chunking demos


@dataclass
class Observation:
    """What the policy sees at one decision point."""

    cloud: PointCloud
    tcp_history: np.ndarray  # (history, 7) pose arrays, oldest first

    def __post_init__(self):
        self.tcp_history = np.asarray(self.tcp_history, dtype=float)
        if self.tcp_history.ndim != 2 or self.tcp_history.shape[1] != 7:
            raise ValidationError(
                f"tcp_history must be (h, 7) pose rows, got {self.tcp_history.shape}")

    def validate_for(self, cfg: PolicyConfig):
        if self.cloud.count != cfg.cloud_size:
            raise ValidationError(
                f"observation cloud has {self.cloud.count} points, policy expects {cfg.cloud_size}")
        if self.tcp_history.shape[0] != cfg.history:
            raise ValidationError(
                f"observation history has {self.tcp_history.shape[0]} poses, policy expects {cfg.history}")


@dataclass
class ActionChunk:
    """A fixed-horizon plan: one pose target and one tcp wrench per step."""

    poses: list            # Pose, base frame
    wrenches: list         # Wrench, tcp frame
    start_index: int = 0   # dataset step where this chunk begins

    def __post_init__(self):
        if len(self.poses) != len(self.wrenches):
            raise ValidationError("chunk pose and wrench counts differ")
        for w in self.wrenches:
            if w.frame != Frame.TCP:
                raise FrameError("chunk wrenches must be tcp-frame")

    def __len__(self) -> int:
        return len(self.poses)


def chunk_to_array(chunk: ActionChunk) -> np.ndarray:
    rows = []
    for p, w in zip(chunk.poses, chunk.wrenches):
        rows.append(np.concatenate([p.position, rot6d_from_quat(p.quat), w.force, w.torque]))
    return np.stack(rows)


def chunk_from_array(arr: np.ndarray, start_index: int = 0) -> ActionChunk:
    arr = np.asarray(arr, dtype=float)
    poses, wrenches = [], []
    for row in arr:
        poses.append(Pose(row[:3], quat_from_rot6d(row[3:9])))
        wrenches.append(Wrench(row[9:12], row[12:15], Frame.TCP))
    return ActionChunk(poses, wrenches, start_index)


def history_to_vec(history: np.ndarray) -> np.ndarray:
    """Flatten (h, 7) pose rows into (h * 9,) position + rot6d features."""
    out = []
    for row in history:
        out.append(row[:3])
        out.append(rot6d_from_quat(row[3:]))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def compute_norm_stats(actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and effective std over (num_chunks, horizon, dim).

    Dimensions that never vary get std 1 so they normalize to zero instead
    of blowing up; the stored std is therefore always > 1e-8. Both arrays
    are rounded to float32 so a policy loaded back from disk normalizes
    exactly the way training did.
    """
    flat = actions.reshape(-1, actions.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > _STD_FLOOR, std, 1.0)
    return (mean.astype(np.float32).astype(np.float64),
            std.astype(np.float32).astype(np.float64))


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return x * std + mean


# ---------------------------------------------------------------------------
# diffusion schedule
# ---------------------------------------------------------------------------

class DiffusionSchedule:
    """Linear-beta DDPM bookkeeping, 1-indexed over t = 1..n_steps.

    Index 0 is the clean-data sentinel (alpha_bar = 1), which makes the
    posterior variance at t = 1 exactly zero: the last ancestral step adds
    no noise.
    """

    def __init__(self, n_steps: int, beta_start: float, beta_end: float):
        self.n_steps = int(n_steps)
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, self.n_steps)])
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        self.betas = betas
        self.alphas = alphas
        self.alpha_bar = alpha_bar
        self.sqrt_alpha_bar = np.sqrt(alpha_bar)
        self.sqrt_one_minus = np.sqrt(1.0 - alpha_bar)
        prev = alpha_bar[:-1]
        denom = 1.0 - alpha_bar[1:]
        self.post_coef_x0 = np.concatenate([[0.0], np.sqrt(prev) * betas[1:] / denom])
        self.post_coef_xt = np.concatenate([[0.0], np.sqrt(alphas[1:]) * (1.0 - prev) / denom])
        self.post_var = np.concatenate([[0.0], betas[1:] * (1.0 - prev) / denom])

    @staticmethod
    def from_config(cfg: PolicyConfig) -> "DiffusionSchedule":
        return DiffusionSchedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def init_policy_weights(cfg: PolicyConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    w = {}
    dims = (3,) + tuple(cfg.enc_widths)
    for i in range(len(dims) - 1):
        w[f"enc.w{i}"], w[f"enc.b{i}"] = linear_init(rng, dims[i], dims[i + 1])
    in_dim = cfg.chunk_dim + cfg.cond_dim + cfg.temb_dim
    w["den.win"], w["den.bin"] = linear_init(rng, in_dim, cfg.hidden)
    for i in range(cfg.n_res_blocks):
        w[f"den.wr{i}"], w[f"den.br{i}"] = linear_init(rng, cfg.hidden, cfg.hidden)
    w["den.wout"], w["den.bout"] = linear_init(rng, cfg.hidden, cfg.chunk_dim)
    w["den.wout"] *= 0.01  # start near zero so the first predictions are tame
    return w


def _encode_fwd(w: dict, pts: np.ndarray):
    """Per-point MLP then coordinate-wise max over points.

    Returns the pooled feature and the compact cache needed for backward:
    only the winning point rows matter, because the max routes gradient to
    them alone.
    """
    z0 = pts @ w["enc.w0"] + w["enc.b0"]
    h0 = swish(z0)
    z1 = h0 @ w["enc.w1"] + w["enc.b1"]
    h1 = swish(z1)
    z2 = h1 @ w["enc.w2"] + w["enc.b2"]
    h2 = swish(z2)
    feat = h2.max(axis=1)
    win = h2.argmax(axis=1)  # (B, C) winning point per channel
    b_idx = np.arange(pts.shape[0])[:, None]
    c_idx = np.arange(feat.shape[1])[None, :]
    cache = {
        "x": pts[b_idx, win],
        "z0": z0[b_idx, win],
        "h0": h0[b_idx, win],
        "z1": z1[b_idx, win],
        "h1": h1[b_idx, win],
        "z2c": z2[b_idx, win, c_idx],
    }
    return feat, cache


def _encode_bwd(w: dict, cache: dict, dfeat: np.ndarray) -> dict:
    ds2 = dfeat * swish_grad(cache["z2c"])                       # (B, C)
    g = {}
    g["enc.w2"] = np.einsum("bck,bc->kc", cache["h1"], ds2)
    g["enc.b2"] = ds2.sum(axis=0)
    dh1 = ds2[..., None] * w["enc.w2"].T[None, :, :]             # (B, C, 128)
    dz1 = dh1 * swish_grad(cache["z1"])
    g["enc.w1"] = np.einsum("bcj,bck->jk", cache["h0"], dz1)
    g["enc.b1"] = dz1.sum(axis=(0, 1))
    dh0 = dz1 @ w["enc.w1"].T
    dz0 = dh0 * swish_grad(cache["z0"])
    g["enc.w0"] = np.einsum("bcj,bck->jk", cache["x"], dz0)
    g["enc.b0"] = dz0.sum(axis=(0, 1))
    return g


def _denoiser_fwd(w: dict, u: np.ndarray, n_res: int):
    zin = u @ w["den.win"] + w["den.bin"]
    h = swish(zin)
    zs, hs = [], [h]
    for i in range(n_res):
        z = h @ w[f"den.wr{i}"] + w[f"den.br{i}"]
        h = h + swish(z)
        zs.append(z)
        hs.append(h)
    out = hs[-1] @ w["den.wout"] + w["den.bout"]
    return out, {"u": u, "zin": zin, "zs": zs, "hs": hs}


def _denoiser_bwd(w: dict, cache: dict, dout: np.ndarray, n_res: int):
    g = {}
    g["den.wout"] = cache["hs"][-1].T @ dout
    g["den.bout"] = dout.sum(axis=0)
    dh = dout @ w["den.wout"].T
    for i in reversed(range(n_res)):
        dz = dh * swish_grad(cache["zs"][i])
        g[f"den.wr{i}"] = cache["hs"][i].T @ dz
        g[f"den.br{i}"] = dz.sum(axis=0)
        dh = dh + dz @ w[f"den.wr{i}"].T
    dzin = dh * swish_grad(cache["zin"])
    g["den.win"] = cache["u"].T @ dzin
    g["den.bin"] = dzin.sum(axis=0)
    du = dzin @ w["den.win"].T
    return du, g


def encode_features(w: dict, pts: np.ndarray) -> np.ndarray:
    """Cloud feature for (B, N, 3) points; permutation-invariant over N."""
    feat, _ = _encode_fwd(w, pts)
    return feat


def loss_and_grads(w: dict, cfg: PolicyConfig, sched: DiffusionSchedule,
                   pts: np.ndarray, hist_vec: np.ndarray, x0n: np.ndarray,
                   t_idx: np.ndarray, eps: np.ndarray):
    """Diffusion training loss plus gradients for every weight.

    Args:
        pts: (B, N, 3) observation clouds.
        hist_vec: (B, history * 9) normalized pose histories.
        x0n: (B, chunk_dim) normalized flattened clean chunks.
        t_idx: (B, K) integer steps in 1..n_steps.
        eps: (B, K, chunk_dim) unit Gaussian draws.

    The (t, eps) draws are explicit arguments so the same loss is exactly
    reproducible, which the finite-difference gradient check relies on.
    """
    nb, nk = t_idx.shape
    d = cfg.chunk_dim
    feat, enc_cache = _encode_fwd(w, pts)
    cond = np.concatenate([feat, hist_vec], axis=1)

    sa = sched.sqrt_alpha_bar[t_idx][..., None]
    sb = sched.sqrt_one_minus[t_idx][..., None]
    xt = sa * x0n[:, None, :] + sb * eps
    if cfg.predict_target == "epsilon":
        target = eps
    else:
        target = np.broadcast_to(x0n[:, None, :], eps.shape)

    temb = timestep_embedding(t_idx, cfg.temb_dim)
    cond_rep = np.repeat(cond[:, None, :], nk, axis=1)
    u = np.concatenate([xt, cond_rep, temb], axis=2).reshape(nb * nk, -1)
    out, den_cache = _denoiser_fwd(w, u, cfg.n_res_blocks)

    diff = out - target.reshape(nb * nk, d)
    loss = float(np.mean(diff * diff))
    dout = (2.0 / diff.size) * diff
    du, grads = _denoiser_bwd(w, den_cache, dout, cfg.n_res_blocks)

    dcond = du[:, d:d + cfg.cond_dim].reshape(nb, nk, -1).sum(axis=1)
    dfeat = dcond[:, :cfg.enc_widths[-1]]
    grads.update(_encode_bwd(w, enc_cache, dfeat))
    return loss, grads


# ---------------------------------------------------------------------------
# trained policy container and serialization
# ---------------------------------------------------------------------------

@dataclass
class PolicyParams:
    config: PolicyConfig
    weights: dict
    action_mean: np.ndarray
    action_std: np.ndarray

    def __post_init__(self):
        self.action_mean = np.asarray(self.action_mean, dtype=float)
        self.action_std = np.asarray(self.action_std, dtype=float)
        if np.any(self.action_std <= _STD_FLOOR):
            raise ValidationError("normalization std must exceed 1e-8 per dimension")


_MAGIC = b"HYIL"
_VERSION = 1


def _round_f32(w: dict) -> dict:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in w.items()}


def save_params(path, params: PolicyParams) -> None:
    """Write named tensors: magic, version, count, then per tensor the
    name, shape, and little-endian float32 data."""
    cfg = params.config
    tensors = dict(params.weights)
    tensors["norm.action_mean"] = params.action_mean
    tensors["norm.action_std"] = params.action_std
    sched = DiffusionSchedule.from_config(cfg)
    tensors["schedule.betas"] = sched.betas[1:]
    tensors["config.scalars"] = np.array([
        cfg.horizon, cfg.action_dim, cfg.history, cfg.cloud_size,
        cfg.temb_dim, 1.0 if cfg.predict_target == "sample" else 0.0,
    ])
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_params(path) -> PolicyParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        off = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            tensors[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise ParseError(f"{path}: truncated or corrupt params file: {e}") from None
    if off != len(blob):
        raise ParseError(f"{path}: {len(blob) - off} trailing bytes after last tensor")

    for key in ("config.scalars", "norm.action_mean", "norm.action_std", "schedule.betas"):
        if key not in tensors:
            raise ParseError(f"{path}: missing tensor {key!r}")
    scal = tensors.pop("config.scalars")
    betas = tensors.pop("schedule.betas")
    mean = tensors.pop("norm.action_mean")
    std = tensors.pop("norm.action_std")
    enc_keys = sorted(k for k in tensors if k.startswith("enc.w"))
    cfg = PolicyConfig(
        horizon=int(scal[0]), action_dim=int(scal[1]), history=int(scal[2]),
        cloud_size=int(scal[3]), temb_dim=int(scal[4]),
        predict_target="sample" if scal[5] > 0.5 else "epsilon",
        enc_widths=tuple(int(tensors[k].shape[1]) for k in enc_keys),
        hidden=int(tensors["den.win"].shape[1]),
        n_res_blocks=sum(1 for k in tensors if k.startswith("den.wr")),
        diffusion_steps=len(betas),
        beta_start=float(betas[0]), beta_end=float(betas[-1]),
    )
    return PolicyParams(config=cfg, weights=tensors, action_mean=mean, action_std=std)


# ---------------------------------------------------------------------------
# training and sampling
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One training pair; the cloud may be inline or a .pc3 path."""

    history: np.ndarray          # (history, 7)
    actions: np.ndarray          # (horizon, action_dim)
    cloud: PointCloud = None
    cloud_path: str = None

    def points(self) -> np.ndarray:
        if self.cloud is not None:
            return self.cloud.points
        from .cloud import load_pc3
        return load_pc3(self.cloud_path).points


def item_from_pair(obs: Observation, chunk: ActionChunk) -> TrainItem:
    return TrainItem(history=obs.tcp_history, actions=chunk_to_array(chunk),
                     cloud=obs.cloud)


def train(items, cfg: PolicyConfig, tcfg: TrainConfig):
    """Fit the policy on (observation, chunk) pairs.

    Returns the trained ``PolicyParams`` (weights rounded to float32 so a
    save/load round trip is exact) and the per-epoch mean loss curve.

    Raises:
        TrainingDivergedError: loss became non-finite.
        ValidationError: empty dataset or inconsistent shapes.
    """
    items = list(items)
    if not items:
        raise ValidationError("training needs at least one item")
    actions = np.stack([it.actions for it in items])
    if actions.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ValidationError(
            f"actions shaped {actions.shape[1:]}, config wants {(cfg.horizon, cfg.action_dim)}")
    mean, std = compute_norm_stats(actions)
    x0n = normalize(actions, mean, std).reshape(len(items), -1)
    hist = np.stack([history_to_vec(it.history) for it in items])
    hist_n = normalize(hist, np.tile(mean[:9], cfg.history), np.tile(std[:9], cfg.history))

    rng = np.random.default_rng(tcfg.seed)
    weights = init_policy_weights(cfg, seed=int(rng.integers(2**31 - 1)))
    sched = DiffusionSchedule.from_config(cfg)
    opt = Adam(weights, lr=tcfg.learning_rate)

    n = len(items)
    curve = []
    for _ in range(tcfg.epochs):
        order = rng.permutation(n) if tcfg.shuffle else np.arange(n)
        total = 0.0
        for lo in range(0, n, tcfg.batch_size):
            sel = order[lo:lo + tcfg.batch_size]
            pts = np.stack([items[int(i)].points() for i in sel])
            t_idx = rng.integers(1, sched.n_steps + 1, size=(len(sel), tcfg.noise_draws))
            eps = rng.standard_normal((len(sel), tcfg.noise_draws, cfg.chunk_dim))
            loss, grads = loss_and_grads(
                weights, cfg, sched, pts, hist_n[sel], x0n[sel], t_idx, eps)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {len(curve) + 1}")
            opt.step(weights, grads)
            total += loss * len(sel)
        curve.append(total / n)

    params = PolicyParams(config=cfg, weights=_round_f32(weights),
                          action_mean=mean, action_std=std)
    return params, np.asarray(curve)


def sample_chunk(params: PolicyParams, obs: Observation, seed: int) -> ActionChunk:
    """Draw one action chunk by ancestral denoising, deterministic per seed.

    The sampled rotation coordinates are re-orthonormalized through the 6D
    decoding, so returned poses always carry unit quaternions.
    """
    cfg = params.config
    obs.validate_for(cfg)
    w = params.weights
    sched = DiffusionSchedule.from_config(cfg)
    rng = np.random.default_rng(seed)

    feat = encode_features(w, obs.cloud.points[None])
    hist = history_to_vec(obs.tcp_history)
    hist_n = normalize(hist, np.tile(params.action_mean[:9], cfg.history),
                       np.tile(params.action_std[:9], cfg.history))
    cond = np.concatenate([feat[0], hist_n])[None]

    x = rng.standard_normal((1, cfg.chunk_dim))
    for t in range(sched.n_steps, 0, -1):
        temb = timestep_embedding(np.array([t]), cfg.temb_dim)
        u = np.concatenate([x, cond, temb], axis=1)
        pred, _ = _denoiser_fwd(w, u, cfg.n_res_blocks)
        if cfg.predict_target == "epsilon":
            x0 = (x - sched.sqrt_one_minus[t] * pred) / sched.sqrt_alpha_bar[t]
        else:
            x0 = pred
        mean = sched.post_coef_x0[t] * x0 + sched.post_coef_xt[t] * x
        if t > 1:
            x = mean + np.sqrt(sched.post_var[t]) * rng.standard_normal((1, cfg.chunk_dim))
        else:
            x = mean

    arr = denormalize(x[0], np.tile(params.action_mean, cfg.horizon),
                      np.tile(params.action_std, cfg.horizon))
    return chunk_from_array(arr.reshape(cfg.horizon, cfg.action_dim))
