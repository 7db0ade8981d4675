"""Joint training of the rough-fill model and the residual denoiser.

Per batch: windows are cut at random offsets, artificial targets are drawn
from the visible cells (out-of-sample mode) or taken from the dataset's
annotated targets (in-sample mode), the rough fill produces the residual
target and condition, a diffusion step and noise are drawn, and one Adam
step is taken on

    L_joint = L_simple + lambda * L_init

with L_simple the masked mean squared noise error and L_init the rough-fill
error.  Gradients flow into the fill model through the residual, the
condition, and L_init unless it is frozen.  Everything is driven by one
explicit RNG, so a fixed config and seed reproduce checkpoints bit-exactly.

Ablation flags:
  no_cond_forward    condition zeroed in the forward marginal and samplers
                     (the denoiser still sees it)
  no_residual        the diffusion target is the data itself; the rough fill
                     drops out of the target and the sampler's combination
                     but still provides the condition
  freeze_initial     no gradients into the fill model
  skip_pretrain      fill model keeps its initialization
  predict_x0         the network outputs the clean residual instead of noise
  flip_residual_sign negates the residual convention end to end
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import denoiser as dn
from . import initial as ini
from .errors import ConfigError, DataError, NumericError
from .forward import q_sample
from .schedule import NoiseSchedule, build_linear_schedule

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainResult",
    "Adam",
    "pretrain_initial",
    "train_joint",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    # schedule
    t_steps: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.2
    # optimization
    lam: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 16
    n_window: int = 24
    seed: int = 0
    # denoiser
    d: int = 32
    head_count: int = 4
    conv_width: int = 3
    # initial stage
    strategy: str = "node_mean"
    init_hidden: int = 16
    pretrain_epochs: int = 10
    init_norm: str = "l1"
    # masking during training
    mask_mode: str = "out_of_sample"
    target_p: float = 0.25
    target_protocol: str = "point"
    block_p: float = 0.0015
    block_len_min: int = 1
    block_len_max: int = 4
    steps_per_hour: int = 1
    # ablation flags
    no_cond_forward: bool = False
    no_residual: bool = False
    freeze_initial: bool = False
    skip_pretrain: bool = False
    predict_x0: bool = False
    flip_residual_sign: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("loss balance must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.t_steps < 1:
            raise ConfigError("diffusion step count must be >= 1")
        if self.mask_mode not in ("in_sample", "out_of_sample"):
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")

    @property
    def residual_sign(self) -> float:
        return -1.0 if bool(self.flip_residual_sign) != bool(self.no_residual) else 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    sched: NoiseSchedule
    denoiser: dn.DenoiserParams
    initial: ini.InitialModel
    stats: dt.NormStats
    config: TrainConfig
    version: int = 1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list  # rows of (step, loss_simple, loss_init, loss_joint)


class Adam:
    """Standard adaptive first-order optimizer over a dict of arrays."""

    def __init__(self, names, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {n: None for n in names}
        self.v: dict[str, np.ndarray] = {n: None for n in names}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, arr in params.items():
            g = grads[name]
            if self.m[name] is None:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _initial_fill(model: ini.InitialModel, p, values, cond_vis, adjacency, a_hat):
    """Rough fill for a batch of windows; tracked when ``p`` holds Tensors."""
    if model.strategy == "trainable":
        return ini.trainable_fill(p, model.hidden, values, cond_vis, a_hat)
    b = values.shape[0]
    out = np.empty_like(values)
    for i in range(b):
        if model.strategy == "node_mean":
            out[i] = ini.node_mean_fill(values[i], cond_vis[i])
        else:
            out[i] = ini.interp_graph_fill(values[i], cond_vis[i], adjacency)
    return out


def _window_batches(L: int, n_window: int, batch_size: int, rng):
    if L < n_window:
        raise DataError(f"series of length {L} shorter than window {n_window}")
    count = max(1, L // n_window)
    starts = rng.integers(0, L - n_window + 1, size=count)
    for lo in range(0, count, batch_size):
        yield starts[lo : lo + batch_size]


def _draw_targets(config: TrainConfig, visible: np.ndarray, rng) -> np.ndarray:
    if config.target_protocol == "point":
        return dt.draw_point_targets(visible, config.target_p, rng)
    if config.target_protocol == "block":
        return dt.draw_block_targets(
            visible, config.target_p, config.block_p,
            (config.block_len_min, config.block_len_max),
            config.steps_per_hour, rng,
        )
    raise ConfigError(f"unknown target protocol {config.target_protocol!r}")


def pretrain_initial(grid: dt.MaskedGrid, graph: dt.Graph, config: TrainConfig,
                     rng: np.random.Generator) -> tuple[ini.InitialModel, list]:
    """Fit the trainable rough-fill model on re-masked batches.

    No-op (with a warning) for parameterless strategies; skipped when the
    config says so.  Returns the model and the per-step loss trace.
    """
    model = ini.InitialModel(config.strategy, config.init_hidden)
    if not model.trainable:
        warnings.warn(f"strategy {config.strategy!r} has no trainable parameters")
        return model, []
    model.params = ini.init_trainable_params(config.init_hidden, rng)
    if config.skip_pretrain:
        return model, []
    a_hat = dn.normalized_adjacency(graph.adjacency)
    names = model.tensor_names()
    adam = Adam(names, config.learning_rate)
    losses = []
    L = grid.shape[0]
    for _ in range(config.pretrain_epochs):
        for starts in _window_batches(L, config.n_window, config.batch_size, rng):
            values, vis, _, _ = _slice_windows(grid, starts, config.n_window)
            target = _draw_targets(config, vis, rng)
            keep = target.reshape(len(starts), -1).any(axis=1)
            if not keep.any():
                continue
            values, vis, target = values[keep], vis[keep], target[keep]
            cond_vis = vis & ~target
            pt = {n: ad.Tensor(model.params[n]) for n in names}
            x_init = ini.trainable_fill(pt, model.hidden, values, cond_vis, a_hat)
            loss = ini.init_loss(x_init, values, target, config.init_norm)
            if not np.isfinite(loss.value):
                raise NumericError("non-finite pretraining loss")
            loss.backward()
            grads = {n: pt[n].grad if pt[n].grad is not None
                     else np.zeros_like(model.params[n]) for n in names}
            adam.step(model.params, grads)
            losses.append(float(loss.value))
    return model, losses


def _slice_windows(grid: dt.MaskedGrid, starts, n_window: int):
    values = np.stack([grid.values[s : s + n_window] for s in starts])
    vis = np.stack([grid.visible_mask[s : s + n_window] for s in starts])
    ev = np.stack([grid.eval_mask[s : s + n_window] for s in starts])
    widx = np.stack([grid.window_index[s : s + n_window] for s in starts])
    return values, vis, ev, widx


def train_joint(grid: dt.MaskedGrid, graph: dt.Graph, config: TrainConfig,
                rng: np.random.Generator | None = None) -> TrainResult:
    """Run the full two-stage training loop and return a checkpoint."""
    if not grid.observed_mask.any():
        raise DataError("training data has no observed cells")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    grid_n, stats = dt.normalize(grid)
    sched = build_linear_schedule(config.t_steps, config.beta_min, config.beta_max)
    if config.strategy == "trainable":
        model, _ = pretrain_initial(grid_n, graph, config, rng)
    else:
        model = ini.InitialModel(config.strategy, config.init_hidden)

    n_nodes = grid.shape[1]
    dcfg = dn.DenoiserConfig(
        n_window=config.n_window, n_nodes=n_nodes, n_steps=config.t_steps,
        d=config.d, conv_width=config.conv_width, head_count=config.head_count,
    )
    dparams = dn.init_params(dcfg, rng)
    a_hat = dn.normalized_adjacency(graph.adjacency)

    train_initial = model.trainable and not config.freeze_initial
    opt_params = {f"denoiser/{n}": getattr(dparams, n) for n in dparams.tensor_names()}
    if train_initial:
        opt_params.update({f"initial/{n}": model.params[n] for n in model.tensor_names()})
    adam = Adam(opt_params.keys(), config.learning_rate)

    log = []
    step = 0
    L = grid.shape[0]
    for _ in range(config.epochs):
        for starts in _window_batches(L, config.n_window, config.batch_size, rng):
            values, vis, ev, widx = _slice_windows(grid_n, starts, config.n_window)
            if config.mask_mode == "in_sample":
                target = ev
                cond_vis = vis
            else:
                target = _draw_targets(config, vis, rng)
                cond_vis = vis & ~target
            keep = (target.reshape(len(starts), -1).any(axis=1)
                    & cond_vis.reshape(len(starts), -1).any(axis=1))
            if not keep.any():
                continue
            values, cond_vis, target, widx = (
                values[keep], cond_vis[keep], target[keep], widx[keep])
            b = values.shape[0]

            if train_initial:
                pt_init = {n: ad.Tensor(model.params[n]) for n in model.tensor_names()}
                fill_params = pt_init
            else:
                fill_params = model.params
            x_init = _initial_fill(model, fill_params, values, cond_vis,
                                   graph.adjacency, a_hat)

            sign = config.residual_sign
            maskf = target.astype(np.float64)
            x_init_eff = np.zeros_like(values) if config.no_residual else x_init
            z0m = ad.mul(ad.mul(ad.sub(x_init_eff, values), maskf), sign)
            z0c = ad.mul(x_init, maskf)
            z0c_fwd = np.zeros_like(values) if config.no_cond_forward else z0c

            t_draw = rng.integers(1, config.t_steps + 1, size=b)
            eps = rng.standard_normal(values.shape)
            z_t = q_sample(z0m, z0c_fwd, t_draw, eps, sched, target)

            pt_dn = dn.wrap_params(dparams)
            net_out = dn.forward(pt_dn, dcfg, z_t, z0c, t_draw, a_hat, widx)
            if config.predict_x0:
                loss_simple = dn.masked_mse(net_out, z0m, target)
            else:
                loss_simple = dn.masked_mse(net_out, eps, target)
            loss_init = ini.init_loss(x_init, values, target, config.init_norm)
            loss_joint = ad.add(loss_simple, ad.mul(loss_init, config.lam))

            ls = float(loss_simple.value)
            li = float(loss_init.value if isinstance(loss_init, ad.Tensor) else loss_init)
            lj = float(loss_joint.value)
            if not np.isfinite(lj):
                raise NumericError(f"non-finite joint loss at step {step}: "
                                   f"simple={ls} init={li}")
            loss_joint.backward()
            grads = {}
            for n in dparams.tensor_names():
                g = getattr(pt_dn, n).grad
                grads[f"denoiser/{n}"] = g if g is not None else np.zeros_like(
                    getattr(dparams, n))
            if train_initial:
                for n in model.tensor_names():
                    g = pt_init[n].grad
                    grads[f"initial/{n}"] = g if g is not None else np.zeros_like(
                        model.params[n])
            adam.step(opt_params, grads)
            log.append((step, ls, li, lj))
            step += 1

    ckpt = Checkpoint(sched=sched, denoiser=dparams, initial=model,
                      stats=stats, config=config)
    return TrainResult(checkpoint=ckpt, log=log)


# --------------------------------------------------------------------------
# Checkpoint container: versioned binary file plus a JSON config sidecar.
# Header: magic, u32 version, u32 array count, then per array a u32 name
# length, the utf-8 name, u32 ndim and u64 dims; payload holds the float64
# little-endian arrays in declared order.

_MAGIC = b"RSDFCKPT"
_FORMAT_VERSION = 1


def _checkpoint_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    arrays = {
        "schedule/beta": ckpt.sched.beta,
        "schedule/alpha_step": ckpt.sched.alpha_step,
        "schedule/alpha_cum": ckpt.sched.alpha_cum,
        "schedule/beta_tilde": ckpt.sched.beta_tilde,
        "norm/mean": ckpt.stats.mean,
        "norm/std": ckpt.stats.std,
    }
    for n in ckpt.denoiser.tensor_names():
        arrays[f"denoiser/{n}"] = getattr(ckpt.denoiser, n)
    for n in ckpt.initial.tensor_names():
        arrays[f"initial/{n}"] = ckpt.initial.params[n]
    return arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``path`` (binary) and ``path + '.json'`` (config sidecar)."""
    arrays = _checkpoint_arrays(ckpt)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {
        "format_version": _FORMAT_VERSION,
        "config": asdict(ckpt.config),
        "initial_strategy": ckpt.initial.strategy,
        "initial_hidden": ckpt.initial.hidden,
        "n_nodes": ckpt.denoiser.config.n_nodes,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != _FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 16
    headers = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        headers.append((name, shape))
    arrays = {}
    for name, shape in headers:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        off += 8 * size
        arrays[name] = arr.reshape(shape).astype(np.float64)

    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    config = TrainConfig.from_dict(sidecar["config"])
    sched = NoiseSchedule.from_arrays(
        arrays["schedule/beta"], arrays["schedule/alpha_step"],
        arrays["schedule/alpha_cum"], arrays["schedule/beta_tilde"],
    )
    stats = dt.NormStats(mean=arrays["norm/mean"], std=arrays["norm/std"])
    dcfg = dn.DenoiserConfig(
        n_window=config.n_window, n_nodes=int(sidecar["n_nodes"]),
        n_steps=config.t_steps, d=config.d, conv_width=config.conv_width,
        head_count=config.head_count,
    )
    dparams = dn.DenoiserParams(
        config=dcfg,
        **{n: arrays[f"denoiser/{n}"] for n in dn.DenoiserParams.tensor_names()},
    )
    model = ini.InitialModel(
        sidecar["initial_strategy"], int(sidecar["initial_hidden"]),
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("initial/")},
    )
    return Checkpoint(sched=sched, denoiser=dparams, initial=model,
                      stats=stats, config=config, version=version)
