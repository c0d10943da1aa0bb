"""Conditional denoising diffusion policy: noise schedule, training loss,
deterministic DDIM sampling, policy training, and receding-horizon rollout."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import corrnet
from .nncore import (
    AdamW,
    Tensor,
    add,
    backward,
    concat,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    mse,
    relu,
    reshape,
    scale,
)
from .obsbuild import Normalizer, denormalize, normalize
from .seeding import component_rng


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal coefficients; alpha_bar[0] = 1 and alpha_bar[K] is near zero."""

    kind: str
    alpha_bar: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if abs(self.alpha_bar[0] - 1.0) > 1e-3:
            raise ValueError("alpha_bar[0] must be ~1")
        if self.alpha_bar[-1] >= 0.02:
            raise ValueError(f"alpha_bar[K]={self.alpha_bar[-1]:.4f} not < 0.02")

    @property
    def K(self) -> int:
        return len(self.betas)


def make_schedule(K: int, kind: str = "squared-cosine") -> DiffusionSchedule:
    """Noise schedule over K training steps; squared-cosine default, scaled-linear fallback."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if kind == "squared-cosine":
        s = 0.008
        k = np.arange(K + 1, dtype=np.float64)
        f = np.cos(((k / K + s) / (1 + s)) * np.pi / 2) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 1e-8, 0.999)
    elif kind == "linear":
        rescale = 1000.0 / K
        betas = np.clip(np.linspace(1e-4 * rescale, 0.02 * rescale, K), 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return DiffusionSchedule(kind=kind, alpha_bar=alpha_bar, alphas=alphas, betas=betas)


def forward_noise(a0: np.ndarray, k, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Noised sample A_k = sqrt(alpha_bar_k) A_0 + sqrt(1 - alpha_bar_k) eps."""
    a0 = np.asarray(a0)
    eps = np.asarray(eps)
    if a0.shape != eps.shape:
        raise ValueError(f"forward_noise: a0 {a0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar[np.asarray(k)]
    extra = a0.ndim - np.ndim(ab)
    coeff_shape = np.shape(ab) + (1,) * extra
    signal = np.sqrt(ab).reshape(coeff_shape).astype(a0.dtype)
    noise = np.sqrt(1.0 - ab).reshape(coeff_shape).astype(a0.dtype)
    return signal * a0 + noise * eps


def sinusoidal_embedding(k, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sin/cos positional features of the diffusion step index."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


@dataclass(frozen=True)
class PolicyConfig:
    """Action-sequence and denoiser shapes plus receding-horizon settings."""

    horizon: int = 12
    n_obs_steps: int = 4
    n_action_steps: int = 6
    arm_dim: int = 3
    hand_dim: int = 2
    diffusion_steps: int = 100
    ddim_steps: int = 10
    schedule: str = "squared-cosine"
    hidden_dim: int = 256
    n_blocks: int = 3
    k_embed_dim: int = 32

    def __post_init__(self):
        if not 1 <= self.n_action_steps <= self.horizon:
            raise ValueError("need 1 <= n_action_steps <= horizon")
        if self.ddim_steps > self.diffusion_steps:
            raise ValueError("ddim_steps cannot exceed diffusion_steps")
        if self.k_embed_dim % 2:
            raise ValueError("k_embed_dim must be even")

    @property
    def act_dim(self) -> int:
        return self.arm_dim + self.hand_dim

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.act_dim


def init_denoiser_params(config: PolicyConfig, cond_dim: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    params = {}
    in_dim = config.flat_dim + cond_dim + config.k_embed_dim
    params["den.in.w"], params["den.in.b"] = init_linear(rng, in_dim, config.hidden_dim, dtype)
    for i in range(config.n_blocks):
        params[f"den.blk{i}.w"], params[f"den.blk{i}.b"] = init_linear(
            rng, config.hidden_dim, config.hidden_dim, dtype
        )
        params[f"den.blk{i}.g"], params[f"den.blk{i}.nb"] = init_layer_norm(config.hidden_dim, dtype)
    params["den.out.w"], params["den.out.b"] = init_linear(rng, config.hidden_dim, config.flat_dim, dtype)
    return params


def denoiser_apply(params: dict, config: PolicyConfig, a_flat, cond, k) -> Tensor:
    """Residual MLP noise prediction; `a_flat` and `cond` may be arrays or graph tensors."""
    dtype = params["den.in.w"].data.dtype
    a_t = a_flat if isinstance(a_flat, Tensor) else Tensor(np.asarray(a_flat, dtype=dtype))
    cond_t = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=dtype))
    emb = Tensor(sinusoidal_embedding(k, config.k_embed_dim, dtype))
    x = relu(linear(concat([a_t, cond_t, emb], axis=-1), params["den.in.w"], params["den.in.b"]))
    for i in range(config.n_blocks):
        t = linear(x, params[f"den.blk{i}.w"], params[f"den.blk{i}.b"])
        t = relu(layer_norm(t, params[f"den.blk{i}.g"], params[f"den.blk{i}.nb"]))
        x = add(x, t)
    return linear(x, params["den.out.w"], params["den.out.b"])


def training_loss(batch: dict, denoiser, schedule: DiffusionSchedule, rng: np.random.Generator):
    """Noise-prediction objective, scaled so a zero denoiser scores ~act dimensionality.

    `denoiser(a_flat, cond, k)` may return an array (oracles in tests) or a
    graph tensor (the trained network). k is uniform over {1..K} per sample.
    """
    a0 = np.asarray(batch["actions"], dtype=np.float64)
    cond = batch["cond"]
    b = a0.shape[0]
    flat = a0.reshape(b, -1)
    k = rng.integers(1, schedule.K + 1, size=b)
    eps = rng.standard_normal(flat.shape)
    ak = forward_noise(flat, k, eps, schedule)
    pred = denoiser(ak, cond, k)
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    loss = scale(mse(pred, Tensor(eps.astype(pred.data.dtype))), float(flat.shape[1]))
    if not np.isfinite(loss.data):
        raise RuntimeError("non-finite diffusion loss")
    return loss


def ddim_sample(
    cond,
    denoiser,
    schedule: DiffusionSchedule,
    n_steps: int,
    seed,
    shape,
    return_trajectory: bool = False,
):
    """Deterministic accelerated sampling (eta = 0) over a strided step subset.

    Starts from seeded Gaussian noise, iterates
    x0_hat = (A_k - sqrt(1-ab_k) eps) / sqrt(ab_k);
    A_prev = sqrt(ab_prev) x0_hat + sqrt(1-ab_prev) eps,
    and clips only the final output to [-1, 1].
    """
    if not 1 <= n_steps <= schedule.K:
        raise ValueError(f"n_steps={n_steps} out of range for K={schedule.K}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    ks = np.round(np.linspace(schedule.K, 0, n_steps + 1)).astype(int)
    trajectory = [a.copy()]
    for k, k_prev in zip(ks[:-1], ks[1:]):
        eps_hat = np.asarray(denoiser(a, cond, int(k)), dtype=np.float64)
        ab_k = schedule.alpha_bar[k]
        ab_prev = schedule.alpha_bar[k_prev]
        x0 = (a - np.sqrt(1.0 - ab_k) * eps_hat) / np.sqrt(ab_k)
        a = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
        trajectory.append(a.copy())
    out = np.clip(a, -1.0, 1.0)
    return (out, trajectory) if return_trajectory else out


def make_denoiser_fn(params: dict, config: PolicyConfig):
    """Plain-array denoiser closure for sampling (single sequence in, single out)."""

    def fn(a, cond, k):
        a = np.asarray(a, dtype=np.float32)
        out = denoiser_apply(params, config, a.reshape(1, -1), np.asarray(cond, dtype=np.float32)[None, :], np.array([k]))
        return out.data.reshape(a.shape)

    return fn


def _detached(params: dict) -> dict:
    return {k: Tensor(v.data) for k, v in params.items()}


def encode_condition_batch(enc_params, enc_config, obs_batch: dict) -> Tensor:
    """Per-observation conditioning vectors for a batch of normalized observations."""
    feats = corrnet.encode_observation(
        enc_params,
        enc_config,
        obs_batch["obj_pc"] if isinstance(obs_batch["obj_pc"], Tensor) else Tensor(obs_batch["obj_pc"]),
        obs_batch["hand_pc"] if isinstance(obs_batch["hand_pc"], Tensor) else Tensor(obs_batch["hand_pc"]),
        obs_batch["arm_state"] if isinstance(obs_batch["arm_state"], Tensor) else Tensor(obs_batch["arm_state"]),
        obs_batch["hand_state"] if isinstance(obs_batch["hand_state"], Tensor) else Tensor(obs_batch["hand_state"]),
    )
    return corrnet.policy_condition(feats)


@dataclass
class RolloutRecord:
    success: bool
    steps: int
    wall_seconds: float
    step_rate: float
    n_predictions: int
    object_xy: np.ndarray
    actions: np.ndarray


def rollout_policy(
    env,
    enc_params: dict,
    enc_config,
    den_params: dict,
    policy_config: PolicyConfig,
    schedule: DiffusionSchedule,
    normalizer: Normalizer,
    seed: int,
    max_steps: int = 200,
    denoiser_fn=None,
) -> RolloutRecord:
    """Receding-horizon execution: encode 4-step history, sample 12 actions, run 6.

    `denoiser_fn` overrides the trained denoiser (used e.g. to drive the loop
    with a scripted noise source when checking the execution plumbing).
    """
    enc_eval = _detached(enc_params)
    den_eval = _detached(den_params)
    denoise = denoiser_fn if denoiser_fn is not None else make_denoiser_fn(den_eval, policy_config)
    sampler_rng = component_rng(seed, "sampler")

    state = env.reset(seed)
    history = [env.observe(state)]
    trace_xy = [state.obj_xy.copy()]
    actions_taken = []
    steps = 0
    n_pred = 0
    t0 = time.perf_counter()
    while steps < max_steps and not env.success(state):
        window = history[-policy_config.n_obs_steps :]
        window = [window[0]] * (policy_config.n_obs_steps - len(window)) + window
        obs_batch = {
            "obj_pc": np.stack([normalize(o.obj_pc, normalizer, "object_pc") for o in window]).astype(np.float32),
            "hand_pc": np.stack([normalize(o.hand_pc, normalizer, "hand_pc") for o in window]).astype(np.float32),
            "arm_state": np.stack([normalize(o.arm_state, normalizer, "arm_state") for o in window]).astype(np.float32),
            "hand_state": np.stack([normalize(o.hand_state, normalizer, "hand_state") for o in window]).astype(np.float32),
        }
        cond = encode_condition_batch(enc_eval, enc_config, obs_batch).data.reshape(-1)
        plan = ddim_sample(
            cond,
            denoise,
            schedule,
            policy_config.ddim_steps,
            sampler_rng,
            (policy_config.horizon, policy_config.act_dim),
        )
        n_pred += 1
        arm_plan = denormalize(plan[:, : policy_config.arm_dim], normalizer, "arm_action")
        hand_plan = denormalize(plan[:, policy_config.arm_dim :], normalizer, "hand_action")
        for i in range(policy_config.n_action_steps):
            if not (np.all(np.isfinite(arm_plan[i])) and np.all(np.isfinite(hand_plan[i]))):
                raise RuntimeError("non-finite action during rollout")
            state = env.step(state, arm_plan[i], hand_plan[i])
            steps += 1
            history.append(env.observe(state))
            trace_xy.append(state.obj_xy.copy())
            actions_taken.append(np.concatenate([arm_plan[i], hand_plan[i]]))
            if env.success(state) or steps >= max_steps:
                break
    wall = time.perf_counter() - t0
    return RolloutRecord(
        success=env.success(state),
        steps=steps,
        wall_seconds=wall,
        step_rate=steps / wall if wall > 0 else float("inf"),
        n_predictions=n_pred,
        object_xy=np.array(trace_xy),
        actions=np.array(actions_taken) if actions_taken else np.zeros((0, policy_config.act_dim)),
    )


@dataclass
class TrainSettings:
    """Optimization knobs for policy training."""

    warmup_epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    finetune_steps: int = 60
    finetune_batch: int = 4
    finetune_lr: float = 1e-4
    log_every: int = 1


def _cache_conditions(dataset, normalizer, enc_params, enc_config, chunk: int = 16) -> list:
    """Per-frame conditioning vectors under the current (frozen) encoder."""
    frozen = _detached(enc_params)
    cached = []
    for pack in dataset.packs:
        rows = []
        for start in range(0, pack.steps, chunk):
            idx = range(start, min(start + chunk, pack.steps))
            obs_batch = {
                "obj_pc": np.stack([normalize(pack.streams["object_pc"][t], normalizer, "object_pc") for t in idx]).astype(np.float32),
                "hand_pc": np.stack([normalize(pack.streams["hand_pc"][t], normalizer, "hand_pc") for t in idx]).astype(np.float32),
                "arm_state": np.stack([normalize(pack.streams["arm_state"][t], normalizer, "arm_state") for t in idx]).astype(np.float32),
                "hand_state": np.stack([normalize(pack.streams["hand_state"][t], normalizer, "hand_state") for t in idx]).astype(np.float32),
            }
            rows.append(encode_condition_batch(frozen, enc_config, obs_batch).data)
        cached.append(np.concatenate(rows, axis=0))
    return cached


def _history_cond(cached_ep: np.ndarray, t: int, n_obs: int) -> np.ndarray:
    from .dataset import history_indices

    return cached_ep[history_indices(t, n_obs)].reshape(-1)


def train_policy(
    dataset,
    normalizer: Normalizer,
    enc_params: dict,
    enc_config,
    policy_config: PolicyConfig,
    settings: TrainSettings,
    seed: int,
):
    """Two-phase policy training.

    Phase 1 trains the denoiser against conditioning vectors cached under the
    frozen encoder. Phase 2 fine-tunes encoder and denoiser jointly for a
    bounded number of steps (skipped when settings.finetune_steps == 0).
    Returns (den_params, enc_params, metrics rows).
    """
    from .dataset import action_window, history_indices, normalized_frame

    schedule = make_schedule(policy_config.diffusion_steps, policy_config.schedule)
    den_params = init_denoiser_params(
        policy_config, enc_config.condition_dim * policy_config.n_obs_steps, component_rng(seed, "init", 1)
    )
    frames = dataset.frame_index()
    metrics = []

    def action_target(e, t):
        window = action_window(dataset.packs[e], t, policy_config.horizon)
        arm = normalize(window[:, : policy_config.arm_dim], normalizer, "arm_action")
        hand = normalize(window[:, policy_config.arm_dim :], normalizer, "hand_action")
        return np.concatenate([arm, hand], axis=1).astype(np.float32)

    cached = _cache_conditions(dataset, normalizer, enc_params, enc_config)
    opt = AdamW(den_params, lr=settings.learning_rate, weight_decay=settings.weight_decay)
    noise_rng = component_rng(seed, "train", 1)
    for epoch in range(settings.warmup_epochs):
        order = component_rng(seed, "train", 100 + epoch).permutation(len(frames))
        total, count = 0.0, 0
        for start in range(0, len(frames), settings.batch_size):
            batch_frames = [frames[i] for i in order[start : start + settings.batch_size]]
            batch = {
                "actions": np.stack([action_target(e, t) for e, t in batch_frames]),
                "cond": np.stack([_history_cond(cached[e], t, policy_config.n_obs_steps) for e, t in batch_frames]),
            }
            opt.zero_grad()
            loss = training_loss(
                batch, lambda a, c, k: denoiser_apply(den_params, policy_config, a, c, k), schedule, noise_rng
            )
            backward(loss)
            opt.step()
            total += float(loss.data)
            count += 1
        if (epoch + 1) % settings.log_every == 0:
            metrics.append({"phase": "warmup", "epoch": epoch + 1, "loss": total / max(count, 1)})

    if settings.finetune_steps > 0:  # joint fine-tuning phase
        joint = dict(den_params)
        joint.update(enc_params)
        opt2 = AdamW(joint, lr=settings.finetune_lr, weight_decay=settings.weight_decay)
        ft_rng = component_rng(seed, "finetune")
        n_obs = policy_config.n_obs_steps
        total, count = 0.0, 0
        for step_i in range(settings.finetune_steps):
            picks = ft_rng.choice(len(frames), settings.finetune_batch, replace=False)
            batch_frames = [frames[i] for i in picks]
            obs_rows = {k: [] for k in ("obj_pc", "hand_pc", "arm_state", "hand_state")}
            for e, t in batch_frames:
                for ht in history_indices(t, n_obs):
                    frame = normalized_frame(dataset.packs[e], int(ht), normalizer)
                    for key in obs_rows:
                        obs_rows[key].append(frame[key])
            obs_batch = {k: np.stack(v) for k, v in obs_rows.items()}
            cond_per_obs = encode_condition_batch(enc_params, enc_config, obs_batch)
            cond = reshape(cond_per_obs, (len(batch_frames), n_obs * enc_config.condition_dim))
            batch = {
                "actions": np.stack([action_target(e, t) for e, t in batch_frames]),
                "cond": cond,
            }
            opt2.zero_grad()
            loss = training_loss(
                batch, lambda a, c, k: denoiser_apply(den_params, policy_config, a, c, k), schedule, noise_rng
            )
            backward(loss)
            opt2.step()
            total += float(loss.data)
            count += 1
            if (step_i + 1) % 20 == 0 or step_i + 1 == settings.finetune_steps:
                metrics.append({"phase": "finetune", "epoch": step_i + 1, "loss": total / count})
                total, count = 0.0, 0

    return den_params, enc_params, metrics


@dataclass
class PolicyBundle:
    """Everything needed to run a trained policy."""

    enc_params: dict
    den_params: dict
    enc_config: object
    policy_config: PolicyConfig
    schedule: DiffusionSchedule
    normalizer: Normalizer


def save_policy_checkpoint(path, bundle: PolicyBundle, seed: int, extra: dict | None = None):
    from dataclasses import asdict

    from .corrnet import encoder_config_manifest, params_to_arrays
    from .nncore import save_checkpoint

    arrays = params_to_arrays(bundle.enc_params, "encoder/")
    arrays.update(params_to_arrays(bundle.den_params, "denoiser/"))
    arrays.update(bundle.normalizer.as_arrays())
    manifest = {
        "kind": "policy",
        "encoder_config": encoder_config_manifest(bundle.enc_config),
        "policy_config": asdict(bundle.policy_config),
        "schedule": bundle.schedule.kind,
        "diffusion_steps": bundle.schedule.K,
        "seed": seed,
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(path, arrays, manifest)


def load_policy_checkpoint(path) -> PolicyBundle:
    from .corrnet import arrays_to_params, encoder_config_from_manifest
    from .nncore import load_checkpoint

    arrays, manifest = load_checkpoint(path)
    if manifest.get("kind") != "policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    policy_config = PolicyConfig(**manifest["policy_config"])
    return PolicyBundle(
        enc_params=arrays_to_params(arrays, "encoder/"),
        den_params=arrays_to_params(arrays, "denoiser/"),
        enc_config=encoder_config_from_manifest(manifest["encoder_config"]),
        policy_config=policy_config,
        schedule=make_schedule(manifest["diffusion_steps"], manifest["schedule"]),
        normalizer=Normalizer.from_arrays(arrays),
    )
