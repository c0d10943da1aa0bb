"""Correspondence encoder: point-token encoders, cross-attention fusion, state
projections, contact-map and coordination heads, and the pretraining objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import (
    Tensor,
    add,
    concat,
    init_attention,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    matmul,
    max_pool,
    mse,
    multi_head_cross_attention,
    relu,
    reshape,
    scale,
    sigmoid,
    subparams,
)


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes and loss weights for the correspondence encoder."""

    n_points: int = 1024
    token_dim: int = 128
    heads: int = 4
    state_dim: int = 16
    arm_dim: int = 3
    hand_dim: int = 2
    horizon: int = 12
    coord_weight: float = 1.0
    gamma: float = 1.0
    theta: float = 10.0

    def __post_init__(self):
        if self.token_dim % self.heads != 0:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.state_dim % self.heads != 0:
            raise ValueError(f"state_dim {self.state_dim} not divisible by heads {self.heads}")
        if self.coord_weight < 0:
            raise ValueError("coord_weight must be >= 0")

    @property
    def condition_dim(self) -> int:
        """Length of the per-observation policy conditioning vector."""
        return 2 * self.token_dim + 2 * self.state_dim


@dataclass
class CorrespondenceFeatures:
    """Fused per-point tokens, their pooled maxima, and fused state projections."""

    phi_h: Tensor
    phi_o: Tensor
    pooled_h: Tensor
    pooled_o: Tensor
    psi_a: Tensor
    psi_h: Tensor


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    d, s = config.token_dim, config.state_dim
    params = {}

    def add_linear(name, fan_in, fan_out):
        w, b = init_linear(rng, fan_in, fan_out, dtype)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b

    def add_ln(name, feats):
        g, b = init_layer_norm(feats, dtype)
        params[f"{name}.g"] = g
        params[f"{name}.b"] = b

    for enc in ("enc_hand", "enc_obj"):
        add_linear(f"{enc}.l1", 3, d)
        add_ln(f"{enc}.ln1", d)
        add_linear(f"{enc}.l2", d, d)
        add_ln(f"{enc}.ln2", d)
        add_linear(f"{enc}.l3", d, d)
        add_ln(f"{enc}.ln3", d)
    for fuse in ("fuse_hand", "fuse_obj"):
        for key, tensor in init_attention(rng, d, dtype).items():
            params[f"{fuse}.{key}"] = tensor
    add_linear("state_arm", config.arm_dim, s)
    add_linear("state_hand", config.hand_dim, s)
    for fuse in ("sfuse_arm", "sfuse_hand"):
        for key, tensor in init_attention(rng, s, dtype).items():
            params[f"{fuse}.{key}"] = tensor
    add_linear("contact.l1", 2 * d, d)
    add_linear("contact.l2", d, d // 2)
    add_linear("contact.l3", d // 2, 1)
    add_linear("arm_head.l1", 2 * d + s, d)
    add_linear("arm_head.l2", d, d)
    add_linear("arm_head.l3", d, config.horizon * config.arm_dim)
    add_linear("hand_head.l1", 2 * d + s, d)
    add_linear("hand_head.l2", d, d)
    add_linear("hand_head.l3", d, config.horizon * config.hand_dim)
    return params


def _check_batched_cloud(cloud: Tensor, n_points: int, name: str):
    if cloud.data.ndim != 3 or cloud.shape[2] != 3:
        raise ValueError(f"{name}: expected (B,N,3) tokens, got {cloud.shape}")
    if cloud.shape[1] != n_points:
        raise ValueError(f"{name}: expected {n_points} points, got {cloud.shape[1]}")


def encode_point_tokens(cloud: Tensor, params: dict, prefix: str, n_points: int) -> Tensor:
    """Shared per-point stack (linear -> layer_norm -> relu, x3) over a (B,N,3) cloud."""
    _check_batched_cloud(cloud, n_points, prefix)
    x = cloud
    for i in (1, 2, 3):
        x = linear(x, params[f"{prefix}.l{i}.w"], params[f"{prefix}.l{i}.b"])
        x = layer_norm(x, params[f"{prefix}.ln{i}.g"], params[f"{prefix}.ln{i}.b"])
        x = relu(x)
    return x


def cross_fuse(hand_tokens: Tensor, obj_tokens: Tensor, params: dict, heads: int):
    """Aligned representations: each side attends over the other, with residual."""
    if hand_tokens.shape[-1] != obj_tokens.shape[-1]:
        raise ValueError(f"token dims differ: {hand_tokens.shape} vs {obj_tokens.shape}")
    phi_h = add(
        multi_head_cross_attention(hand_tokens, obj_tokens, heads, subparams(params, "fuse_hand.")),
        hand_tokens,
    )
    phi_o = add(
        multi_head_cross_attention(obj_tokens, hand_tokens, heads, subparams(params, "fuse_obj.")),
        obj_tokens,
    )
    return phi_h, phi_o


def project_states(arm_state: Tensor, hand_state: Tensor, params: dict, heads: int):
    """Project both states to the shared width, then fuse them by cross-attention."""
    s_a = linear(arm_state, params["state_arm.w"], params["state_arm.b"])
    s_h = linear(hand_state, params["state_hand.w"], params["state_hand.b"])
    b, s = s_a.shape
    tok_a = reshape(s_a, (b, 1, s))
    tok_h = reshape(s_h, (b, 1, s))
    psi_a = add(
        multi_head_cross_attention(tok_a, tok_h, heads, subparams(params, "sfuse_arm.")), tok_a
    )
    psi_h = add(
        multi_head_cross_attention(tok_h, tok_a, heads, subparams(params, "sfuse_hand.")), tok_h
    )
    return reshape(psi_a, (b, s)), reshape(psi_h, (b, s))


def _tile_rows(vec: Tensor, n: int) -> Tensor:
    """Repeat a (B,d) vector n times along a new token axis via a ones matmul."""
    b, d = vec.shape
    ones = Tensor(np.ones((b, n, 1), dtype=vec.data.dtype))
    return matmul(ones, reshape(vec, (b, 1, d)))


def _mlp3(x: Tensor, params: dict, prefix: str) -> Tensor:
    x = relu(linear(x, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"]))
    x = relu(linear(x, params[f"{prefix}.l2.w"], params[f"{prefix}.l2.b"]))
    return linear(x, params[f"{prefix}.l3.w"], params[f"{prefix}.l3.b"])


def predict_contact(phi_h: Tensor, phi_o: Tensor, params: dict) -> Tensor:
    """Per-object-point contact in (0,1): object token + pooled hand feature -> 3-layer head."""
    b, n, d = phi_o.shape
    pooled_h = max_pool(phi_h, axis=1)
    head_in = concat([phi_o, _tile_rows(pooled_h, n)], axis=-1)
    logits = _mlp3(head_in, params, "contact")
    return reshape(sigmoid(logits), (b, n))


def predict_arm_seq(phi_h: Tensor, phi_o: Tensor, psi_h: Tensor, params: dict, config: EncoderConfig) -> Tensor:
    """Arm action sequence from the point clouds plus the fused hand state."""
    pooled = concat([max_pool(phi_h, axis=1), max_pool(phi_o, axis=1), psi_h], axis=-1)
    out = _mlp3(pooled, params, "arm_head")
    return reshape(out, (phi_h.shape[0], config.horizon, config.arm_dim))


def predict_hand_seq(phi_h: Tensor, phi_o: Tensor, psi_a: Tensor, params: dict, config: EncoderConfig) -> Tensor:
    """Hand action sequence from the point clouds plus the fused arm state."""
    pooled = concat([max_pool(phi_h, axis=1), max_pool(phi_o, axis=1), psi_a], axis=-1)
    out = _mlp3(pooled, params, "hand_head")
    return reshape(out, (phi_h.shape[0], config.horizon, config.hand_dim))


def encode_observation(
    params: dict,
    config: EncoderConfig,
    obj_pc: Tensor,
    hand_pc: Tensor,
    arm_state: Tensor,
    hand_state: Tensor,
) -> CorrespondenceFeatures:
    """Full fused feature set for a batch of normalized observations."""
    hand_tokens = encode_point_tokens(hand_pc, params, "enc_hand", config.n_points)
    obj_tokens = encode_point_tokens(obj_pc, params, "enc_obj", config.n_points)
    phi_h, phi_o = cross_fuse(hand_tokens, obj_tokens, params, config.heads)
    psi_a, psi_h = project_states(arm_state, hand_state, params, config.heads)
    return CorrespondenceFeatures(
        phi_h=phi_h,
        phi_o=phi_o,
        pooled_h=max_pool(phi_h, axis=1),
        pooled_o=max_pool(phi_o, axis=1),
        psi_a=psi_a,
        psi_h=psi_h,
    )


def policy_condition(features: CorrespondenceFeatures) -> Tensor:
    """Per-observation conditioning vector: pooled tokens plus fused states."""
    return concat(
        [features.pooled_h, features.pooled_o, features.psi_a, features.psi_h], axis=-1
    )


_BATCH_KEYS = ("obj_pc", "hand_pc", "arm_state", "hand_state", "contact", "arm_seq", "hand_seq")


def pretrain_loss(params: dict, config: EncoderConfig, batch: dict):
    """Contact MSE plus weighted coordination MSE: L = L_contact + lambda * L_coord.

    Returns (loss tensor, metrics dict); the coordination term is always
    evaluated for reporting even when its weight is zero.
    """
    missing = [k for k in _BATCH_KEYS if k not in batch]
    if missing:
        raise ValueError(f"pretrain batch missing targets: {missing}")
    dtype = params["enc_hand.l1.w"].data.dtype
    as_t = lambda k: Tensor(np.asarray(batch[k], dtype=dtype))
    feats = encode_observation(
        params, config, as_t("obj_pc"), as_t("hand_pc"), as_t("arm_state"), as_t("hand_state")
    )
    c_pred = predict_contact(feats.phi_h, feats.phi_o, params)
    arm_pred = predict_arm_seq(feats.phi_h, feats.phi_o, feats.psi_h, params, config)
    hand_pred = predict_hand_seq(feats.phi_h, feats.phi_o, feats.psi_a, params, config)
    l_contact = mse(c_pred, as_t("contact"))
    l_coord = add(mse(arm_pred, as_t("arm_seq")), mse(hand_pred, as_t("hand_seq")))
    total = add(l_contact, scale(l_coord, config.coord_weight))
    metrics = {"contact_mse": float(l_contact.data), "coordination_mse": float(l_coord.data)}
    return total, metrics


def heldout_contact_eval(params: dict, config: EncoderConfig, dataset, normalizer, contacts, chunk: int = 8):
    """Full-resolution contact MSE and Pearson r over every held-out frame."""
    from dataclasses import replace

    from .dataset import normalized_frame

    full_cfg = replace(config, n_points=dataset.packs[0].n_points)
    preds, targets = [], []
    for e, pack in enumerate(dataset.packs):
        for start in range(0, pack.steps, chunk):
            steps = range(start, min(start + chunk, pack.steps))
            frames = [normalized_frame(pack, t, normalizer) for t in steps]
            feats = encode_observation(
                params,
                full_cfg,
                Tensor(np.stack([f["obj_pc"] for f in frames])),
                Tensor(np.stack([f["hand_pc"] for f in frames])),
                Tensor(np.stack([f["arm_state"] for f in frames])),
                Tensor(np.stack([f["hand_state"] for f in frames])),
            )
            preds.append(predict_contact(feats.phi_h, feats.phi_o, params).data)
            targets.append(np.stack([contacts.get(e, t) for t in steps]))
    p = np.concatenate(preds).ravel()
    t = np.concatenate(targets).ravel()
    return float(np.mean((p - t) ** 2)), float(np.corrcoef(p, t)[0, 1])


def pretrain_encoder(
    train_set,
    held_set,
    normalizer,
    config: EncoderConfig,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    weight_decay: float,
    seed: int,
    subset_points: int | None = 256,
    frame_stride: int = 1,
    params: dict | None = None,
    opt_state: dict | None = None,
    start_epoch: int = 0,
):
    """Contact + coordination pretraining over demonstration episodes.

    Training batches draw random point subsets (`subset_points`) to cut the
    attention cost; held-out evaluation always runs on full clouds. Per-epoch
    batch order and subsets are a function of (seed, epoch), so resuming from
    `start_epoch` replays the exact remaining schedule.
    """
    from dataclasses import replace

    from .nncore import AdamW, backward
    from .dataset import ContactCache, pretrain_batch
    from .seeding import component_rng

    train_contacts = ContactCache(train_set, config.gamma, config.theta)
    held_contacts = ContactCache(held_set, config.gamma, config.theta)
    if params is None:
        params = init_encoder_params(config, component_rng(seed, "init"))
    opt = AdamW(params, lr=learning_rate, weight_decay=weight_decay)
    if opt_state is not None:
        opt.load_state_arrays(opt_state)
    frames = train_set.frame_index(stride=frame_stride)
    step_cfg = config if subset_points is None else replace(config, n_points=min(subset_points, config.n_points))

    held_before = heldout_contact_eval(params, config, held_set, normalizer, held_contacts)
    metrics = []
    for epoch in range(start_epoch, epochs):
        frac = epoch / max(epochs, 1)
        opt.lr = learning_rate * (0.25 if frac >= 0.85 else 0.5 if frac >= 0.5 else 1.0)
        rng = component_rng(seed, "pretrain", 100 + epoch)
        order = rng.permutation(len(frames))
        sums = {"contact_mse": 0.0, "coordination_mse": 0.0, "loss": 0.0}
        count = 0
        for start in range(0, len(frames), batch_size):
            picked = [frames[i] for i in order[start : start + batch_size]]
            subset = None if step_cfg.n_points == config.n_points else step_cfg.n_points
            batch = pretrain_batch(
                train_set, picked, normalizer, train_contacts, config.horizon, rng=rng, n_subset=subset
            )
            opt.zero_grad()
            loss, parts = pretrain_loss(params, step_cfg, batch)
            backward(loss)
            opt.step()
            sums["loss"] += float(loss.data)
            sums["contact_mse"] += parts["contact_mse"]
            sums["coordination_mse"] += parts["coordination_mse"]
            count += 1
        metrics.append(
            {
                "epoch": epoch + 1,
                "loss": sums["loss"] / max(count, 1),
                "contact_mse": sums["contact_mse"] / max(count, 1),
                "coordination_mse": sums["coordination_mse"] / max(count, 1),
            }
        )
    held_after = heldout_contact_eval(params, config, held_set, normalizer, held_contacts)
    summary = {
        "held_contact_mse_before": held_before[0],
        "held_contact_pearson_before": held_before[1],
        "held_contact_mse_after": held_after[0],
        "held_contact_pearson_after": held_after[1],
    }
    return params, opt, metrics, summary


def params_to_arrays(params: dict, prefix: str) -> dict:
    return {prefix + name: tensor.data for name, tensor in params.items()}


def arrays_to_params(arrays: dict, prefix: str, requires_grad: bool = True) -> dict:
    plen = len(prefix)
    out = {
        name[plen:]: Tensor(value.copy(), requires_grad=requires_grad)
        for name, value in arrays.items()
        if name.startswith(prefix)
    }
    if not out:
        raise ValueError(f"checkpoint holds no arrays under {prefix!r}")
    return out


def encoder_config_manifest(config: EncoderConfig) -> dict:
    from dataclasses import asdict

    return asdict(config)


def encoder_config_from_manifest(doc: dict) -> EncoderConfig:
    return EncoderConfig(**doc)


def save_encoder_checkpoint(path, params, opt, normalizer, config: EncoderConfig, epoch: int, seed: int, summary: dict):
    from .nncore import save_checkpoint

    arrays = params_to_arrays(params, "encoder/")
    arrays.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
    arrays.update(normalizer.as_arrays())
    manifest = {
        "kind": "encoder",
        "config": encoder_config_manifest(config),
        "epoch": epoch,
        "seed": seed,
        "summary": summary,
    }
    save_checkpoint(path, arrays, manifest)


def load_encoder_checkpoint(path):
    from .nncore import load_checkpoint
    from .obsbuild import Normalizer

    arrays, manifest = load_checkpoint(path)
    if manifest.get("kind") != "encoder":
        raise ValueError(f"{path}: not an encoder checkpoint")
    params = arrays_to_params(arrays, "encoder/")
    opt_state = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    normalizer = Normalizer.from_arrays(arrays)
    config = encoder_config_from_manifest(manifest["config"])
    return params, opt_state, normalizer, config, manifest
