"""Episode datasets: directory loading, splits, contact targets, and batch assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .obsbuild import EpisodePack, Normalizer, fit_normalizer, normalize, read_episode
from .pcgeom import aligned_distance, contact_map, estimate_normals

EPISODE_SUFFIX = ".cvip"
MANIFEST_NAME = "episodes.json"


@dataclass
class DemoDataset:
    """Ordered list of episode packs plus a flat (episode, step) frame index."""

    packs: list

    @classmethod
    def from_dir(cls, path) -> "DemoDataset":
        path = Path(path)
        manifest = path / MANIFEST_NAME
        if manifest.exists():
            names = [entry["file"] for entry in json.loads(manifest.read_text())["episodes"]]
        else:
            names = sorted(p.name for p in path.glob(f"*{EPISODE_SUFFIX}"))
        if not names:
            raise FileNotFoundError(f"no episode packs found in {path}")
        return cls([read_episode(path / name) for name in names])

    @property
    def n_frames(self) -> int:
        return sum(p.steps for p in self.packs)

    def frame_index(self, stride: int = 1) -> list:
        return [(e, t) for e, pack in enumerate(self.packs) for t in range(0, pack.steps, stride)]

    def split(self, holdout_fraction: float):
        """Deterministic episode-level split; the tail episodes are held out."""
        n_hold = max(1, int(round(holdout_fraction * len(self.packs))))
        if n_hold >= len(self.packs):
            raise ValueError("holdout fraction leaves no training episodes")
        return DemoDataset(self.packs[:-n_hold]), DemoDataset(self.packs[-n_hold:])


def contact_targets(pack: EpisodePack, t: int, gamma: float, theta: float, normal_k: int = 10) -> np.ndarray:
    """Ground-truth contact map for one stored frame, recomputed from its clouds."""
    obj = pack.streams["object_pc"][t].astype(np.float64)
    hand = pack.streams["hand_pc"][t].astype(np.float64)
    normals = estimate_normals(obj, k=normal_k)
    return contact_map(aligned_distance(obj, normals.values, hand, gamma=gamma), theta=theta).astype(np.float32)


class ContactCache:
    """Lazily computed per-frame contact targets (the pack format stores clouds only)."""

    def __init__(self, dataset: DemoDataset, gamma: float, theta: float, normal_k: int = 10):
        self.dataset = dataset
        self.gamma = gamma
        self.theta = theta
        self.normal_k = normal_k
        self._cache = {}

    def get(self, e: int, t: int) -> np.ndarray:
        key = (e, t)
        if key not in self._cache:
            self._cache[key] = contact_targets(
                self.dataset.packs[e], t, self.gamma, self.theta, self.normal_k
            )
        return self._cache[key]


def action_window(pack: EpisodePack, t: int, horizon: int) -> np.ndarray:
    """Future horizon of (arm, hand) actions from step t, repeating the last row past the end."""
    arm = pack.streams["arm_action"]
    hand = pack.streams["hand_action"]
    idx = np.minimum(np.arange(t, t + horizon), pack.steps - 1)
    return np.concatenate([arm[idx], hand[idx]], axis=1)


def history_indices(t: int, n_obs_steps: int) -> np.ndarray:
    """Observation history t-n+1..t, clamped by repetition at the episode start."""
    return np.maximum(np.arange(t - n_obs_steps + 1, t + 1), 0)


def normalized_frame(pack: EpisodePack, t: int, normalizer: Normalizer, subset=None) -> dict:
    """One observation's normalized streams; `subset` optionally subsamples cloud points."""
    obj = pack.streams["object_pc"][t]
    hand = pack.streams["hand_pc"][t]
    if subset is not None:
        obj = obj[subset]
        hand = hand[subset]
    return {
        "obj_pc": normalize(obj, normalizer, "object_pc").astype(np.float32),
        "hand_pc": normalize(hand, normalizer, "hand_pc").astype(np.float32),
        "arm_state": normalize(pack.streams["arm_state"][t], normalizer, "arm_state").astype(np.float32),
        "hand_state": normalize(pack.streams["hand_state"][t], normalizer, "hand_state").astype(np.float32),
    }


def pretrain_batch(
    dataset: DemoDataset,
    frames: list,
    normalizer: Normalizer,
    contacts: ContactCache,
    horizon: int,
    rng: np.random.Generator | None = None,
    n_subset: int | None = None,
) -> dict:
    """Assemble one pretraining batch from (episode, step) pairs.

    With `n_subset`, each sample uses a random point subset of both clouds (and
    the matching contact entries); training on subsets cuts the attention cost
    while evaluation still runs on full clouds.
    """
    rows = {k: [] for k in ("obj_pc", "hand_pc", "arm_state", "hand_state", "contact", "arm_seq", "hand_seq")}
    for e, t in frames:
        pack = dataset.packs[e]
        subset = None
        if n_subset is not None and n_subset < pack.n_points:
            subset = rng.choice(pack.n_points, n_subset, replace=False)
        frame = normalized_frame(pack, t, normalizer, subset)
        contact = contacts.get(e, t)
        window = action_window(pack, t, horizon)
        rows["obj_pc"].append(frame["obj_pc"])
        rows["hand_pc"].append(frame["hand_pc"])
        rows["arm_state"].append(frame["arm_state"])
        rows["hand_state"].append(frame["hand_state"])
        rows["contact"].append(contact if subset is None else contact[subset])
        rows["arm_seq"].append(normalize(window[:, :pack.arm_dim], normalizer, "arm_action").astype(np.float32))
        rows["hand_seq"].append(normalize(window[:, pack.arm_dim:], normalizer, "hand_action").astype(np.float32))
    return {k: np.stack(v) for k, v in rows.items()}


def fit_dataset_normalizer(dataset: DemoDataset) -> Normalizer:
    return fit_normalizer(dataset.packs)
