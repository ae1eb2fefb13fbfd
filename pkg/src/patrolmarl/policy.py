"""Observation encoding plus the shared actor and centralised critic networks.

Both networks run the map and idleness channels through the same conv trunk
shape (2->4->8 channels, 3x3 kernels, tanh), flatten, append the flat
observation extras and finish with a 512-341-227 tanh MLP.  The flattened
width follows the map size, so nothing here is tied to one map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .environment import ActorObservation, CriticObservation

HIDDEN = (512, 341, 227)
ACTOR_EXTRAS = 7  # location (2) + battery (1) + action mask (4)


def conv_trunk() -> list:
    return [ad.Conv2d(2, 4, 3, 1, 0), ad.Tanh(), ad.Conv2d(4, 8, 3, 1, 0), ad.Tanh(), ad.Flatten()]


def mlp_head(in_features: int, out_features: int) -> list:
    layers, width = [], in_features
    for h in HIDDEN:
        layers += [ad.Dense(width, h), ad.Tanh()]
        width = h
    layers.append(ad.Dense(width, out_features))
    return layers


def conv_features(map_shape: tuple[int, int]) -> int:
    return ad.output_shape(conv_trunk(), (2, *map_shape))[0]


def encode_actor(obs: ActorObservation) -> tuple[np.ndarray, np.ndarray]:
    """Conv input ``(2, H, W)`` and the flat extras appended after the trunk."""
    grid = np.stack([obs.map_channel, obs.idleness])
    extras = np.concatenate([obs.location, [obs.battery], obs.mask])
    return grid, extras


def encode_critic(obs: CriticObservation) -> tuple[np.ndarray, np.ndarray]:
    grid = np.stack([obs.map_channel, obs.idleness])
    return grid, np.concatenate([obs.batteries, obs.locations])


def _subset(params: dict[str, ad.Tensor], prefix: str) -> dict[str, ad.Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class PolicySet:
    """Actor parameter set(s) plus one critic.

    A homogeneous team has exactly one actor shared by every agent; the
    individual-learner baseline keeps one actor per agent slot.
    """

    map_shape: tuple[int, int]
    max_agents: int
    actors: list[dict[str, ad.Tensor]]
    critic: dict[str, ad.Tensor]
    trunk: list = field(default_factory=conv_trunk)

    @classmethod
    def create(cls, map_shape, max_agents: int, seed=0, n_actors: int = 1,
               actor_head_gain: float = 0.01, critic_head_gain: float = 1.0) -> "PolicySet":
        rng = np.random.default_rng(seed)
        map_shape = tuple(map_shape)
        feats = conv_features(map_shape)
        trunk = conv_trunk()

        def build(head, head_gain):
            p = ad.init_params(trunk, rng, prefix="conv.")
            p.update(ad.init_params(head, rng, last_gain=head_gain, prefix="head."))
            return p

        actors = [build(mlp_head(feats + ACTOR_EXTRAS, 4), actor_head_gain) for _ in range(n_actors)]
        critic = build(mlp_head(feats + 3 * max_agents, 1), critic_head_gain)
        return cls(map_shape, max_agents, actors, critic, trunk)

    @property
    def homogeneous(self) -> bool:
        return len(self.actors) == 1

    @property
    def actor_head(self) -> list:
        return mlp_head(conv_features(self.map_shape) + ACTOR_EXTRAS, 4)

    @property
    def critic_head(self) -> list:
        return mlp_head(conv_features(self.map_shape) + 3 * self.max_agents, 1)

    def _run(self, params, head, grids, extras) -> ad.Tensor:
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim == 3:
            grids = grids[None]
        extras = np.atleast_2d(np.asarray(extras, dtype=np.float64))
        feat = ad.forward(self.trunk, _subset(params, "conv."), ad.Tensor(grids))
        return ad.forward(head, _subset(params, "head."), ad.concat([feat, ad.Tensor(extras)]))

    def actor_logits(self, grids, extras, actor: int = 0) -> ad.Tensor:
        return self._run(self.actors[actor], self.actor_head, grids, extras)

    def actor_probs(self, grids, extras, masks, actor: int = 0) -> ad.Tensor:
        return ad.masked_softmax(self.actor_logits(grids, extras, actor), np.atleast_2d(masks))

    def critic_values(self, grids, extras) -> ad.Tensor:
        out = self._run(self.critic, self.critic_head, grids, extras)
        return ad.reshape(out, (out.shape[0],))

    def actor_forward(self, obs: ActorObservation, actor: int = 0) -> np.ndarray:
        grid, extras = encode_actor(obs)
        return self.actor_probs(grid, extras, obs.mask, actor).data[0]

    def critic_forward(self, obs: CriticObservation) -> float:
        grid, extras = encode_critic(obs)
        return float(self.critic_values(grid, extras).data[0])

    # -- persistence --------------------------------------------------------

    def arrays(self, actors: list[int] | None = None) -> dict[str, np.ndarray]:
        idx = range(len(self.actors)) if actors is None else actors
        out = {f"critic/{k}": v.data for k, v in self.critic.items()}
        for i in idx:
            out.update({f"actor{i}/{k}": v.data for k, v in self.actors[i].items()})
        return out

    def meta(self) -> dict:
        return {"map_shape": list(self.map_shape), "max_agents": self.max_agents,
                "n_actors": len(self.actors), "format": 1}

    def save(self, path: str | Path, actors: list[int] | None = None) -> None:
        meta = self.meta()
        if actors is not None:
            meta["actor_ids"] = list(actors)
        ad.save_checkpoint(path, self.arrays(actors), meta)

    @classmethod
    def load(cls, path: str | Path) -> "PolicySet":
        arrays, meta = ad.load_checkpoint(path)
        ids = meta.get("actor_ids", list(range(meta["n_actors"])))
        policy = cls.create(tuple(meta["map_shape"]), meta["max_agents"], n_actors=len(ids))
        for name, p in policy.critic.items():
            p.data[...] = arrays[f"critic/{name}"]
        for slot, i in enumerate(ids):
            for name, p in policy.actors[slot].items():
                p.data[...] = arrays[f"actor{i}/{name}"]
        return policy

    def snapshot(self) -> "PolicySet":
        """Independent copy; collectors act on snapshots while the trainer updates."""
        def dup(params):
            return {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}
        return PolicySet(self.map_shape, self.max_agents, [dup(a) for a in self.actors],
                         dup(self.critic), conv_trunk())


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Categorical draw; zero-probability entries can never be returned."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    positive = np.nonzero(probs > 0)[0]
    if idx >= len(probs) or probs[idx] <= 0:
        idx = int(positive[-1])
    return idx, float(probs[idx])
