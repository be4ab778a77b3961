"""Desk-scale experiment definitions with an on-disk cache of trained checkpoints.

Training a model takes tens of minutes on one CPU, so trained parameters are
stored under ``$ITERSYNC_CACHE`` (default ``~/.cache/itersync``) keyed by a hash
of the full data and training configuration.  Deleting the directory forces
retraining; results are deterministic either way.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .formats import CheckpointError, load_checkpoint, save_checkpoint, write_json
from .liegroup import Group
from .network import Architecture, NetworkParams
from .synthgen import SynthConfig, generate_splits
from .trainer import TrainConfig, train
from .viewgraph import ViewGraph

log = logging.getLogger(__name__)

CACHE_ENV = "ITERSYNC_CACHE"


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "itersync"))


@dataclass(frozen=True)
class Experiment:
    name: str
    synth: SynthConfig
    splits: tuple[int, int, int]  # train, val, test
    train: TrainConfig
    arch_overrides: dict = field(default_factory=dict)

    def arch(self) -> Architecture:
        return Architecture.for_group(self.synth.group, **self.arch_overrides)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "synth": self.synth.to_dict(),
            "splits": list(self.splits),
            "train": asdict(self.train),
            "arch": self.arch().to_dict(),
        }

    def key(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data(self) -> tuple[list[ViewGraph], list[ViewGraph], list[ViewGraph]]:
        tr, va, te = generate_splits(self.synth, self.splits)
        return tr, va, te

    def checkpoint_path(self, root: Path | None = None) -> Path:
        return (root or cache_dir()) / f"{self.name}-{self.key()}.ckpt"

    def trained(self, root: Path | None = None) -> NetworkParams:
        """Cached best-on-validation parameters, training first when absent."""
        path = self.checkpoint_path(root)
        if path.exists():
            try:
                return load_checkpoint(path, self.synth.group)
            except CheckpointError as exc:
                log.warning("ignoring unreadable cache entry %s: %s", path, exc)
        tr, va, _ = self.data()
        log.info("training %s (%d steps); checkpoint -> %s", self.name, self.train.steps, path)
        path.parent.mkdir(parents=True, exist_ok=True)
        result = train(tr, self.train, self.arch(), val=va, log_path=path.with_suffix(".csv"))
        write_json(path.with_suffix(".json"), {**self.to_dict(), "best_step": result.best_step,
                                                "best_val_median_deg": result.best_val,
                                                "seconds": result.seconds})
        save_checkpoint(result.params, path)
        return result.params


SO3_DESK = Experiment(
    name="so3-desk",
    synth=SynthConfig(group=Group.SO3, n_nodes=(20, 60), edge_density=(0.25, 0.5),
                      sigma_rot=math.radians(3.0), outlier_fraction=0.2, seed=7),
    splits=(160, 20, 20),
    train=TrainConfig(steps=20000, val_every=500, seed=0),
)

# Windows of 30 frames with every pair registered (complete graphs), with a
# spread of outlier rates so one model covers the sweep.  Prefixes of a
# complete graph stay complete.
SE3_TESTBED = Experiment(
    name="se3-testbed",
    synth=SynthConfig(group=Group.SE3, n_nodes=(30, 30), edge_density=(1.0, 1.0),
                      sigma_rot=math.radians(3.0), sigma_trans=0.02, outlier_fraction=(0.0, 0.5), seed=11),
    splits=(160, 20, 20),
    train=TrainConfig(steps=12000, val_every=500, seed=0),
)

EXPERIMENTS = {e.name: e for e in (SO3_DESK, SE3_TESTBED)}
