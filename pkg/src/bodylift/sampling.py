"""Synthetic training pairs: sample a generative code, pose it, add landmark noise.

Every example k draws from its own counter-based stream keyed by
``(seed, k)``, so examples can be produced in any order, in parallel, or
one at a time, and always come out identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bodylift.body_model import (
    KinematicModel,
    PoseState,
    center_at_hips,
    pose_landmarks,
)
from bodylift.errors import FormatError
from bodylift.rotations import matrix_to_rot6d, quaternion_to_matrix

DATASET_MAGIC = b"BLDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = 0
    translation_half_extent: tuple[float, float, float] = (0.1, 0.1, 0.1)
    noise_sigma: float = 0.005
    latent_std: float = 1.0

    def __post_init__(self):
        if any(h < 0 for h in self.translation_half_extent):
            raise ValueError("translation half extents must be >= 0")
        if self.noise_sigma < 0 or self.latent_std < 0:
            raise ValueError("noise_sigma and latent_std must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translation_half_extent"] = list(self.translation_half_extent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(
            seed=int(d["seed"]),
            translation_half_extent=tuple(float(x) for x in d["translation_half_extent"]),
            noise_sigma=float(d["noise_sigma"]),
            latent_std=float(d["latent_std"]),
        )


@dataclass
class TrainingExample:
    input: np.ndarray
    target: PoseState
    clean: np.ndarray


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox substream for example ``index`` of a dataset."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_haar_so3(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform rotation(s): normalize a 4D Gaussian to a unit quaternion."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    q = rng.standard_normal(shape + (4,))
    return quaternion_to_matrix(q)


def sample_state(model: KinematicModel, config: SamplerConfig, rng: np.random.Generator) -> PoseState:
    R = sample_haar_so3(rng)
    beta = config.latent_std * rng.standard_normal(model.shape_dim)
    theta = config.latent_std * rng.standard_normal(model.pose_dim)
    h = np.asarray(config.translation_half_extent, dtype=np.float64)
    t = rng.uniform(-1.0, 1.0, size=3) * h
    return PoseState(r=matrix_to_rot6d(R), t=t, beta=beta, theta=theta)


def make_training_example(
    model: KinematicModel, config: SamplerConfig, rng: np.random.Generator
) -> TrainingExample:
    state = sample_state(model, config, rng)
    clean = center_at_hips(pose_landmarks(model, state), model.layout)
    noise = config.noise_sigma * rng.standard_normal(clean.shape)
    return TrainingExample(input=clean + noise, target=state, clean=clean)


def regenerate_example(model: KinematicModel, config: SamplerConfig, index: int) -> TrainingExample:
    return make_training_example(model, config, example_rng(config.seed, index))


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, S, 3)
    targets: PoseState  # batched, leading axis N
    clean: np.ndarray  # (N, S, 3)
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.clean[idx], dict(self.header))

    def split(self, holdout_fraction: float = 0.1) -> tuple["Dataset", "Dataset"]:
        """Train / held-out split; the held-out part is the tail by index."""
        n = len(self)
        n_eval = int(round(n * holdout_fraction))
        if n > 1:
            n_eval = min(max(n_eval, 1), n - 1)
        else:
            n_eval = 0
        cut = n - n_eval
        return self.subset(slice(0, cut)), self.subset(slice(cut, n))


def build_examples(model: KinematicModel, config: SamplerConfig, count: int) -> Dataset:
    if count <= 0:
        raise ValueError("count must be positive")
    S = model.landmark_count
    inputs = np.empty((count, S, 3))
    clean = np.empty((count, S, 3))
    vec = np.empty((count, 9 + model.shape_dim + model.pose_dim))
    for k in range(count):
        ex = regenerate_example(model, config, k)
        inputs[k], clean[k], vec[k] = ex.input, ex.clean, ex.target.to_vector()
    targets = PoseState.from_vector(vec, model.shape_dim, model.pose_dim)
    header = _header(model, config, count)
    return Dataset(inputs, targets, clean, header)


def _header(model, config, count):
    return {
        "version": DATASET_VERSION,
        "count": int(count),
        "landmarks": model.landmark_count,
        "shape_dim": model.shape_dim,
        "pose_dim": model.pose_dim,
        "model_hash": model.content_hash,
        "config": config.to_dict(),
        "record": ["input", "r", "t", "beta", "theta", "clean"],
    }


def write_dataset(dataset: Dataset, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    then one little-endian float64 record per example."""
    head = json.dumps(dataset.header, sort_keys=True, separators=(",", ":")).encode()
    n = len(dataset)
    records = np.concatenate(
        [
            dataset.inputs.reshape(n, -1),
            dataset.targets.to_vector(),
            dataset.clean.reshape(n, -1),
        ],
        axis=1,
    )
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(head)))
        fh.write(head)
        fh.write(records.astype("<f8").tobytes())


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode())
    n, S = header["count"], header["landmarks"]
    db, dt = header["shape_dim"], header["pose_dim"]
    width = 6 * S + 9 + db + dt
    body = np.frombuffer(blob[12 + hlen :], dtype="<f8")
    if body.size != n * width:
        raise FormatError(f"{path}: expected {n} records of {width} floats, found {body.size} floats")
    rec = body.reshape(n, width).astype(np.float64)
    inputs = rec[:, : 3 * S].reshape(n, S, 3)
    targets = PoseState.from_vector(rec[:, 3 * S : 3 * S + 9 + db + dt], db, dt)
    clean = rec[:, 3 * S + 9 + db + dt :].reshape(n, S, 3)
    return Dataset(inputs, targets, clean, header)


def generate_dataset(model: KinematicModel, config: SamplerConfig, count: int, path) -> Dataset:
    dataset = build_examples(model, config, count)
    write_dataset(dataset, path)
    return dataset


def export_dataset_json(dataset: Dataset, path) -> None:
    """Lossless text dump (floats are written with round-trip repr)."""
    doc = {
        "header": dataset.header,
        "examples": [
            {
                "input": dataset.inputs[k].tolist(),
                "target": dataset.targets[k].to_dict(),
                "clean": dataset.clean[k].tolist(),
            }
            for k in range(len(dataset))
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def import_dataset_json(path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    ex = doc["examples"]
    targets = [PoseState.from_dict(e["target"]) for e in ex]
    stacked = PoseState(
        np.array([s.r for s in targets]),
        np.array([s.t for s in targets]),
        np.array([s.beta for s in targets]),
        np.array([s.theta for s in targets]),
    )
    return Dataset(
        np.array([e["input"] for e in ex], dtype=np.float64),
        stacked,
        np.array([e["clean"] for e in ex], dtype=np.float64),
        doc["header"],
    )
