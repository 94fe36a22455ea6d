"""Training loop: chunked recordings, Adam with the Noam schedule, per-epoch checkpoints.

The training config is a flat ``key = value`` text file (``#`` starts a
comment); every key can also be overridden from the command line.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .features import mean_normalize, read_features
from .model import ModelConfig, build_model, load_model, save_model
from .rttm import read_labels

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDataError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    feat_dim: int = 345
    dim: int = 256
    num_blocks: int = 4
    num_heads: int = 4
    ff_dim: int = 0
    head: str = "eda"
    num_speakers: int = 2
    dropout: float = 0.0
    chunk: int = 500
    batch_size: int = 8
    warmup: int = 1000
    lr_scale: float = 1.0
    fixed_lr: float = 0.0  # > 0 replaces the Noam schedule (adaptation)
    grad_clip: float = 0.0  # > 0 caps the global L2 norm of the gradient
    epochs: int = 10
    seed: int = 0
    alpha: float = 1.0
    grad_routing: str = "full"  # "full" or "stop" (existence loss trains only its own layer)
    shuffle: int = 1  # feed the attractor encoder a shuffled frame order
    mean_norm: int = 1
    max_skip_fraction: float = 0.1
    keep_checkpoints: int = 0  # 1: keep every epoch's checkpoint, 0: only the latest

    def __post_init__(self):
        if self.chunk < 1 or self.batch_size < 1:
            raise ValueError("chunk length and batch size must be at least 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.grad_routing not in ("full", "stop"):
            raise ValueError(f"unknown gradient routing {self.grad_routing!r}")

    def model_config(self):
        return ModelConfig(self.feat_dim, self.dim, self.num_blocks, self.num_heads, self.ff_dim,
                           self.head, self.num_speakers, self.seed, self.dropout)

    @classmethod
    def from_dict(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise KeyError(f"unknown training config keys: {sorted(unknown)}")
        conv = {"int": int, "float": float, "str": str}
        return cls(**{k: conv[types[k]](v) for k, v in values.items()})

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def parse_config_text(text):
    """Flat ``key = value`` lines to a dict of strings."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file, then ``overrides`` (highest precedence)."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


def noam_lr(step, dim, warmup, scale=1.0):
    """Linear warmup then inverse-square-root decay, peaking at ``step == warmup``."""
    if step < 1:
        raise ValueError("Noam schedule is defined for step >= 1")
    return scale * dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update in place; ``grads`` maps names to arrays (None = zero)."""
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient at step {state.step + 1} in: {', '.join(sorted(bad))}")
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def clip_gradients(grads, max_norm):
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the (possibly new) gradient dict and the norm before clipping.
    ``max_norm <= 0`` disables clipping.  A non-finite norm is left alone so
    that the optimizer can report the offending parameters.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None)))
    if max_norm > 0 and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        grads = {k: None if g is None else g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class ManifestEntry:
    features: Path
    labels: Path
    recording_id: str


def read_manifest(path):
    """Tab-separated lines: feature path, label path, recording id (paths relative to the manifest)."""
    path = Path(path)
    base = path.parent
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 3 tab-separated fields")
        out.append(ManifestEntry(base / parts[0], base / parts[1], parts[2]))
    return out


def chunk_ranges(num_frames, chunk):
    return [(a, min(a + chunk, num_frames)) for a in range(0, num_frames, chunk)]


def make_chunks(frames, labels, chunk):
    """Split into ``chunk``-frame pieces; speakers silent within a piece are dropped from its labels."""
    out = []
    for a, b in chunk_ranges(frames.shape[0], chunk):
        y = labels[:, a:b]
        out.append((frames[a:b], y[y.any(axis=1)].astype(np.float64)))
    return out


def load_training_data(manifests, config):
    """Chunks of every usable recording; mismatched items are skipped with a warning."""
    entries = [e for m in manifests for e in read_manifest(m)]
    if not entries:
        raise TrainingDataError("training manifest is empty")
    chunks, skipped = [], []
    for entry in entries:
        feats = read_features(entry.features)
        activity = read_labels(entry.labels)
        if activity.num_frames != feats.num_frames or feats.dim != config.feat_dim:
            skipped.append(entry.recording_id)
            warnings.warn(f"skipping {entry.recording_id}: {feats.num_frames}x{feats.dim} features, "
                          f"{activity.num_frames} label frames")
            continue
        frames = mean_normalize(feats.frames) if config.mean_norm else feats.frames
        chunks.extend(make_chunks(frames, activity.matrix, config.chunk))
    if len(skipped) > config.max_skip_fraction * len(entries):
        raise TrainingDataError(f"{len(skipped)} of {len(entries)} recordings unusable")
    return chunks


def epoch_batches(chunks, batch_size, rng):
    """Shuffle chunks, then group equal-length chunks into batches of at most ``batch_size``."""
    buckets, batches = {}, []
    for i in rng.permutation(len(chunks)):
        n = chunks[i][0].shape[0]
        bucket = buckets.setdefault(n, [])
        bucket.append(int(i))
        if len(bucket) == batch_size:
            batches.append(bucket[:])
            bucket.clear()
    batches.extend(b for _, b in sorted(buckets.items()) if b)
    return batches


def train(manifests, config, out_dir, init=None, progress=None):
    """Train and write ``checkpoint.npz`` plus ``loss.tsv`` under ``out_dir``; returns the model.

    ``init`` is an optional checkpoint to start from (adaptation).  The loss
    log has one line per epoch with mean diarization, existence and total
    loss over chunks, and the final learning rate of the epoch.
    """
    if isinstance(manifests, (str, Path)):
        manifests = [manifests]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chunks = load_training_data(manifests, config)
    if init is not None:
        model, _ = load_model(init)
        model.config.dropout = config.dropout  # a training setting, not part of the architecture
    else:
        model = build_model(config.model_config())
    params = model.named_parameters()
    state = OptimizerState()
    stop = config.grad_routing == "stop"
    (out / "train_config.txt").write_text(config.to_text())
    lines = ["epoch\tdiar\texist\ttotal\tlr"]
    lr = 0.0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        sums = np.zeros(3)
        for batch in epoch_batches(chunks, config.batch_size, rng):
            x = np.stack([chunks[i][0] for i in batch])
            labels = [chunks[i][1] for i in batch]
            orders = (np.stack([rng.permutation(x.shape[1]) for _ in batch]) if config.shuffle else None)
            model.zero_grad()
            loss, parts = model.batch_loss(x, labels, orders, config.alpha, stop, rng)
            loss.backward()
            if config.fixed_lr > 0:
                lr = config.fixed_lr
            else:
                lr = noam_lr(state.step + 1, config.dim, config.warmup, config.lr_scale)
            grads, _ = clip_gradients({k: p.grad for k, p in params.items()}, config.grad_clip)
            adam_step(params, grads, state, lr)
            for p in parts:
                f = p.as_floats()
                sums += (f["diar"], f["exist"], f["total"])
        means = sums / len(chunks)
        lines.append(f"{epoch}\t{means[0]:.6f}\t{means[1]:.6f}\t{means[2]:.6f}\t{lr:.6e}")
        (out / "loss.tsv").write_text("\n".join(lines) + "\n")
        meta = {"epoch": epoch, "train": asdict(config)}
        save_model(out / "checkpoint.npz", model, meta)
        if config.keep_checkpoints:
            save_model(out / f"checkpoint_{epoch:03d}.npz", model, meta)
        log.info("epoch %d: diar %.4f exist %.4f total %.4f", epoch, *means)
        if progress:
            progress(epoch, means)
    return model
