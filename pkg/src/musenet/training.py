"""Multi-branching training of the dual-stream encoder.

Class imbalance is handled structurally: the majority class is split into
near-equal shards, each branch head trains on the full minority class plus
one shard, and the shared encoder accumulates gradients from every branch.
Inference averages the branch probabilities.  Optimization is Adam with
decoupled weight decay on the tape-autodiff parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor
from .encoder import EncoderConfig, EncoderParameters, forward_batch
from .records import ImputationResult

PROB_CLAMP = 1e-7


class EmptyClass(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class BranchAssignment:
    """Record-id sets per branch: full minority plus one majority shard."""

    branch_ids: list[list[str]]

    @property
    def n_branches(self) -> int:
        return len(self.branch_ids)

    def membership(self, record_id: str) -> list[int]:
        return [i for i, ids in enumerate(self.branch_ids) if record_id in ids]


def multi_branch_partition(results: list[ImputationResult], n_branches: int,
                           seed: int) -> BranchAssignment:
    """Shuffle the majority class and deal it into near-equal shards.

    Shard sizes differ by at most one; every branch receives the complete
    minority class (masks travel with their records, so under-sampling the
    records under-samples the masks as well).
    """
    if n_branches < 1:
        raise EmptyClass("need at least one branch")
    positives = [r.patient_id for r in results if r.label == 1]
    negatives = [r.patient_id for r in results if r.label == 0]
    if not positives or not negatives:
        raise EmptyClass("both classes must be represented")
    minority, majority = (positives, negatives) \
        if len(positives) <= len(negatives) else (negatives, positives)
    rng = np.random.default_rng(seed)
    shuffled = [majority[i] for i in rng.permutation(len(majority))]
    shards = [list(shuffled[i::n_branches]) for i in range(n_branches)]
    return BranchAssignment(branch_ids=[sorted(minority) + shard
                                        for shard in shards])


def predict(branch_probabilities) -> float:
    """Final probability: the arithmetic mean of the branch outputs."""
    probs = np.asarray(branch_probabilities, dtype=float)
    if probs.size < 1:
        raise EmptyClass("need at least one branch probability")
    return float(probs.mean())


def clamp_probabilities(probs: Tensor) -> Tensor:
    return as_tensor(probs).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def binary_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Summed BCE of clamped probabilities against 0/1 labels."""
    labels = np.asarray(labels, dtype=float)
    clamped = clamp_probabilities(probs)
    loss = labels * clamped.log() + (1.0 - labels) * (1.0 - clamped).log()
    return -loss.sum()


def mb_loss(branch_probabilities: dict[str, np.ndarray], labels: dict[str, int],
            assignment: BranchAssignment) -> float:
    """Gated cross-entropy: branch i counts record p only when p is in D_i.

    ``branch_probabilities`` maps record id to its per-branch probability
    vector.  Returns the plain double sum over records and branches.
    """
    total = 0.0
    for record_id, probs in branch_probabilities.items():
        probs = np.clip(np.asarray(probs, dtype=float),
                        PROB_CLAMP, 1.0 - PROB_CLAMP)
        label = labels[record_id]
        for branch in assignment.membership(record_id):
            p = probs[branch]
            total -= label * np.log(p) + (1 - label) * np.log(1.0 - p)
    return float(total)


@dataclass
class AdamWState:
    steps: dict = field(default_factory=dict)
    moment1: dict = field(default_factory=dict)
    moment2: dict = field(default_factory=dict)


def adamw_step(params: EncoderParameters, state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update over all parameter tensors.

    Decay shrinks the parameter directly (p -= lr * decay * p), independent
    of the moment-based step; tensors with no gradient this round are
    decayed but not stepped.  Update counts are per tensor, so bias
    correction stays right for branch heads that update lazily.
    """
    for name, tensor in params.tensors.items():
        if weight_decay:
            tensor.data = tensor.data - lr * weight_decay * tensor.data
        grad = tensor.grad
        if grad is None:
            continue
        count = state.steps.get(name, 0) + 1
        state.steps[name] = count
        m = state.moment1.get(name)
        v = state.moment2.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad**2
        state.moment1[name] = m
        state.moment2[name] = v
        correction1 = 1.0 - beta1**count
        correction2 = 1.0 - beta2**count
        step = (m / correction1) / (np.sqrt(v / correction2) + eps)
        tensor.data = tensor.data - lr * step


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    partition_seed: int | None = None   # branch shards fixed apart from seed
    lr_decay_step: int = 0        # halve the rate every this many epochs; 0 = constant
    use_masks: bool = True
    normalize: bool = True        # z-score values with training-set statistics


@dataclass
class Normalizer:
    """Per-variable z-scoring fitted on the training set.

    Keeps feature scales commensurate with the positional encoding and the
    sigmoid heads out of their saturated (zero-gradient) region.  ``clip``
    bounds the z-scores so heavy-tailed variables (the generator's
    non-stationary ones especially) cannot dominate the loss surface.
    """

    mean: np.ndarray
    std: np.ndarray
    clip: float | None = 5.0

    @classmethod
    def fit(cls, results: list[ImputationResult],
            clip: float | None = 5.0) -> "Normalizer":
        stacked = np.concatenate([r.imputed for r in results], axis=0)
        std = stacked.std(axis=0)
        return cls(mean=stacked.mean(axis=0),
                   std=np.where(std > 1e-12, std, 1.0), clip=clip)

    @classmethod
    def identity(cls, n_variables: int) -> "Normalizer":
        return cls(mean=np.zeros(n_variables), std=np.ones(n_variables),
                   clip=None)

    def apply(self, values: np.ndarray) -> np.ndarray:
        z = (values - self.mean) / self.std
        if self.clip is not None:
            z = np.clip(z, -self.clip, self.clip)
        return z

    def to_json_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "clip": self.clip}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Normalizer":
        return cls(mean=np.asarray(doc["mean"], dtype=float),
                   std=np.asarray(doc["std"], dtype=float),
                   clip=doc.get("clip"))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    auroc: float | None = None
    auprc: float | None = None
    f1: float | None = None
    recall: float | None = None


def _batch_arrays(results: list[ImputationResult], use_masks: bool,
                  normalizer: Normalizer | None = None):
    values = np.stack([r.imputed for r in results])
    if normalizer is not None:
        values = normalizer.apply(values)
    masks = np.stack([r.mask for r in results]) if use_masks \
        else np.zeros_like(values)
    times = np.stack([r.times for r in results])
    labels = np.asarray([r.label for r in results], dtype=float)
    return values, masks, times, labels


def _branch_batches(assignment, by_id, batch_size, rng):
    """Round-robin (branch, batch) schedule with per-epoch shuffling."""
    per_branch = []
    for ids in assignment.branch_ids:
        order = [ids[i] for i in rng.permutation(len(ids))]
        per_branch.append([order[i:i + batch_size]
                           for i in range(0, len(order), batch_size)])
    schedule = []
    most = max(len(b) for b in per_branch)
    for step in range(most):
        for branch, batches in enumerate(per_branch):
            if step < len(batches):
                schedule.append((branch, [by_id[rid] for rid in batches[step]]))
    return schedule


def train(results: list[ImputationResult], config: EncoderConfig,
          train_config: TrainConfig, validation: list[ImputationResult] | None = None,
          metric_fns: dict | None = None):
    """Train branch heads on balanced subsets and the encoder on all of them.

    Per epoch, every branch's subset is shuffled and chunked; batches are
    interleaved across branches so the encoder sees balanced gradients
    throughout.  Each batch's loss is the mean gated cross-entropy of the
    owning branch only, so a branch head receives gradients exclusively
    from its own sub-dataset.  Returns (parameters, per-epoch metric trace,
    fitted normalizer); validation metrics are filled when a validation
    set is supplied.
    """
    params = EncoderParameters(config)
    state = AdamWState()
    partition_seed = train_config.partition_seed \
        if train_config.partition_seed is not None else train_config.seed
    assignment = multi_branch_partition(results, config.n_branches,
                                        partition_seed)
    by_id = {r.patient_id: r for r in results}
    rng = np.random.default_rng(train_config.seed)
    trace: list[EpochMetrics] = []
    normalizer = Normalizer.fit(results) if train_config.normalize \
        else Normalizer.identity(config.n_variables)

    for epoch in range(train_config.epochs):
        lr = train_config.learning_rate
        if train_config.lr_decay_step:
            lr = lr * 0.5 ** (epoch // train_config.lr_decay_step)
        epoch_loss = 0.0
        n_terms = 0
        for branch, batch in _branch_batches(assignment, by_id,
                                             train_config.batch_size, rng):
            values, masks, times, labels = _batch_arrays(
                batch, train_config.use_masks, normalizer)
            params.zero_grads()
            probs, _ = forward_batch(values, masks, times, params,
                                     dropout_rng=rng if config.dropout else None)
            # Select this branch's column by a constant one-hot contraction.
            onehot = np.zeros((config.n_branches, 1))
            onehot[branch, 0] = 1.0
            branch_probs = (probs @ onehot).reshape(len(batch))
            loss = binary_cross_entropy(branch_probs, labels) * (1.0 / len(batch))
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, branch {branch}")
            loss.backward()
            # Heads outside this branch got identically zero gradients from
            # the gate; drop them so stale Adam momentum cannot keep moving
            # a head between its own batches.
            for other in range(config.n_branches):
                if other != branch:
                    params[f"head.branch{other}.weight"].grad = None
                    params[f"head.branch{other}.bias"].grad = None
            adamw_step(params, state, lr, train_config.beta1,
                       train_config.beta2, train_config.epsilon,
                       train_config.weight_decay)
            if not params.all_finite():
                raise NonFiniteLoss(f"parameters diverged at epoch {epoch}")
            epoch_loss += float(loss.data) * len(batch)
            n_terms += len(batch)
        metrics = EpochMetrics(epoch=epoch,
                               loss=epoch_loss / max(n_terms, 1))
        if validation and metric_fns:
            scores, labels = score_dataset(params, validation,
                                           train_config.use_masks,
                                           normalizer=normalizer)
            for key, fn in metric_fns.items():
                setattr(metrics, key, fn(scores, labels))
        trace.append(metrics)
    return params, trace, normalizer


def score_dataset(params: EncoderParameters, results: list[ImputationResult],
                  use_masks: bool = True, batch_size: int = 256,
                  normalizer: Normalizer | None = None):
    """Mean-of-branches probability per record, batched, no gradients."""
    scores = []
    labels = []
    for start in range(0, len(results), batch_size):
        chunk = results[start:start + batch_size]
        values, masks, times, batch_labels = _batch_arrays(chunk, use_masks,
                                                           normalizer)
        probs, _ = forward_batch(values, masks, times, params)
        scores.extend(float(p) for p in probs.data.mean(axis=1))
        labels.extend(int(l) for l in batch_labels)
    return np.asarray(scores), np.asarray(labels)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(stem, params: EncoderParameters, seeds=None, epoch=0,
                    extra=None):
    """Manifest JSON plus little-endian float64 blob with declared ordering."""
    stem = Path(stem)
    entries = []
    offset = 0
    blob = bytearray()
    for name, tensor in params.tensors.items():
        count = tensor.data.size
        entries.append({"name": name, "shape": list(tensor.data.shape),
                        "offset": offset, "count": count})
        blob.extend(struct.pack(f"<{count}d", *tensor.data.ravel().tolist()))
        offset += count
    manifest = {"config": params.config.to_json_dict(),
                "seeds": seeds or {}, "epoch": epoch,
                "parameter_order": entries,
                "blob": stem.name + ".bin"}
    if extra:
        manifest["extra"] = extra
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    stem.with_suffix(".bin").write_bytes(bytes(blob))


def load_checkpoint(stem):
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    raw = (stem.parent / manifest["blob"]).read_bytes()
    config = EncoderConfig.from_json_dict(manifest["config"])
    params = EncoderParameters(config)
    for entry in manifest["parameter_order"]:
        count = entry["count"]
        start = entry["offset"] * 8
        flat = np.asarray(struct.unpack(f"<{count}d",
                                        raw[start:start + count * 8]))
        params.tensors[entry["name"]].data = flat.reshape(entry["shape"])
    return params, manifest


# -- attention export --------------------------------------------------------


def export_attention(params: EncoderParameters, results: list[ImputationResult],
                     use_masks: bool = True, batch_size: int = 256,
                     normalizer: Normalizer | None = None):
    """Average attention maps over records, plus per-class column sums.

    Returns (mean_maps, column_sums): mean_maps[(layer, stream)] is the
    (T, T) record-mean score matrix; column_sums[(layer, stream, label)]
    is the per-key-step attention mass averaged over records of that class.
    """
    sums: dict[tuple, np.ndarray] = {}
    col_sums: dict[tuple, np.ndarray] = {}
    class_counts = {0: 0, 1: 0}
    total = 0
    for start in range(0, len(results), batch_size):
        chunk = results[start:start + batch_size]
        values, masks, times, labels = _batch_arrays(chunk, use_masks,
                                                     normalizer)
        _, maps = forward_batch(values, masks, times, params)
        for amap in maps:
            key = (amap.layer, amap.stream)
            sums[key] = sums.get(key, 0.0) + amap.scores.sum(axis=0)
            for label in (0, 1):
                members = labels == label
                if members.any():
                    ckey = (amap.layer, amap.stream, label)
                    col_sums[ckey] = col_sums.get(ckey, 0.0) \
                        + amap.scores[members].sum(axis=(0, 1))
        class_counts[0] += int((labels == 0).sum())
        class_counts[1] += int((labels == 1).sum())
        total += len(chunk)
    mean_maps = {key: val / total for key, val in sums.items()}
    col_sums = {key: val / max(class_counts[key[2]], 1)
                for key, val in col_sums.items()}
    return mean_maps, col_sums


def attention_csv_lines(mean_maps) -> list[str]:
    """CSV rows for the record-averaged maps: layer,stream,row,col,value."""
    lines = ["layer,stream,row,col,value"]
    for (layer, stream) in sorted(mean_maps, key=lambda k: (k[0], k[1])):
        matrix = mean_maps[(layer, stream)]
        for row in range(matrix.shape[0]):
            for col in range(matrix.shape[1]):
                lines.append(f"{layer},{stream},{row},{col},"
                             f"{float(matrix[row, col])!r}")
    return lines


def attention_colsum_csv_lines(col_sums) -> list[str]:
    lines = ["layer,stream,label,col,value"]
    for (layer, stream, label) in sorted(col_sums):
        vector = col_sums[(layer, stream, label)]
        for col in range(vector.shape[0]):
            lines.append(f"{layer},{stream},{label},{col},"
                         f"{float(vector[col])!r}")
    return lines
