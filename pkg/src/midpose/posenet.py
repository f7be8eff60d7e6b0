"""Two-stage azimuth/elevation classifier.

Stage 1 fuses the normal and re-shading feature maps (concatenate to
16x16x16, bilinear upsample to 128x128, 1x1 conv down to 8 channels) and
classifies azimuth and elevation bins with two heads on a shared trunk.

Stage 2 is a binary verifier: the fused features gated by the predicted
object mask, stacked with one candidate D-mask as a ninth channel, are
scored for "this D-mask shows the right pose".  At test time the top three
stage-1 azimuth candidates are verified and :func:`select_pose` picks the
verified candidate with the highest stage-1 probability.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .binning import assign_bin, is_correct
from .errors import BadMagicError, ConfigurationError, FormatError, MissingFileError, TruncatedFileError
from .silhouette import Mask, template_match
from .tensorkit import (SGD, BatchNorm, Conv2D, Dropout, Flatten, Layer, Linear, ReLU, Sequential,
                        UpsampleBilinear, bce, cross_entropy, effective_lr, sigmoid, softmax)

log = logging.getLogger(__name__)

FUSED_SIZE = 128
FUSED_CHANNELS = 8
HEAD_INIT_SCALE = 0.01
TOP_K = 3


class FeatureFuser(Layer):
    """Concatenate (normal, re-shading), upsample to 128x128, 1x1 conv to 8 channels."""

    name = "fuser"

    def __init__(self, rng, dtype=np.float32):
        self.upsample = UpsampleBilinear(FUSED_SIZE, FUSED_SIZE)
        self.conv = Conv2D(16, FUSED_CHANNELS, 1, 1, 0, rng, dtype)
        self.conv.input_grad = False

    @property
    def params(self):
        return self.conv.params

    @property
    def grads(self):
        return self.conv.grads

    @property
    def buffers(self):
        return {}

    def zero_grad(self):
        self.conv.zero_grad()

    @staticmethod
    def concat(normal, reshading):
        normal, reshading = np.asarray(normal), np.asarray(reshading)
        if normal.shape[-3:] != (16, 16, 8) or reshading.shape[-3:] != (16, 16, 8):
            raise ConfigurationError(f"feature maps must be 16x16x8, got {normal.shape} and {reshading.shape}")
        return np.concatenate([normal, reshading], axis=-1)

    def forward(self, x, train=False):
        return self.conv.forward(self.upsample.forward(x, train), train)

    def backward(self, grad):
        # the inputs are frozen features: only the conv parameters need gradients
        self.conv.backward(grad)
        return None

    def __call__(self, normal, reshading):
        single = np.ndim(normal) == 3
        x = self.concat(normal, reshading)
        out = self.forward(x[None] if single else x)
        return out[0] if single else out


def fuse_features(normal, reshading, fuser=None):
    """Fused 128x128x8 representation of one (normal, re-shading) pair."""
    fuser = fuser if fuser is not None else FeatureFuser(np.random.default_rng(0))
    return fuser(np.asarray(normal, dtype=np.float32), np.asarray(reshading, dtype=np.float32))


class _Net:
    """Shared parameter plumbing for the two networks."""

    kind = ""

    def layers(self):
        raise NotImplementedError

    def named_layers(self):
        raise NotImplementedError

    def state(self):
        out = {}
        for lname, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{lname}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{lname}.{k}"] = v
        return out

    def load_state(self, state):
        mine = self.state()
        if set(mine) != set(state):
            raise ConfigurationError(f"checkpoint entries do not match a {self.kind} network")
        for k, v in state.items():
            if mine[k].shape != v.shape:
                raise ConfigurationError(f"checkpoint entry {k} has shape {v.shape}, expected {mine[k].shape}")
        for lname, layer in self.named_layers():
            for k in layer.params:
                layer.params[k][...] = state[f"{lname}.{k}"]
            for k in list(layer.buffers):
                layer.buffers[k][...] = state[f"{lname}.{k}"]

    def snapshot(self):
        return {k: v.copy() for k, v in self.state().items()}

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()


class Stage1Net(_Net):
    """Fuser, conv 5x5/16 stride 4, three FC blocks (BN, ReLU, dropout), two heads."""

    kind = "stage1"

    def __init__(self, n_az=9, n_el=5, dropout_p=0.5, seed=0):
        rng = np.random.default_rng(seed)
        self.n_az, self.n_el = n_az, n_el
        self.fuser = FeatureFuser(rng)
        drop_rng = np.random.default_rng([seed, 1])
        self.trunk = Sequential([
            Conv2D(FUSED_CHANNELS, 16, 5, stride=4, padding=2, rng=rng), ReLU(), Flatten(),
            Linear(32 * 32 * 16, 512, rng), BatchNorm(512), ReLU(), Dropout(dropout_p, drop_rng),
            Linear(512, 256, rng), BatchNorm(256), ReLU(), Dropout(dropout_p, drop_rng),
            Linear(256, 128, rng), BatchNorm(128), ReLU(), Dropout(dropout_p, drop_rng),
        ])
        self.az_head = Linear(128, n_az, rng, init_scale=HEAD_INIT_SCALE)
        self.el_head = Linear(128, n_el, rng, init_scale=HEAD_INIT_SCALE)

    def layers(self):
        return [self.fuser, *self.trunk.layers, self.az_head, self.el_head]

    def named_layers(self):
        out = [("fuser", self.fuser)]
        out += [(f"trunk{i}", l) for i, l in enumerate(self.trunk.layers) if l.params or l.buffers]
        return out + [("az_head", self.az_head), ("el_head", self.el_head)]

    def forward_fused(self, fused, train=False):
        emb = self.trunk.forward(fused, train)
        return self.az_head.forward(emb, train), self.el_head.forward(emb, train)

    def forward(self, normal, reshading, train=False):
        """Logits ``(N, n_az)`` and ``(N, n_el)`` for batched feature maps."""
        fused = self.fuser.forward(FeatureFuser.concat(normal, reshading), train)
        return self.forward_fused(fused, train)

    def backward(self, g_az, g_el):
        g = self.az_head.backward(g_az) + self.el_head.backward(g_el)
        g = self.trunk.backward(g)
        self.fuser.backward(g)

    def fuse(self, normal, reshading):
        """Fused features of one sample or a batch (eval mode)."""
        return self.fuser(normal, reshading)


def stage1_forward(net, fused, train=False):
    """Azimuth and elevation logits for one fused 128x128x8 map (or a batch)."""
    single = fused.ndim == 3
    az, el = net.forward_fused(fused[None] if single else fused, train)
    return (az[0], el[0]) if single else (az, el)


class Stage2Net(_Net):
    """Conv 3x3/16 s2 + BN + ReLU, conv 3x3/32 s2 + BN + ReLU, FC 256, 64, 1, sigmoid."""

    kind = "stage2"

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.body = Sequential([
            Conv2D(FUSED_CHANNELS + 1, 16, 3, stride=2, padding=1, rng=rng), BatchNorm(16), ReLU(),
            Conv2D(16, 32, 3, stride=2, padding=1, rng=rng), BatchNorm(32), ReLU(), Flatten(),
            Linear(32 * 32 * 32, 256, rng), ReLU(),
            Linear(256, 64, rng), ReLU(),
            Linear(64, 1, rng, init_scale=HEAD_INIT_SCALE),
        ])
        # the input is data, never a trainable quantity
        self.body.layers[0].input_grad = False

    def layers(self):
        return list(self.body.layers)

    def named_layers(self):
        return [(f"body{i}", l) for i, l in enumerate(self.body.layers) if l.params or l.buffers]

    def logits(self, x, train=False):
        return self.body.forward(x, train)[:, 0]

    def backward(self, g_logit):
        self.body.backward(g_logit[:, None].astype(np.float32))


def stage2_input(fused, predicted_mask, dmask):
    """Gate the fused features by the predicted mask and append the D-mask channel."""
    fused = np.asarray(fused)
    pm = np.asarray(predicted_mask.bits if isinstance(predicted_mask, Mask) else predicted_mask)
    dm = np.asarray(dmask.bits if isinstance(dmask, Mask) else dmask)
    hw = fused.shape[-3:-1]
    if pm.shape[-2:] != hw or dm.shape[-2:] != hw:
        raise ConfigurationError(f"masks must be {hw[0]}x{hw[1]}, got {pm.shape} and {dm.shape}")
    gated = fused * pm[..., None].astype(fused.dtype)
    return np.concatenate([gated, dm[..., None].astype(fused.dtype)], axis=-1)


def stage2_forward(net, fused, predicted_mask, dmask, train=False):
    """Match probability in (0, 1) for one sample, or a batch of them."""
    x = stage2_input(fused, predicted_mask, dmask)
    single = x.ndim == 3
    p = sigmoid(net.logits(x[None] if single else x, train))
    return float(p[0]) if single else p


@dataclass(frozen=True)
class CandidateSet:
    bins: tuple
    probs: tuple

    def __iter__(self):
        return iter(zip(self.bins, self.probs))

    def __len__(self):
        return len(self.bins)


def top_k_candidates(az_logits, k=TOP_K):
    """The ``k`` most probable bins, descending; equal probabilities go to the lower bin."""
    logits = np.asarray(az_logits, dtype=np.float64)
    if k > logits.shape[0]:
        raise ConfigurationError(f"k={k} exceeds the {logits.shape[0]} bins")
    p = softmax(logits)
    order = np.argsort(-p, kind="stable")[:k]
    return CandidateSet(tuple(int(i) for i in order), tuple(float(p[i]) for i in order))


def select_pose(candidates, stage2_probs, threshold=0.5):
    """Bin maximising ``[verified] * P_stage1`` over the candidates.

    A candidate is verified when its stage-2 probability reaches
    ``threshold``.  With no verified candidate the stage-1 top bin is kept.
    """
    if len(stage2_probs) != len(candidates):
        raise ConfigurationError("one stage-2 probability per candidate required")
    best, best_score = candidates.bins[0], 0.0
    for b, p, q in zip(candidates.bins, candidates.probs, stage2_probs):
        score = p if q >= threshold else 0.0
        if score > best_score:
            best, best_score = b, score
    return best


# ---------------------------------------------------------------------------
# training

@dataclass
class Stage1Data:
    normal: np.ndarray
    reshading: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    sample_ids: tuple = ()
    categories: tuple = ()

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ConfigurationError("empty dataset")
        return cls(np.stack([s.normal for s in samples]).astype(np.float32),
                   np.stack([s.reshading for s in samples]).astype(np.float32),
                   np.array([s.azimuth for s in samples], dtype=np.float64),
                   np.array([s.elevation for s in samples], dtype=np.float64),
                   tuple(s.sample_id for s in samples), tuple(s.category for s in samples))

    def __len__(self):
        return len(self.azimuth)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    train_el_acc: float = float("nan")
    val_loss: float = float("nan")
    val_acc: float = float("nan")


@dataclass
class TrainHistory:
    initial_loss: float
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self):
        return {"initial_loss": self.initial_loss, "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early, "epochs": [vars(e) for e in self.epochs]}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    cuts = list(range(0, n, batch_size))
    out = [order[c:c + batch_size] for c in cuts]
    # batch-norm needs >= 2 items per batch
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _chunks(n, size=64):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def stage1_logits(net, data, idx=None):
    """Eval-mode logits for all (or the selected) samples."""
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    az, el = [], []
    for c in _chunks(len(idx)):
        sel = idx[c]
        a, e = net.forward(data.normal[sel], data.reshading[sel], train=False)
        az.append(a)
        el.append(e)
    return np.concatenate(az), np.concatenate(el)


def _stage1_eval(net, data, az_spec, el_spec):
    az, el = stage1_logits(net, data)
    t_az = np.array([assign_bin(a, az_spec) for a in data.azimuth])
    t_el = np.array([assign_bin(e, el_spec) for e in data.elevation])
    loss = cross_entropy(az, t_az)[0] + cross_entropy(el, t_el)[0]
    pa, pe = az.argmax(1), el.argmax(1)
    acc = np.mean([is_correct(p, a, az_spec) for p, a in zip(pa, data.azimuth)])
    el_acc = np.mean([is_correct(p, e, el_spec) for p, e in zip(pe, data.elevation)])
    return float(loss), float(acc), float(el_acc)


def _early_stop_check(history, net, val_loss, best, patience):
    if val_loss < best[0]:
        return (val_loss, net.snapshot(), 0)
    return (best[0], best[1], best[2] + 1)


def train_stage1(net, data, az_spec, el_spec, config, val_data=None, progress=None):
    """Minimise L_az + L_el with momentum SGD; returns a :class:`TrainHistory`.

    With ``val_data`` the run stops once the validation loss has not improved
    for ``config.early_stop_patience`` epochs and the best weights are restored.
    """
    if len(data) == 0:
        raise ConfigurationError("empty dataset")
    for d in (data, val_data):
        if d is not None:
            for e in d.elevation:
                if not el_spec.start_deg <= e <= el_spec.stop_deg:
                    raise ConfigurationError(f"elevation {e} outside the elevation bin range")
    t_az = np.array([assign_bin(a, az_spec) for a in data.azimuth])
    t_el = np.array([assign_bin(e, el_spec) for e in data.elevation])
    rng = np.random.default_rng([config.seed, 2])
    for layer in net.layers():
        if isinstance(layer, Dropout):
            layer.p = config.dropout_p
            layer.rng = np.random.default_rng([config.seed, 3])
    opt = SGD(net.layers(), config)
    hist = TrainHistory(_stage1_eval(net, data, az_spec, el_spec)[0])
    best = (np.inf, None, 0)
    for epoch in range(config.max_epochs):
        for b in _batches(len(data), config.batch_size, rng):
            opt.zero_grad()
            az, el = net.forward(data.normal[b], data.reshading[b], train=True)
            _, g_az = cross_entropy(az, t_az[b])
            _, g_el = cross_entropy(el, t_el[b])
            net.backward(g_az, g_el)
            opt.step(epoch)
        loss, acc, el_acc = _stage1_eval(net, data, az_spec, el_spec)
        stats = EpochStats(epoch, effective_lr(config, epoch), loss, acc, el_acc)
        if val_data is not None:
            stats.val_loss, stats.val_acc, _ = _stage1_eval(net, val_data, az_spec, el_spec)
            best = _early_stop_check(hist, net, stats.val_loss, best, config.early_stop_patience)
            if best[2] == 0:
                hist.best_epoch = epoch
        hist.epochs.append(stats)
        if progress:
            progress(stats)
        if val_data is not None and best[2] >= config.early_stop_patience:
            hist.stopped_early = True
            break
    if val_data is not None and best[1] is not None:
        net.load_state(best[1])
    elif val_data is None:
        hist.best_epoch = len(hist.epochs) - 1
    return hist


@dataclass
class Stage2Pairs:
    """Training pairs: which sample, which D-mask, and the match label."""

    sample_index: np.ndarray
    dmasks: np.ndarray  # (P, 128, 128) bool
    labels: np.ndarray  # (P,) float 0/1


def build_stage2_pairs(data, samples, dmask_library, az_spec, el_spec, seed=0, stage1=None):
    """One positive (ground-truth bin) and one negative pair per sample.

    Negatives come from stage-1's wrong top-3 candidates when ``stage1`` is
    given, otherwise from a uniformly drawn wrong azimuth bin.  Both use the
    ground-truth elevation bin.
    """
    rng = np.random.default_rng([seed, 4])
    cands = None
    if stage1 is not None:
        az_logits, _ = stage1_logits(stage1, data)
        cands = [top_k_candidates(l) for l in az_logits]
    idx, masks, labels = [], [], []
    for i, s in enumerate(samples):
        if s.mesh_id not in dmask_library:
            raise ConfigurationError(f"no D-mask set for mesh {s.mesh_id!r} (sample {s.sample_id})")
        ds = dmask_library[s.mesh_id]
        a = assign_bin(s.azimuth, az_spec)
        e = assign_bin(s.elevation, el_spec)
        wrong = [b for b in (cands[i].bins if cands else ()) if b != a]
        if not wrong:
            wrong = [b for b in range(az_spec.n_bins) if b != a]
        neg = wrong[int(rng.integers(len(wrong)))]
        for b, y in ((a, 1.0), (neg, 0.0)):
            idx.append(i)
            masks.append(ds.get(b, e).bits)
            labels.append(y)
    return Stage2Pairs(np.array(idx), np.stack(masks), np.array(labels))


def _stage2_batch(fused, stage2_data, pairs, sel):
    si = pairs.sample_index[sel]
    return stage2_input(fused[si], stage2_data.pred_masks[si], pairs.dmasks[sel])


def fuse_all(stage1, s2data):
    """Fused features of every sample; stage 1 is frozen while stage 2 trains."""
    return np.concatenate([stage1.fuse(s2data.normal[c], s2data.reshading[c])
                           for c in _chunks(len(s2data.normal))])


@dataclass
class Stage2Data:
    normal: np.ndarray
    reshading: np.ndarray
    pred_masks: np.ndarray  # (N, 128, 128) bool

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ConfigurationError("empty dataset")
        return cls(np.stack([s.normal for s in samples]).astype(np.float32),
                   np.stack([s.reshading for s in samples]).astype(np.float32),
                   np.stack([s.mask.bits for s in samples]))


def stage2_scores(net, stage1, s2data, pairs, fused=None):
    fused = fuse_all(stage1, s2data) if fused is None else fused
    probs = []
    for c in _chunks(len(pairs.labels), 32):
        probs.append(sigmoid(net.logits(_stage2_batch(fused, s2data, pairs, c), train=False)))
    return np.concatenate(probs)


def train_stage2(net, stage1, s2data, pairs, config, progress=None):
    """Minimise the batch-mean BCE of the verifier over balanced pairs.

    ``stage1`` only supplies the (frozen) fused features.  Positive and
    negative pairs of a sample always land in the same batch.
    """
    if len(pairs.labels) == 0:
        raise ConfigurationError("empty dataset")
    rng = np.random.default_rng([config.seed, 5])
    opt = SGD(net.layers(), config)
    fused = fuse_all(stage1, s2data)
    hist = TrainHistory(bce(stage2_scores(net, stage1, s2data, pairs, fused), pairs.labels))
    n_samples = int(pairs.sample_index.max()) + 1
    by_sample = [np.flatnonzero(pairs.sample_index == i) for i in range(n_samples)]
    per_batch = max(1, config.batch_size // 2)
    for epoch in range(config.max_epochs):
        for b in _batches(n_samples, per_batch, rng):
            sel = np.concatenate([by_sample[i] for i in b])
            if len(sel) < 2:
                continue
            opt.zero_grad()
            z = net.logits(_stage2_batch(fused, s2data, pairs, sel), train=True)
            p = sigmoid(z).astype(np.float64)
            # d BCE / d logit of the unclamped loss
            g = (p - pairs.labels[sel]) / len(sel)
            net.backward(g)
            opt.step(epoch)
        probs = stage2_scores(net, stage1, s2data, pairs, fused)
        stats = EpochStats(epoch, effective_lr(config, epoch), bce(probs, pairs.labels),
                           float(np.mean((probs >= 0.5) == (pairs.labels == 1))))
        hist.epochs.append(stats)
        if progress:
            progress(stats)
    hist.best_epoch = len(hist.epochs) - 1
    return hist


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Prediction:
    sample_id: str
    category: str
    az_bin: int
    el_bin: int
    azimuth: float
    elevation: float
    candidates: tuple = ()


@dataclass
class EvalReport:
    rows: list  # (category, n, az_correct, el_correct)
    predictions: list = field(default_factory=list)

    @property
    def total(self):
        n = sum(r[1] for r in self.rows)
        az = sum(r[2] for r in self.rows)
        el = sum(r[3] for r in self.rows)
        return n, az, el

    @property
    def az_acc(self):
        n, az, _ = self.total
        return 100.0 * az / n if n else 0.0

    @property
    def el_acc(self):
        n, _, el = self.total
        return 100.0 * el / n if n else 0.0

    def to_csv(self):
        lines = ["category,n,az_acc,el_acc"]
        for cat, n, az, el in self.rows:
            lines.append(f"{cat},{n},{100.0 * az / n:.2f},{100.0 * el / n:.2f}")
        n, _, _ = self.total
        lines.append(f"mean,{n},{self.az_acc:.2f},{self.el_acc:.2f}")
        return "\n".join(lines) + "\n"


def evaluate_predictions(predictions, az_spec, el_spec):
    """Per-category accuracy from finished predictions; ``mean`` weights every sample equally."""
    agg = {}
    for p in predictions:
        row = agg.setdefault(p.category, [0, 0, 0])
        row[0] += 1
        row[1] += is_correct(p.az_bin, p.azimuth, az_spec)
        row[2] += is_correct(p.el_bin, p.elevation, el_spec)
    rows = [(c, *agg[c]) for c in sorted(agg)]
    return EvalReport(rows, list(predictions))


@dataclass
class Gallery:
    """Predicted masks of training images for CAD retrieval."""

    masks: list
    mesh_ids: list
    categories: list

    @classmethod
    def from_samples(cls, samples):
        return cls([s.mask for s in samples], [s.mesh_id for s in samples], [s.category for s in samples])

    def retrieve(self, mask, category=None, scales=(0.8, 1.0, 1.25)):
        idx = [i for i, c in enumerate(self.categories) if category is None or c == category]
        if not idx:
            idx = list(range(len(self.masks)))
        k, _ = template_match(mask, [self.masks[i] for i in idx], scales)
        return self.mesh_ids[idx[k]]


def evaluate(stage1, samples, az_spec, el_spec, stage2=None, dmask_library=None, gallery=None,
             threshold=0.5, top_k=TOP_K):
    """Accuracy report for ``samples``.

    Without ``stage2`` the azimuth is the stage-1 argmax.  With it, the top
    ``top_k`` azimuth candidates are verified against D-masks of the CAD model
    retrieved from ``gallery`` (or of the annotated mesh when no gallery is
    given) at the stage-1 elevation bin, and :func:`select_pose` decides.
    Elevation always comes from stage 1.
    """
    data = Stage1Data.from_samples(samples)
    az_logits, el_logits = stage1_logits(stage1, data)
    preds = []
    for i, s in enumerate(samples):
        el_bin = int(np.argmax(el_logits[i]))
        cands = top_k_candidates(az_logits[i], top_k)
        az_bin = cands.bins[0]
        if stage2 is not None:
            mesh_id = gallery.retrieve(s.mask, s.category) if gallery is not None else s.mesh_id
            if dmask_library is None or mesh_id not in dmask_library:
                raise ConfigurationError(f"no D-mask set for mesh {mesh_id!r}")
            ds = dmask_library[mesh_id]
            fused = stage1.fuse(s.normal[None], s.reshading[None])
            fused = np.repeat(fused, len(cands), axis=0)
            dms = np.stack([ds.get(b, el_bin).bits for b in cands.bins])
            pm = np.repeat(s.mask.bits[None], len(cands), axis=0)
            probs = sigmoid(stage2.logits(stage2_input(fused, pm, dms), train=False))
            az_bin = select_pose(cands, [float(p) for p in probs], threshold)
        preds.append(Prediction(s.sample_id, s.category, az_bin, el_bin, s.azimuth, s.elevation, cands.bins))
    return evaluate_predictions(preds, az_spec, el_spec)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PNV1"


def encode_checkpoint(net):
    entries = [(f"__arch__/{net.kind}", np.array(
        [net.n_az, net.n_el] if net.kind == "stage1" else [0], dtype="<f4"))]
    entries += sorted(net.state().items())
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
    return b"".join(out)


def save_checkpoint(path, net):
    formats.atomic_write_bytes(path, encode_checkpoint(net))


def decode_checkpoint(blob, source="<bytes>"):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{source}: not a model checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"{source}: checkpoint truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64))
        entries[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise FormatError(f"{source}: trailing bytes after checkpoint")
    arch = [k for k in entries if k.startswith("__arch__/")]
    if len(arch) != 1:
        raise FormatError(f"{source}: missing architecture entry")
    kind = arch[0].split("/", 1)[1]
    meta = entries.pop(arch[0])
    if kind == "stage1":
        net = Stage1Net(int(meta[0]), int(meta[1]))
    elif kind == "stage2":
        net = Stage2Net()
    else:
        raise FormatError(f"{source}: unknown network kind {kind!r}")
    net.load_state(entries)
    return net


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such checkpoint: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
