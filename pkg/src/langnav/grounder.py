"""Language-conditioned mask prediction.

A window of semantic frames, an ego-trace context map, and a tokenized
command are encoded into a shared channel width, fused by self-attention,
and decoded by twin segmentation heads into a navigable-region mask and a
short-horizon trajectory mask.  Training, inference over rolling frame
buffers, the four-model ablation family, and checkpoint I/O live here.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import command as cmd
from . import nn
from .geometry import SemanticRaster
from .navctl import ContextTracker
from .nn.layers import Module
from .nn.tensor import parameter


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the grounding network.

    n_frames is the temporal window T, stride the simulator steps between
    sampled frames, channels the shared feature width for the visual,
    context, and text branches.  Three stride-2 convolutions and three
    upsample stages pin resolution = 8 * grid.
    """

    n_frames: int = 8
    stride: int = 10
    channels: int = 32
    grid: int = 8
    n_tokens: int = cmd.MAX_TOKENS
    heads: int = 4
    use_context: bool = True
    resolution: int = 64
    n_classes: int = 9
    vocab_size: int = len(cmd.Vocabulary())

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by "
                             f"{self.heads} heads")
        if self.resolution != 8 * self.grid:
            raise ValueError("resolution must be 8x the feature grid")


@dataclass(frozen=True)
class FusionFeatures:
    """Intermediate tensors of one fusion pass, kept for inspection."""

    F_v: nn.Tensor              # [C, T, H*W] per-frame features
    F_p: nn.Tensor              # [C, 1, H*W] context features
    F_vp: nn.Tensor             # [C, T+1, H*W] temporal concatenation
    F_l: nn.Tensor              # [N, C] projected token embeddings
    F: nn.Tensor                # [(T+1)*H*W + N, C] joint feature rows
    A: nn.Tensor                # [L, L] head-averaged attention weights
    M: nn.Tensor                # [C, H, W] fused, temporally collapsed


# ---------------------------------------------------------------------------
# input encodings

def one_hot_frames(frames, n_classes: int) -> np.ndarray:
    """Class-id rasters (or arrays), oldest first -> [T, n_classes, R, R]."""
    arrs = [f.pixels if hasattr(f, "pixels") else np.asarray(f)
            for f in frames]
    ids = np.stack(arrs).astype(np.int64)
    classes = np.arange(n_classes, dtype=np.int64)
    hot = ids[:, None, :, :] == classes[None, :, None, None]
    return hot.astype(nn.default_dtype())


def context_plane(context) -> np.ndarray:
    """Binary trace raster -> {0, 1} float plane [1, 1, R, R]."""
    px = context.pixels if hasattr(context, "pixels") else np.asarray(context)
    return (px > 0).astype(nn.default_dtype())[None, None]


def binary_target(mask) -> np.ndarray:
    """{0, 255} raster (or array) -> {0, 1} float target for the loss."""
    px = mask.pixels if hasattr(mask, "pixels") else np.asarray(mask)
    return (px > 0).astype(nn.default_dtype())


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks; empty vs empty is 1."""
    pa = (a.pixels if hasattr(a, "pixels") else np.asarray(a)) > 0
    pb = (b.pixels if hasattr(b, "pixels") else np.asarray(b)) > 0
    union = np.logical_or(pa, pb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pa, pb).sum() / union)


# ---------------------------------------------------------------------------
# model

class _ConvStack(Module):
    """Three stride-2 3x3 convolutions with relu; resolution/8 output."""

    def __init__(self, in_ch, channels, rng):
        self.convs = [
            nn.Conv2d(in_ch, channels, 3, rng, stride=2, padding=1),
            nn.Conv2d(channels, channels, 3, rng, stride=2, padding=1),
            nn.Conv2d(channels, channels, 3, rng, stride=2, padding=1),
        ]

    def __call__(self, x):
        for conv in self.convs:
            x = conv(x).relu()
        return x


class _DecoderHead(Module):
    """Three upsample+conv stages, grid -> resolution, one logit channel."""

    def __init__(self, channels, rng):
        self.convs = [
            nn.Conv2d(channels, channels, 3, rng, padding=1),
            nn.Conv2d(channels, channels, 3, rng, padding=1),
            nn.Conv2d(channels, 1, 3, rng, padding=1),
        ]
        # start from sparse predictions: target masks cover a sliver of the
        # image, and a 50% prior makes the first optimizer steps slam every
        # logit so far negative that the loss clamp cuts the gradient
        self.convs[-1].bias.data[:] = -2.0

    def __call__(self, x):
        for conv in self.convs[:-1]:
            x = conv(nn.upsample2x(x)).relu()
        return self.convs[-1](nn.upsample2x(x))


class GroundingModel(Module):
    """Frames + context + tokens -> per-pixel nav/trajectory logits.

    The attention block's weight matrix (head-averaged) left-multiplies the
    joint feature rows, so every contextualized row is a convex mixture of
    all frame positions, the context positions, and the tokens.  Text rows
    are dropped afterwards: only the visual positions carry through the
    temporal-collapse convolution into the decoders.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ch = cfg.channels
        self.frame_enc = _ConvStack(cfg.n_classes, ch, rng)
        if cfg.use_context:
            self.context_enc = _ConvStack(1, ch, rng)
            self.context_mlp = nn.Linear(ch, ch, rng)
        else:
            # learned stand-in grid keeps the fused length identical, so
            # the context ablation changes inputs, not architecture
            self.context_token = parameter((cfg.grid * cfg.grid, ch), rng,
                                           scale=0.1)
        self.embed = nn.Embedding(cfg.vocab_size, ch, rng)
        self.text_proj = nn.Linear(ch, ch, rng)
        self.attn = nn.MultiHeadSelfAttention(ch, cfg.heads, rng)
        self.collapse = nn.Conv3d(ch, ch, (cfg.n_frames + 1, 3, 3), rng,
                                  padding=(0, 1, 1))
        self.nav_head = _DecoderHead(ch, rng)
        self.traj_head = _DecoderHead(ch, rng)

    def features(self, frames, context, tokens) -> FusionFeatures:
        cfg = self.cfg
        t, ch, g = cfg.n_frames, cfg.channels, cfg.grid
        hw = g * g

        x = frames if isinstance(frames, nn.Tensor) else \
            nn.Tensor(np.asarray(frames))
        want = (t, cfg.n_classes, cfg.resolution, cfg.resolution)
        if tuple(x.shape) != want:
            raise nn.ShapeError(f"frames shaped {tuple(x.shape)}, "
                                f"want {want}")
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.shape != (cfg.n_tokens,):
            raise nn.ShapeError(f"tokens shaped {ids.shape}, "
                                f"want ({cfg.n_tokens},)")

        feat = self.frame_enc(x)                            # [T, C, g, g]
        f_v = feat.reshape(t, ch, hw).transpose((1, 0, 2))  # [C, T, hw]

        if cfg.use_context:
            plane = context_plane(context)
            if plane.shape[2:] != (cfg.resolution, cfg.resolution):
                raise nn.ShapeError(f"context shaped {plane.shape[2:]}, "
                                    f"want {(cfg.resolution,) * 2}")
            enc = self.context_enc(nn.Tensor(plane))        # [1, C, g, g]
            rows = enc.reshape(ch, hw).transpose((1, 0))    # [hw, C]
            rows = self.context_mlp(rows).relu()
            f_p = rows.transpose((1, 0)).reshape(ch, 1, hw)
        else:
            f_p = self.context_token.transpose((1, 0)).reshape(ch, 1, hw)

        f_vp = nn.concat([f_v, f_p], axis=1)                # [C, T+1, hw]
        f_l = self.text_proj(self.embed(ids))               # [N, C]
        vis_rows = f_vp.transpose((1, 2, 0)).reshape((t + 1) * hw, ch)
        joint = nn.concat([vis_rows, f_l], axis=0)          # [L, C]

        _, weights = self.attn(joint)                       # [h, L, L]
        att = weights.mean(axis=0)                          # [L, L]
        mixed = att @ joint                                 # [L, C]

        vis = mixed[:(t + 1) * hw]
        vol = vis.reshape(t + 1, g, g, ch).transpose((3, 0, 1, 2))
        fused = self.collapse(vol.reshape(1, ch, t + 1, g, g)).relu()
        # the temporal kernel spans all T+1 positions unpadded, so the
        # reshape below only composes when that extent collapsed to 1
        m = fused.reshape(ch, g, g)
        return FusionFeatures(F_v=f_v, F_p=f_p, F_vp=f_vp, F_l=f_l,
                              F=joint, A=att, M=m)

    def forward(self, frames, context, tokens):
        """Returns (nav_logits, traj_logits), each [resolution, resolution],
        pre-sigmoid."""
        cfg = self.cfg
        feats = self.features(frames, context, tokens)
        x = feats.M.reshape(1, cfg.channels, cfg.grid, cfg.grid)
        nav = self.nav_head(x).reshape(cfg.resolution, cfg.resolution)
        traj = self.traj_head(x).reshape(cfg.resolution, cfg.resolution)
        return nav, traj

    __call__ = forward


VARIANTS = {
    "S": dict(n_frames=1, use_context=False),
    "SC": dict(n_frames=1, use_context=True),
    "M": dict(n_frames=8, use_context=False),
    "MC": dict(n_frames=8, use_context=True),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    """The four-model family: single/multi frame x without/with context."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}, "
                         f"want one of {sorted(VARIANTS)}")
    knobs = dict(VARIANTS[name])
    knobs.update(overrides)
    return ModelConfig(**knobs)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainSample:
    """One supervised example: an input window plus both target masks."""

    frames: tuple               # T SemanticRasters, oldest first
    context: SemanticRaster
    tokens: np.ndarray          # (N,) token ids
    nav_mask: SemanticRaster
    traj_mask: SemanticRaster


def episode_samples(record, cfg: ModelConfig, vocab) -> list:
    """Slice a recorded episode into query-aligned training samples.

    Windows replicate the live loop: frames at stride spacing, oldest
    first, left-padded with the first frame, and a context map replaying
    the stride-spaced pose trace up to the sampled frame.
    """
    tokens, _ = cmd.encode_tokens(record.command, vocab)
    tracker = ContextTracker()
    out = []
    for i in range(0, record.frame_count, cfg.stride):
        frame = record.frames[i]
        tracker.push(frame.pose)
        idx = [max(i - k * cfg.stride, 0)
               for k in range(cfg.n_frames - 1, -1, -1)]
        out.append(TrainSample(
            frames=tuple(record.frames[j].front for j in idx),
            context=tracker.render(frame.pose),
            tokens=tokens,
            nav_mask=frame.nav_mask,
            traj_mask=frame.traj_mask))
    return out


def counterfactual_samples(world, record, variants, cfg: ModelConfig,
                           vocab, max_off=1.0) -> list:
    """Relabel a recorded approach under the commands it did not follow.

    variants is an iterable of (text, route) pairs whose routes overlap a
    stretch of the driven path: routes sharing the spawn cover it up to
    the first decision point, and routes generated from a mid-episode pose
    cover the approach to a later junction.  For every stride-aligned
    sample whose pose lies within max_off of a variant route, the recorded
    input window is kept byte-for-byte and paired with that variant's
    tokens plus nav/traj masks recomputed by the scripted oracle for the
    variant route at the recorded pose.  Leading samples before the
    overlap are skipped; the walk ends at the first off-route pose after
    it, where the recorded pixels start contradicting the variant.

    Pass the record's own command as one of the variants: recomputing its
    labels through the same code path keeps twin groups free of any label
    style that would mark which member was actually driven.  Twins are the
    one augmentation a pixel shortcut cannot absorb; identical inputs with
    different targets are only separable through the tokens.
    """
    from . import oracle

    base = episode_samples(record, cfg, vocab)
    ocfg = oracle.OracleConfig()
    out = []
    for text, route in variants:
        rs = oracle.make_route_state(route)
        toks, _ = cmd.encode_tokens(text, vocab)
        for k, s in enumerate(base):
            pose = record.frames[k * cfg.stride].pose
            rs.progress = oracle.update_progress(rs, pose.x, pose.y)
            if rs.distance_to_route(pose.x, pose.y) > max_off:
                break
            g = oracle.oracle_ground(world, (), pose, rs, record.cam, ocfg)
            out.append(TrainSample(frames=s.frames, context=s.context,
                                   tokens=toks, nav_mask=g.nav_mask,
                                   traj_mask=g.traj_mask))
    return out


def mirror_sample(s: TrainSample, vocab) -> TrainSample:
    """Left-right flip of one sample, with side words swapped to match.

    Mirroring makes every junction appear with both turn directions behind
    visually identical (mirrored) inputs, so the only cue separating the
    pair is the command tokens: a model cannot memorize map geometry to
    pick a side and is forced to read the language.
    """
    def flip(r):
        return SemanticRaster(np.fliplr(r.pixels))

    left, _ = cmd.encode_tokens("left", vocab)
    right, _ = cmd.encode_tokens("right", vocab)
    lid, rid = int(left[0]), int(right[0])
    tokens = s.tokens.copy()
    tokens[s.tokens == lid] = rid
    tokens[s.tokens == rid] = lid
    return TrainSample(frames=tuple(flip(f) for f in s.frames),
                       context=flip(s.context), tokens=tokens,
                       nav_mask=flip(s.nav_mask), traj_mask=flip(s.traj_mask))


def train_step(batch, model: GroundingModel, opt: nn.OptimizerState,
               loss_cfg: nn.LossConfig = nn.LossConfig()):
    """One optimizer update on a batch of TrainSamples.

    Per sample the objective is combo_loss(nav) + combo_loss(traj); the
    batch mean is backpropagated and applied with AdamW.  Returns the two
    batch-mean task losses as floats.
    """
    model.zero_grad()
    nav_vals, traj_vals, terms = [], [], []
    for s in batch:
        frames = one_hot_frames(s.frames, model.cfg.n_classes)
        nav_logits, traj_logits = model(frames, s.context, s.tokens)
        l_nav = nn.combo_loss(nav_logits.sigmoid(),
                              binary_target(s.nav_mask), loss_cfg)
        l_traj = nn.combo_loss(traj_logits.sigmoid(),
                               binary_target(s.traj_mask), loss_cfg)
        nav_vals.append(l_nav.item())
        traj_vals.append(l_traj.item())
        terms.append(l_nav + l_traj)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    (total * (1.0 / len(terms))).backward()
    nn.adamw_step(model.parameters(), None, opt)
    return float(np.mean(nav_vals)), float(np.mean(traj_vals))


def fit(model: GroundingModel, samples, steps: int, batch_size: int = 8,
        seed: int = 0, lr0: float = 1e-3) -> list:
    """Seeded minibatch loop; returns the (loss_nav, loss_traj) history.

    The default learning rate is ten times the full-scale value: a
    desk-scale model learning from a few hundred masks stalls at 1e-4
    within any reasonable step budget.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    opt = nn.OptimizerState(lr0=lr0, max_iters=steps)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(steps):
        take = min(batch_size, len(samples))
        idx = rng.choice(len(samples), size=take, replace=False)
        history.append(train_step([samples[i] for i in idx], model, opt))
    return history


# ---------------------------------------------------------------------------
# inference

def predict(model: GroundingModel, frames, context, tokens):
    """Binary masks from the latest frame window.

    The buffer may hold fewer than T frames early in an episode; the
    oldest frame is repeated on the left.  Thresholding is strictly above
    0.5, so exactly-zero logits stay off.
    """
    t = model.cfg.n_frames
    window = list(frames)[-t:]
    if not window:
        raise ValueError("frame buffer is empty")
    window = [window[0]] * (t - len(window)) + window
    x = one_hot_frames(window, model.cfg.n_classes)
    nav_logits, traj_logits = model(x, context, tokens)

    def to_mask(logits):
        on = logits.sigmoid().data > 0.5
        return SemanticRaster(on.astype(np.uint8) * np.uint8(255))

    return to_mask(nav_logits), to_mask(traj_logits)


class NeuralGrounder:
    """Adapts a trained model to the live grounding interface."""

    def __init__(self, model: GroundingModel, vocab=None):
        self.model = model
        self.vocab = vocab if vocab is not None else cmd.Vocabulary()
        self._token_cache = {}

    def ground(self, frames, context, text):
        tokens = self._token_cache.get(text)
        if tokens is None:
            tokens, _ = cmd.encode_tokens(text, self.vocab)
            self._token_cache[text] = tokens
        return predict(self.model, frames, context, tokens)


# ---------------------------------------------------------------------------
# checkpoints

def vocab_hash(vocab) -> str:
    return hashlib.sha256("\n".join(vocab.words).encode()).hexdigest()


def save_model(model: GroundingModel, path, vocab=None) -> None:
    """Weight blob plus a JSON sidecar recording config and vocab hash."""
    vocab = vocab if vocab is not None else cmd.Vocabulary()
    nn.save_weights(path, model.parameters())
    sidecar = {"model": asdict(model.cfg),
               "vocab_sha256": vocab_hash(vocab)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")


def load_model(path, vocab=None):
    """Rebuild a checkpointed model; verifies the vocabulary when given.

    Returns (model, config).  Raises WeightsError when the sidecar is
    missing or unreadable, names or shapes mismatch, or the vocabulary
    hash differs from the one the checkpoint was trained with.
    """
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        raise nn.WeightsError(f"missing config sidecar for {path}")
    except json.JSONDecodeError as err:
        raise nn.WeightsError(f"unreadable config sidecar: {err}")
    try:
        cfg = ModelConfig(**sidecar["model"])
    except (KeyError, TypeError, ValueError) as err:
        raise nn.WeightsError(f"bad config sidecar: {err}")
    if vocab is not None and vocab_hash(vocab) != sidecar.get("vocab_sha256"):
        raise nn.WeightsError("vocabulary hash does not match checkpoint")
    model = GroundingModel(cfg, seed=0)
    nn.assign_weights(model.parameters(), nn.load_weights(path))
    return model, cfg
