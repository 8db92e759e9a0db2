"""End-to-end helpers shared by the CLI and the acceptance suite.

Building a model from a ``RunConfig``, preparing the frozen stand-ins, full
model checkpoints, merge visualization and the temporal property suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .captioner import CaptionModel, prepare_backbones
from .config import RunConfig
from .datagen import Vocab, make_samples
from .tensor import Tensor, no_grad
from .temporal import FrameBatch, TemporalConfig, TemporalModule, ViTEncoder, temporal_contextualize

CHECKPOINT_KIND = "caption_model"


def build_model(run: RunConfig, vocab: Vocab | None = None, video: bool = False) -> CaptionModel:
    """Randomly initialized model; temporal modules exist only for video runs."""
    temporal = run.temporal
    if video and not temporal.enabled:
        temporal = TemporalConfig(**{**temporal.to_dict(), "enabled": True})
    return CaptionModel(vocab or Vocab(), run.encoder, run.connector, run.decoder, temporal, seed=run.seed)


def stand_in_data(run: RunConfig, vocab: Vocab, video: bool):
    """Images and captions for pre-training the stand-ins.

    Drawn from seeds starting at ``run.data.seed``, disjoint from corpus seeds
    used in tests and examples. Video runs add motion captions.
    """
    d = run.data
    images = np.stack([s.pixels for s in make_samples(d.pretrain_images, d.seed)])
    half = d.pretrain_captions // 2 if video else d.pretrain_captions
    caps = [vocab.encode(s.caption) for s in make_samples(half, d.seed + 10_000)]
    if video:
        caps += [vocab.encode(s.caption) for s in make_samples(d.pretrain_captions - half, d.seed + 20_000, d.num_frames)]
    return images, caps


def prepared_model(run: RunConfig, vocab: Vocab | None = None, video: bool = False) -> CaptionModel:
    """Model with pre-trained, frozen encoder and decoder stand-ins."""
    vocab = vocab or Vocab()
    model = build_model(run, vocab, video)
    images, caps = stand_in_data(run, vocab, video)
    lengths = model.prompt_lengths(run.data.num_frames)
    prepare_backbones(model, images, caps, run.pretrain, lengths)
    return model


# -- checkpoints -------------------------------------------------------------------


def save_model(path, model: CaptionModel, run: RunConfig):
    header = {
        "kind": CHECKPOINT_KIND,
        "run": run.to_dict(),
        "vocab": model.vocab.itos[3:],
        "temporal": model.temporal_config.to_dict(),
    }
    checkpoint.save(path, header, model.state_dict())


def load_model(path) -> tuple[CaptionModel, RunConfig]:
    header, blobs = checkpoint.load(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise checkpoint.CheckpointError(f"{path}: not a caption model checkpoint")
    run = RunConfig.from_dict(header["run"])
    temporal = TemporalConfig(**header["temporal"])
    model = CaptionModel(Vocab(header["vocab"]), run.encoder, run.connector, run.decoder, temporal, seed=run.seed)
    model.load_state_dict(blobs)
    model.freeze_backbones()
    return model, run


# -- merge visualization ------------------------------------------------------------


def palette(n: int) -> np.ndarray:
    """``n`` distinct colors (n <= 216), deterministic: a strided walk of a 6x6x6 cube."""
    if n > 216:
        raise ValueError("palette supports at most 216 colors")
    levels = np.array([40, 83, 126, 169, 212, 255])
    idx = (np.arange(n) * 97 + 43) % 216  # 97 is coprime to 216, so no repeats
    return np.stack([levels[idx // 36], levels[(idx // 6) % 6], levels[idx % 6]], axis=1).astype(np.uint8)


def merge_groups(model: CaptionModel, pixels) -> tuple[np.ndarray, int]:
    """Final provenance of every patch: ``owner [N*P]`` and the number of output tokens."""
    px = np.asarray(pixels)
    video = px.ndim == 4
    with no_grad():
        prompt, _, owner = model.prompt(px[None], video=video)
    include = model.connector.config.include_protected_token
    owner = owner[0, int(include) :]  # patch tokens only
    return owner, prompt.shape[1]


def merge_overlay(model: CaptionModel, pixels) -> tuple[np.ndarray, int]:
    """Patch-grid coloring by final token; video frames are tiled left to right.

    Returns the overlay image and the number of distinct colors used.
    """
    px = np.asarray(pixels)
    frames = px if px.ndim == 4 else px[None]
    owner, _ = merge_groups(model, pixels)
    ecfg = model.encoder.config
    g = ecfg.image_size // ecfg.patch_size
    used = np.unique(owner)
    colors = palette(len(used))[np.searchsorted(used, owner)]  # [N*P, 3]
    tiles = colors.reshape(len(frames), g, g, 3)
    tiles = tiles.repeat(ecfg.patch_size, axis=1).repeat(ecfg.patch_size, axis=2)
    return np.concatenate(list(tiles), axis=1), len(used)


# -- temporal property suite ---------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "skip"
    detail: str

    def line(self) -> str:
        return f"{self.status.upper():4s}  {self.name}: {self.detail}"


def temporal_checks(run: RunConfig, seed: int = 0, frames: int = 4) -> list[CheckResult]:
    """Static-frame, image-path and permutation properties on random inputs and weights."""
    rng = np.random.default_rng(seed)
    cfg = TemporalConfig(**{**run.temporal.to_dict(), "enabled": True})
    encoder = ViTEncoder(run.encoder, rng)
    blocks = range(run.encoder.num_layers) if cfg.blocks is None else cfg.blocks
    modules = {i: TemporalModule(run.encoder.dim, rng, cfg) for i in blocks}
    # make the module non-trivial so the checks are not vacuous
    for m in modules.values():
        m.w_key.data[...] = rng.normal(0.0, 0.5, m.w_key.shape)
        m.w_query.data[...] = rng.normal(0.0, 0.5, m.w_query.shape)
    mod = next(iter(modules.values()))
    D, L = run.encoder.dim, run.encoder.num_patches + 1
    results = []

    def report(name, err, tol):
        ok = err < tol
        results.append(CheckResult(name, "pass" if ok else "fail", f"max diff {err:.3e} (tol {tol:g})"))

    with no_grad():
        v = rng.normal(size=(2, 1, L, D))
        out = temporal_contextualize(FrameBatch(v), mod).activations.data
        report("single frame gives 2v", float(np.abs(out - 2 * v).max()), 1e-10)

        one = rng.normal(size=(2, 1, L, D))
        same = np.repeat(one, frames, axis=1)
        out = temporal_contextualize(FrameBatch(same), mod).activations.data
        if cfg.position_encoding:
            results.append(CheckResult("identical frames give 2v", "skip", "temporal position encoding is on"))
        else:
            report("identical frames give 2v", float(np.abs(out - 2 * same).max()), 1e-10)

        image = rng.integers(0, 256, size=(2, run.encoder.image_size, run.encoder.image_size, run.encoder.channels)).astype(np.uint8)
        img_trace, vid_trace = [], []
        encoder.encode_images(image, img_trace)
        encoder.encode_frames(image[:, None], modules, vid_trace)
        # only norms up to the first temporal step match; later blocks see 2v' in the residual
        upto = min(modules) + 1
        err = max(float(np.abs(a - b.reshape(a.shape)).max()) for a, b in zip(img_trace[:upto], vid_trace[:upto]))
        report("single-frame video matches image path after norm", err, 1e-9)

        if cfg.position_encoding:
            results.append(CheckResult("frame permutation equivariance", "skip", "temporal position encoding is on"))
        else:
            clip = rng.integers(0, 256, size=(1, frames, *image.shape[1:])).astype(np.uint8)
            perm = rng.permutation(frames)
            a = encoder.encode_frames(clip, modules).data
            b = encoder.encode_frames(clip[:, perm], modules).data
            report("frame permutation equivariance", float(np.abs(a[:, perm] - b).max()), 1e-10)
    return results
