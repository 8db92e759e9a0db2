"""Synthetic shape scenes with captions from a closed grammar, plus corpus I/O.

Grammar::

    static   := COLOR SHAPE | COLOR SHAPE "above" COLOR SHAPE
                | COLOR SHAPE "left" "of" COLOR SHAPE
    video    := COLOR SHAPE "moves" DIRECTION | COLOR SHAPE "stays"

Corpus layout on disk::

    images/<id>.ppm            one binary P6 image per sample, or
    videos/<id>/frame<k>.ppm   one P6 image per frame
    captions.tsv               "<id>\\t<caption>" per line, sorted by id
    vocab.txt                  one token per line, specials first
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CANVAS = 32
HALF = 5  # shapes fit in a (2*HALF+1)^2 box
MAX_FRAMES = 1 + (CANVAS - 2 * HALF - 1) // 2  # longest clip a speed-2 track still fits in
COLORS = {"red": (230, 40, 40), "green": (40, 200, 60), "blue": (50, 80, 230)}
SHAPES = ("circle", "square", "triangle")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
WORDS = (*COLORS, *SHAPES, "above", "left", "of", "moves", "right", "up", "down", "stays")


class CorpusError(ValueError):
    """Malformed corpus file; the message names the file (and line)."""


@dataclass(frozen=True)
class Shape:
    color: str
    kind: str
    row: int
    col: int
    motion: tuple[int, int] = (0, 0)

    def at(self, frame: int) -> tuple[int, int]:
        return self.row + frame * self.motion[0], self.col + frame * self.motion[1]


@dataclass(frozen=True)
class Scene:
    shapes: tuple[Shape, ...]
    layout: str  # "single", "above" or "left": the relation the sampler intended
    num_frames: int = 1

    def semantics(self) -> tuple:
        """What the caption must convey, as intended by the sampler."""
        items = tuple((s.color, s.kind) for s in self.shapes)
        if self.num_frames > 1:
            return items, "moves", _direction_word(self.shapes[0].motion)
        return items, self.layout, None


def _direction_word(motion: tuple[int, int]) -> str:
    dr, dc = motion
    if dr == 0 and dc == 0:
        return "stays"
    if abs(dc) >= abs(dr):
        return "right" if dc > 0 else "left"
    return "down" if dr > 0 else "up"


# -- sampling -----------------------------------------------------------------


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def sample_scene(rng: np.random.Generator) -> Scene:
    color = lambda: _pick(rng, tuple(COLORS))  # noqa: E731
    kind = lambda: _pick(rng, SHAPES)  # noqa: E731
    if rng.random() < 0.3:
        r, c = 16 + rng.integers(-4, 5), 16 + rng.integers(-4, 5)
        return Scene((Shape(color(), kind(), int(r), int(c)),), "single")
    first, second = (color(), kind()), (color(), kind())
    a, b = 9 + rng.integers(-1, 2), 23 + rng.integers(-1, 2)
    ja, jb = 16 + rng.integers(-3, 4), 16 + rng.integers(-3, 4)
    if rng.random() < 0.5:
        s1, s2 = Shape(*first, int(a), int(ja)), Shape(*second, int(b), int(jb))
        return Scene((s1, s2), "above")
    s1, s2 = Shape(*first, int(ja), int(a)), Shape(*second, int(jb), int(b))
    return Scene((s1, s2), "left")


def sample_video_scene(rng: np.random.Generator, num_frames: int) -> Scene:
    """One moving shape; the track's midpoint is jittered around the center like image shapes."""
    if not 1 <= num_frames <= MAX_FRAMES:
        raise ValueError(f"num_frames must be in [1, {MAX_FRAMES}]")
    color, kind = _pick(rng, tuple(COLORS)), _pick(rng, SHAPES)
    word = _pick(rng, (*DIRECTIONS, "stays"))
    room = (CANVAS - 2 * HALF - 1) // max(num_frames - 1, 1)
    speed = int(rng.integers(2, min(3, room) + 1))
    motion = (0, 0) if word == "stays" else tuple(speed * d for d in DIRECTIONS[word])
    span = [m * (num_frames - 1) for m in motion]
    while True:
        r = 16 - span[0] // 2 + int(rng.integers(-4, 5))
        c = 16 - span[1] // 2 + int(rng.integers(-4, 5))
        shape = Shape(color, kind, r, c, motion)
        if all(_on_canvas(*shape.at(f)) for f in range(num_frames)):
            return Scene((shape,), "single", num_frames)


def _on_canvas(row: int, col: int) -> bool:
    return HALF <= row < CANVAS - HALF and HALF <= col < CANVAS - HALF


def mirror(scene: Scene) -> Scene:
    """Left-right mirror image of a scene, including motion."""
    shapes = tuple(replace(s, col=CANVAS - 1 - s.col, motion=(s.motion[0], -s.motion[1])) for s in scene.shapes)
    if scene.layout == "left":
        shapes = shapes[::-1]
    return replace(scene, shapes=shapes)


def mirror_caption(text: str) -> str:
    """Caption of the left-right mirrored scene, derived from the words alone."""
    parse_caption(text)
    w = text.split()
    if w[2:4] == ["left", "of"]:
        return " ".join(w[4:] + ["left", "of"] + w[:2])
    if w[-1] in ("left", "right") and w[2] == "moves":
        return " ".join(w[:-1] + ["right" if w[-1] == "left" else "left"])
    return text


def mirror_sample(pixels: np.ndarray, text: str) -> tuple[np.ndarray, str]:
    """Flip an image ``[H, W, C]`` or clip ``[N, H, W, C]`` left-right with its caption."""
    return np.ascontiguousarray(np.asarray(pixels)[..., ::-1, :]), mirror_caption(text)


# -- rendering and captioning ------------------------------------------------------

_YY, _XX = np.mgrid[0:CANVAS, 0:CANVAS]


def _mask(kind: str, row: int, col: int) -> np.ndarray:
    dy, dx = _YY - row, _XX - col
    if kind == "circle":
        return dy * dy + dx * dx <= (HALF + 0.5) ** 2
    if kind == "square":
        return (np.abs(dy) <= HALF) & (np.abs(dx) <= HALF)
    if kind == "triangle":
        return (np.abs(dy) <= HALF) & (2 * np.abs(dx) <= dy + HALF)
    raise ValueError(kind)


def render(scene: Scene, frame: int = 0) -> np.ndarray:
    img = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    for s in scene.shapes:
        img[_mask(s.kind, *s.at(frame))] = COLORS[s.color]
    return img


def render_frames(scene: Scene) -> np.ndarray:
    return np.stack([render(scene, f) for f in range(scene.num_frames)])


def caption(scene: Scene) -> str:
    """Describe a scene from its geometry (not from its ``layout`` label)."""
    if len(scene.shapes) == 1:
        s = scene.shapes[0]
        base = f"{s.color} {s.kind}"
        if scene.num_frames == 1:
            return base
        word = _direction_word(s.motion)
        return f"{base} stays" if word == "stays" else f"{base} moves {word}"
    s1, s2 = scene.shapes
    if abs(s2.row - s1.row) > abs(s2.col - s1.col):
        top, bottom = (s1, s2) if s1.row < s2.row else (s2, s1)
        return f"{top.color} {top.kind} above {bottom.color} {bottom.kind}"
    left, right = (s1, s2) if s1.col < s2.col else (s2, s1)
    return f"{left.color} {left.kind} left of {right.color} {right.kind}"


def parse_caption(text: str) -> tuple:
    """Inverse of ``caption`` up to geometry: returns ``Scene.semantics()`` form."""
    w = text.split()
    if len(w) >= 2 and w[0] in COLORS and w[1] in SHAPES:
        first = (w[0], w[1])
        rest = w[2:]
        if not rest:
            return (first,), "single", None
        if rest == ["stays"]:
            return (first,), "moves", "stays"
        if len(rest) == 2 and rest[0] == "moves" and rest[1] in DIRECTIONS:
            return (first,), "moves", rest[1]
        if len(rest) == 3 and rest[0] == "above" and rest[1] in COLORS and rest[2] in SHAPES:
            return (first, (rest[1], rest[2])), "above", None
        if len(rest) == 4 and rest[:2] == ["left", "of"] and rest[2] in COLORS and rest[3] in SHAPES:
            return (first, (rest[2], rest[3])), "left", None
    raise ValueError(f"caption outside the grammar: {text!r}")


def gen_image_sample(seed: int) -> tuple[np.ndarray, str]:
    scene = sample_scene(np.random.default_rng(seed))
    return render(scene), caption(scene)


def gen_video_sample(seed: int, num_frames: int) -> tuple[np.ndarray, str]:
    scene = sample_video_scene(np.random.default_rng(seed), num_frames)
    return render_frames(scene), caption(scene)


# -- vocabulary ----------------------------------------------------------------


class Vocab:
    def __init__(self, words=WORDS):
        self.itos = [PAD, BOS, EOS, *words]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    pad = property(lambda self: self.stoi[PAD])
    bos = property(lambda self: self.stoi[BOS])
    eos = property(lambda self: self.stoi[EOS])

    def encode(self, text: str) -> list[int]:
        try:
            return [self.bos, *(self.stoi[w] for w in text.split()), self.eos]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i not in (self.bos, self.pad):
                out.append(self.itos[i])
        return " ".join(out)


# -- corpus I/O ------------------------------------------------------------------


@dataclass
class Sample:
    id: str
    pixels: np.ndarray  # uint8 [H, W, 3] or [N, H, W, 3]
    caption: str


@dataclass
class Corpus:
    samples: list[Sample]
    vocab: Vocab


def make_samples(n: int, seed: int = 0, num_frames: int | None = None) -> list[Sample]:
    """``n`` samples from seeds ``seed .. seed+n-1``; ids are the seeds."""
    out = []
    for s in range(seed, seed + n):
        if num_frames is None:
            px, cap = gen_image_sample(s)
        else:
            px, cap = gen_video_sample(s, num_frames)
        out.append(Sample(f"{s:06d}", px, cap))
    return out


def write_ppm(path, pixels: np.ndarray):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorpusError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise CorpusError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise CorpusError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise CorpusError(f"{path}: unsupported maxval {maxval}")
    body = data[pos + 1 :]
    if len(body) != w * h * 3:
        raise CorpusError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_frames(directory) -> np.ndarray:
    frames = sorted(Path(directory).glob("frame*.ppm"), key=lambda p: int(p.stem[5:]))
    if not frames:
        raise CorpusError(f"{directory}: no frame<k>.ppm files")
    return np.stack([read_ppm(f) for f in frames])


def write_corpus(samples: list[Sample], directory, vocab: Vocab | None = None):
    root = Path(directory)
    vocab = vocab or Vocab()
    samples = sorted(samples, key=lambda s: s.id)
    for s in samples:
        if s.pixels.ndim == 4:
            d = root / "videos" / s.id
            d.mkdir(parents=True, exist_ok=True)
            for k, frame in enumerate(s.pixels):
                write_ppm(d / f"frame{k}.ppm", frame)
        else:
            (root / "images").mkdir(parents=True, exist_ok=True)
            write_ppm(root / "images" / f"{s.id}.ppm", s.pixels)
    with open(root / "captions.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(f"{s.id}\t{s.caption}\n")
    with open(root / "vocab.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(vocab.itos) + "\n")


def read_corpus(directory) -> Corpus:
    root = Path(directory)
    vocab_path = root / "vocab.txt"
    if not vocab_path.exists():
        raise CorpusError(f"{vocab_path}: missing vocabulary file")
    itos = vocab_path.read_text(encoding="utf-8").split("\n")
    if itos and itos[-1] == "":
        itos.pop()
    if itos[:3] != [PAD, BOS, EOS]:
        raise CorpusError(f"{vocab_path}: special tokens must come first")
    vocab = Vocab(itos[3:])

    captions: dict[str, str] = {}
    cap_path = root / "captions.tsv"
    with open(cap_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise CorpusError(f"{cap_path}:{lineno}: expected '<id>\\t<caption>'")
            for w in parts[1].split():
                if w not in vocab.stoi:
                    raise CorpusError(f"{cap_path}:{lineno}: word {w!r} not in vocabulary")
            captions[parts[0]] = parts[1]

    entries: dict[str, Path] = {}
    if (root / "images").is_dir():
        entries.update({p.stem: p for p in (root / "images").glob("*.ppm")})
    if (root / "videos").is_dir():
        entries.update({p.name: p for p in (root / "videos").iterdir() if p.is_dir()})
    samples = []
    for sid in sorted(entries):
        if sid not in captions:
            raise CorpusError(f"{cap_path}: no caption row for id {sid}")
        path = entries[sid]
        pixels = read_frames(path) if path.is_dir() else read_ppm(path)
        samples.append(Sample(sid, pixels, captions[sid]))
    orphan = sorted(set(captions) - set(entries))
    if orphan:
        raise CorpusError(f"{cap_path}: caption for id {orphan[0]} has no image")
    return Corpus(samples, vocab)

