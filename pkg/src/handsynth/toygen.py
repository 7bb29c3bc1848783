"""Procedural handwriting-like word images from parametric synthetic writers.

Glyphs are polyline skeletons (one JSON file per vocabulary version) drawn
with an anti-aliased distance-field brush. Every random choice is keyed by
(seed, writer_id, sample index), so a build is a pure function of its inputs.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .text import UnknownCharacterError, Vocab

log = logging.getLogger(__name__)

HEIGHT = 32
PX_PER_CHAR = 16
CANVAS_WIDTH = 128
MAX_LEN = 8
BASELINE_PX = 22.0
UNIT_PX = 8.0  # one x-height in pixels
CELL_MARGIN = 2.0
BACKGROUND_U8 = 255

SLANT_RANGE = (-0.35, 0.35)
STROKE_RANGE = (1.0, 3.0)
INK_RANGE = (0.0, 0.45)
WOBBLE_RANGE = (0.0, 1.5)
JITTER_RANGE = (0.0, 0.12)

STREAM_STYLE = 1
STREAM_WORDS = 2
STREAM_RENDER = 3
STREAM_CORPUS = 4


def _data_path(name: str):
    return resources.files("handsynth").joinpath("data", name)


@lru_cache(maxsize=4)
def load_glyphs(path: str | None = None) -> dict:
    """Glyph skeletons: {char: [stroke, ...]}, a stroke being [[x, y], ...] in cell units."""
    src = Path(path) if path else _data_path("glyphs_v1.json")
    doc = json.loads(src.read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise ValueError(f"unsupported glyph file version {doc.get('version')!r}")
    return {ch: [np.asarray(s, dtype=np.float64) for s in strokes] for ch, strokes in doc["glyphs"].items()}


def read_lexicon(path) -> list:
    """One word per line, UTF-8; blank lines ignored."""
    with open(path, encoding="utf-8") as f:
        return [w.strip() for w in f if w.strip()]


def default_lexicons() -> tuple:
    """(training lexicon, out-of-vocabulary lexicon), disjoint by construction."""
    train = read_lexicon(_data_path("lexicon_train.txt"))
    seen = set(train)
    oov = [w for w in read_lexicon(_data_path("lexicon_oov.txt")) if w not in seen]
    return train, oov


# -- writer styles -------------------------------------------------------------

@dataclass(frozen=True)
class ToyWriterStyle:
    writer_id: int
    slant: float
    stroke_width: float
    ink_level: float
    baseline_wobble: float
    spacing_jitter: float
    glyph_seed: int
    wobble_period: float = 24.0

    def __post_init__(self):
        for name, (lo, hi) in (("slant", SLANT_RANGE), ("stroke_width", STROKE_RANGE),
                               ("ink_level", INK_RANGE), ("baseline_wobble", WOBBLE_RANGE),
                               ("spacing_jitter", JITTER_RANGE)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    @classmethod
    def from_seed(cls, seed: int, writer_id: int) -> "ToyWriterStyle":
        """The style of ``writer_id``; the same (seed, writer_id) always gives the same style."""
        rng = np.random.default_rng([seed, STREAM_STYLE, writer_id])
        return cls(writer_id=int(writer_id),
                   slant=float(rng.uniform(*SLANT_RANGE)),
                   stroke_width=float(rng.uniform(*STROKE_RANGE)),
                   ink_level=float(rng.uniform(*INK_RANGE)),
                   baseline_wobble=float(rng.uniform(*WOBBLE_RANGE)),
                   spacing_jitter=float(rng.uniform(*JITTER_RANGE)),
                   glyph_seed=int(rng.integers(0, 2 ** 31 - 1)),
                   wobble_period=float(rng.uniform(16.0, 40.0)))


def _glyph_offsets(style: ToyWriterStyle, ch: str, strokes) -> list:
    """Writer-specific control-point displacement of one glyph (cell units)."""
    rng = np.random.default_rng([style.glyph_seed, ord(ch)])
    return [rng.normal(0.0, 0.05, size=s.shape) for s in strokes]


# -- rasterization --------------------------------------------------------------

def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum distance from pixel centres (P,) to segments a->b (S, 2)."""
    d = b - a
    len2 = np.maximum((d ** 2).sum(axis=1), 1e-12)
    rx = px[:, None] - a[None, :, 0]
    ry = py[:, None] - a[None, :, 1]
    t = np.clip((rx * d[None, :, 0] + ry * d[None, :, 1]) / len2[None], 0.0, 1.0)
    ex = rx - t * d[None, :, 0]
    ey = ry - t * d[None, :, 1]
    return np.sqrt(ex ** 2 + ey ** 2).min(axis=1)


def render_word(text: str, style: ToyWriterStyle, rng: np.random.Generator,
                vocab: Vocab | None = None, glyphs: dict | None = None) -> np.ndarray:
    """Draw ``text`` as a uint8 grayscale image of shape (32, 16 * len(text)).

    White background, dark ink. The writer style fixes slant, stroke width,
    ink darkness, baseline wobble, spacing jitter and glyph shape; ``rng``
    adds small per-sample variation.
    """
    vocab = vocab or Vocab()
    glyphs = glyphs if glyphs is not None else load_glyphs()
    if not text:
        raise ValueError("cannot render empty text")
    for ch in text:
        if ch not in vocab or ch not in glyphs:
            raise UnknownCharacterError(f"character {ch!r} has no glyph in the vocabulary")
    W = PX_PER_CHAR * len(text)
    alpha = np.zeros((HEIGHT, W))
    width = style.stroke_width * float(rng.uniform(0.9, 1.1))
    shear = math.tan(style.slant)
    phase = float(rng.uniform(0.0, 2 * math.pi))
    reach = int(math.ceil(width / 2 + 1.5))
    for i, ch in enumerate(text):
        strokes = glyphs[ch]
        offsets = _glyph_offsets(style, ch, strokes)
        x0 = i * PX_PER_CHAR + CELL_MARGIN + style.spacing_jitter * PX_PER_CHAR * float(rng.uniform(-1, 1))
        segs = []
        for pts, off in zip(strokes, offsets):
            p = pts + off + rng.normal(0.0, 0.02, size=pts.shape)
            x = x0 + p[:, 0] * (PX_PER_CHAR - 2 * CELL_MARGIN)
            y = BASELINE_PX - UNIT_PX * p[:, 1]
            x = x + shear * (BASELINE_PX - y)
            y = y + style.baseline_wobble * np.sin(2 * math.pi * x / style.wobble_period + phase)
            xy = np.stack([x, y], axis=1)
            if len(xy) == 1:
                xy = np.concatenate([xy, xy])
            segs.append((xy[:-1], xy[1:]))
        a = np.concatenate([s[0] for s in segs])
        b = np.concatenate([s[1] for s in segs])
        lo = int(max(math.floor(min(a[:, 0].min(), b[:, 0].min())) - reach, 0))
        hi = int(min(math.ceil(max(a[:, 0].max(), b[:, 0].max())) + reach, W))
        if hi <= lo:
            continue
        ys, xs = np.mgrid[0:HEIGHT, lo:hi]
        dist = _segment_distance(xs.ravel() + 0.5, ys.ravel() + 0.5, a, b).reshape(HEIGHT, hi - lo)
        cover = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
        alpha[:, lo:hi] = np.maximum(alpha[:, lo:hi], cover)
    gray = (1.0 - alpha) + style.ink_level * alpha
    return np.round(gray * 255.0).astype(np.uint8)


# -- preprocessing ---------------------------------------------------------------

def normalize(image_u8: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return (np.asarray(image_u8, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def preprocess(image_raw, height: int = HEIGHT, canvas_width: int = CANVAS_WIDTH) -> tuple:
    """Fit a grayscale image to the 32 x 128 canvas.

    Resize to height 32 keeping the aspect ratio; narrower results are
    right-padded with background, wider ones resized to exactly 32 x 128.
    Returns (normalized float32 image, valid pixel width).
    """
    img = np.asarray(image_raw)
    if img.ndim == 3:
        img = np.asarray(Image.fromarray(img).convert("L"))
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {img.shape}")
    if img.size == 0:
        raise ValueError("empty image")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    if h != height:
        w = max(1, int(round(w * height / h)))
        img = np.asarray(Image.fromarray(img).resize((w, height), Image.BILINEAR))
    if w > canvas_width:
        img = np.asarray(Image.fromarray(img).resize((canvas_width, height), Image.BILINEAR))
        w = canvas_width
    elif w < canvas_width:
        img = np.concatenate([img, np.full((height, canvas_width - w), BACKGROUND_U8, np.uint8)], axis=1)
    return normalize(img), w


# -- datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class GlyphSample:
    """One (image, text, writer) triple.

    ``image`` is (32, W) in [-1, 1]: either the native 16 px-per-character
    rendering or a preprocessed canvas whose valid part is ``valid_width``.
    """

    image: np.ndarray
    text: str
    writer_id: int
    valid_width: int | None = None

    def __post_init__(self):
        img = self.image
        if img.ndim != 2 or img.shape[0] != HEIGHT:
            raise ValueError(f"sample image must be ({HEIGHT}, W), got {img.shape}")
        if not self.text:
            raise ValueError("sample text is empty")
        if self.valid_width is None:
            if img.shape[1] != PX_PER_CHAR * len(self.text):
                raise ValueError(f"width {img.shape[1]} != 16 * len({self.text!r})")
            object.__setattr__(self, "valid_width", img.shape[1])
        if not (np.isfinite(img).all() and img.min() >= -1.0 and img.max() <= 1.0):
            raise ValueError("sample values must lie in [-1, 1]")
        img.setflags(write=False)


@dataclass(frozen=True)
class ToyDataset:
    samples: tuple
    train_writers: tuple = ()
    test_writers: tuple = ()
    lexicon: tuple = ()
    oov_lexicon: tuple = ()
    seed: int = 0
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def writers(self) -> tuple:
        return tuple(sorted({s.writer_id for s in self.samples}))

    def subset(self, writers) -> "ToyDataset":
        keep = set(writers)
        return ToyDataset(tuple(s for s in self.samples if s.writer_id in keep), self.train_writers,
                          self.test_writers, self.lexicon, self.oov_lexicon, self.seed)

    def train(self) -> "ToyDataset":
        return self.subset(self.train_writers)

    def test(self) -> "ToyDataset":
        return self.subset(self.test_writers)


def _split_writers(num_writers: int, seed: int, test_fraction: float = 0.25) -> tuple:
    order = np.random.default_rng([seed, STREAM_WORDS, 2 ** 20]).permutation(num_writers)
    n_test = max(1, int(round(num_writers * test_fraction))) if num_writers > 1 else 0
    return tuple(sorted(int(w) for w in order[n_test:])), tuple(sorted(int(w) for w in order[:n_test]))


def _render_writer(seed: int, writer_id: int, words: list, vocab: Vocab, glyphs: dict) -> list:
    style = ToyWriterStyle.from_seed(seed, writer_id)
    out = []
    for k, w in enumerate(words):
        rng = np.random.default_rng([seed, STREAM_RENDER, writer_id, k])
        out.append(GlyphSample(normalize(render_word(w, style, rng, vocab, glyphs)), w, writer_id))
    return out


def make_dataset(num_writers: int = 32, words_per_writer: int = 200, lexicon=None, seed: int = 0,
                 oov_lexicon=None, vocab: Vocab | None = None, max_len: int = MAX_LEN,
                 workers: int = 1, test_fraction: float = 0.25) -> ToyDataset:
    """Deterministic toy dataset: each writer renders ``words_per_writer`` lexicon words.

    Writers are split 3:1 into train/test (24/8 by default). Rendering can be
    spread over ``workers`` threads; results are merged in writer order so the
    output does not depend on the worker count.
    """
    vocab = vocab or Vocab()
    if lexicon is None or oov_lexicon is None:
        d_train, d_oov = default_lexicons()
        lexicon = d_train if lexicon is None else lexicon
        oov_lexicon = d_oov if oov_lexicon is None else oov_lexicon
    lexicon = [w for w in lexicon if w]
    if not lexicon:
        raise ValueError("empty lexicon")
    for w in lexicon:
        if len(w) > max_len:
            raise ValueError(f"lexicon word {w!r} longer than max_len {max_len}")
        if not vocab.covers(w):
            raise UnknownCharacterError(f"lexicon word {w!r} has characters outside the vocabulary")
    seen = set(lexicon)
    oov = tuple(w for w in oov_lexicon if w not in seen and vocab.covers(w) and len(w) <= max_len)
    glyphs = load_glyphs()
    plans = []
    for wid in range(num_writers):
        rng = np.random.default_rng([seed, STREAM_WORDS, wid])
        plans.append([lexicon[i] for i in rng.integers(0, len(lexicon), size=words_per_writer)])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _render_writer(seed, a[0], a[1], vocab, glyphs), enumerate(plans)))
    else:
        parts = [_render_writer(seed, wid, words, vocab, glyphs) for wid, words in enumerate(plans)]
    train_w, test_w = _split_writers(num_writers, seed, test_fraction)
    return ToyDataset(tuple(s for p in parts for s in p), train_w, test_w, tuple(lexicon), oov, seed)


def sample_corpus(lexicon, rng: np.random.Generator, n: int | None = None):
    """Uniform draw(s) from a word list; a single string when ``n`` is None."""
    if len(lexicon) == 0:
        raise ValueError("empty lexicon")
    if n is None:
        return lexicon[int(rng.integers(0, len(lexicon)))]
    return [lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=n)]


@dataclass
class Batch:
    images: np.ndarray  # (B, 1, 32, canvas) float32
    widths: np.ndarray  # valid pixel widths
    texts: list
    writer_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.texts)


def collate(samples, canvas_width: int = CANVAS_WIDTH) -> Batch:
    """Stack samples onto a background-padded canvas."""
    B = len(samples)
    x = np.ones((B, 1, HEIGHT, canvas_width), dtype=np.float32)
    widths = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(samples):
        w = min(s.image.shape[1], canvas_width)
        x[b, 0, :, :w] = s.image[:, :w]
        widths[b] = min(s.valid_width, canvas_width)
    return Batch(x, widths, [s.text for s in samples], np.array([s.writer_id for s in samples], dtype=np.int64))


# -- directory export / import --------------------------------------------------

LABELS_HEADER = "path\ttranscription\twriter_id"


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Inverse of ``normalize`` for images that came from uint8 data."""
    return np.clip(np.round((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def export_dataset(dataset, out_dir) -> Path:
    """Write images/NNNNNN.png and labels.tsv."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = [LABELS_HEADER]
    for i, s in enumerate(dataset):
        rel = f"images/{i:06d}.png"
        Image.fromarray(to_uint8(s.image[:, :s.valid_width]), mode="L").save(out / rel)
        lines.append(f"{rel}\t{s.text}\t{s.writer_id}")
    (out / "labels.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


@dataclass
class LoadReport:
    loaded: int = 0
    skipped_vocab: int = 0
    failures: list = field(default_factory=list)


def load_image_dir(path, labels_file=None, vocab: Vocab | None = None, native: bool = False) -> tuple:
    """Load a labelled image directory.

    Each labels line is ``relative_path<TAB>transcription<TAB>writer_id``
    (an optional header line is skipped). Images are preprocessed onto the
    canvas unless ``native`` is set and the image already has the native
    16 px-per-character shape. Out-of-vocabulary transcriptions are skipped and
    counted; unreadable files are reported in the returned ``LoadReport``.
    Malformed lines raise ``ValueError`` naming the line number.
    """
    vocab = vocab or Vocab()
    root = Path(path)
    labels = Path(labels_file) if labels_file else root / "labels.tsv"
    report = LoadReport()
    if not labels.exists():
        log.warning("no labels file at %s; returning an empty dataset", labels)
        return ToyDataset(()), report
    samples = []
    for lineno, line in enumerate(labels.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or (lineno == 1 and line == LABELS_HEADER):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{labels}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        rel, text, wid = parts
        try:
            wid = int(wid)
        except ValueError:
            raise ValueError(f"{labels}:{lineno}: writer id {wid!r} is not an integer") from None
        if not text or not vocab.covers(text):
            report.skipped_vocab += 1
            continue
        try:
            with Image.open(root / rel) as im:
                raw = np.asarray(im.convert("L"))
        except (OSError, ValueError) as e:
            report.failures.append((lineno, rel, str(e)))
            log.warning("%s:%d: cannot read %s (%s)", labels, lineno, rel, e)
            continue
        if native and raw.shape == (HEIGHT, PX_PER_CHAR * len(text)):
            samples.append(GlyphSample(normalize(raw), text, wid))
        else:
            img, w = preprocess(raw)
            samples.append(GlyphSample(img, text, wid, valid_width=w))
    report.loaded = len(samples)
    if not samples:
        log.warning("no usable samples in %s", root)
    return ToyDataset(tuple(samples), skipped=report.skipped_vocab), report
