"""Edit-distance metrics, Frechet feature distance and scenario evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .networks import Models, to_canvas
from .nn import evaluating
from .tensor import Tensor
from .text import decode_greedy
from .toygen import CANVAS_WIDTH, ToyDataset, collate, to_uint8

log = logging.getLogger(__name__)

SCENARIOS = ("iv-s", "iv-u", "oov-s", "oov-u", "replication")
NEG_EIG_TOL = 1e-6


# -- edit distances ------------------------------------------------------------

def levenshtein(a, b) -> int:
    """Edit distance between two sequences (strings or token lists)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_metrics(predictions, references) -> tuple:
    """(CER, WER, NED) over aligned prediction / reference lists.

    CER and WER divide the summed edit distance by the summed reference
    length; an all-empty reference side uses a denominator of 1, so every
    predicted character counts as an insertion. NED averages
    lev / max(len(pred), len(ref)) per pair, 0 when both are empty.
    """
    predictions, references = list(predictions), list(references)
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions for {len(references)} references")
    char_err = sum(levenshtein(p, r) for p, r in zip(predictions, references))
    char_len = sum(len(r) for r in references)
    word_err = sum(levenshtein(p.split(), r.split()) for p, r in zip(predictions, references))
    word_len = sum(len(r.split()) for r in references)
    ned = [levenshtein(p, r) / max(len(p), len(r)) if (p or r) else 0.0 for p, r in zip(predictions, references)]
    return (char_err / max(char_len, 1), word_err / max(word_len, 1),
            float(np.mean(ned)) if ned else 0.0)


# -- Frechet distance ------------------------------------------------------------

def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two (N, D) feature sets.

    The cross term uses the eigenvalues of the symmetrized
    sqrt(S_a) S_b sqrt(S_a); eigenvalues below -1e-6 are logged, and all
    negatives are clipped to 0.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError(f"need at least 2 samples per side, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    s_a = np.atleast_2d(np.cov(a, rowvar=False))
    s_b = np.atleast_2d(np.cov(b, rowvar=False))
    r = _psd_sqrt(s_a)
    m = r @ s_b @ r
    eig = np.linalg.eigvalsh((m + m.T) / 2.0)
    if eig.min() < -NEG_EIG_TOL:
        log.warning("Frechet cross term has negative eigenvalue %.3g; clipped to 0", eig.min())
    cross = np.sqrt(np.clip(eig, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a) + np.trace(s_b) - 2.0 * cross)
    return max(d, 0.0)


def image_features(images: np.ndarray, widths, feature_net, batch: int = 64) -> np.ndarray:
    """Mean-pooled shared-backbone features of (N, 1, 32, W) images, inference mode."""
    out = []
    with T.no_grad(), evaluating(feature_net):
        for i in range(0, len(images), batch):
            w = None if widths is None else np.asarray(widths[i:i + batch])
            f = feature_net.pooled_features(Tensor(images[i:i + batch]), w)
            out.append(np.asarray(f.data, dtype=np.float64))
    return np.concatenate(out, axis=0)


def frechet_feature_distance(real_images, fake_images, feature_net, real_widths=None, fake_widths=None) -> float:
    """Frechet distance between backbone features of real and generated images."""
    if len(real_images) < 2 or len(fake_images) < 2:
        raise ValueError("frechet_feature_distance needs at least 2 images per side")
    return frechet_distance(image_features(real_images, real_widths, feature_net),
                            image_features(fake_images, fake_widths, feature_net))


# -- generation helpers ------------------------------------------------------------

def generate_images(models: Models, texts, refs: np.ndarray | None, ref_widths=None, z=None,
                    batch: int = 50) -> tuple:
    """Generate canvases for ``texts``; style from E(refs) (posterior mean) or explicit ``z``."""
    G, S = models.G, models.S
    imgs, widths = [], []
    with T.no_grad(), evaluating(G, S):
        for i in range(0, len(texts), batch):
            chunk = list(texts[i:i + batch])
            if z is not None:
                zb = Tensor(z[i:i + batch])
            else:
                rw = None if ref_widths is None else ref_widths[i:i + batch]
                zb = S.encode(Tensor(refs[i:i + batch]), rw).mu
            im, w = G.generate(chunk, zb)
            imgs.append(to_canvas(im, models.arch.canvas_width).data)
            widths.append(w)
    return np.concatenate(imgs), np.concatenate(widths)


def recognize(models: Models, images: np.ndarray, batch: int = 100) -> list:
    vocab = models.arch.make_vocab()
    preds = []
    with T.no_grad(), evaluating(models.R):
        for i in range(0, len(images), batch):
            preds += decode_greedy(models.R(Tensor(images[i:i + batch])), vocab)
    return preds


def save_grid(images: np.ndarray, path, cols: int = 4, rows: int = 4) -> Path:
    """Tile the first rows*cols canvases into one PNG."""
    n = min(len(images), rows * cols)
    H, W = images.shape[-2:]
    grid = np.full((rows * H, cols * W), 255, dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        grid[r * H:(r + 1) * H, c * W:(c + 1) * W] = to_uint8(images[k, 0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(path)
    return path


# -- reports -----------------------------------------------------------------------

@dataclass
class EvalReport:
    cer: float = 0.0
    wer: float = 0.0
    ned: float = 0.0
    frechet_feature_distance: float = 0.0
    scenarios: dict = field(default_factory=dict)  # name -> {metric: value}
    grids: dict = field(default_factory=dict)  # name -> path

    def __post_init__(self):
        for name in ("cer", "wer", "ned", "frechet_feature_distance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    def to_text(self) -> str:
        lines = [f"cer = {self.cer!r}", f"wer = {self.wer!r}", f"ned = {self.ned!r}",
                 f"frechet_feature_distance = {self.frechet_feature_distance!r}"]
        for name in sorted(self.scenarios):
            for k, v in sorted(self.scenarios[name].items()):
                lines.append(f"scenario.{name}.{k} = {v!r}")
        for name in sorted(self.grids):
            lines.append(f"grid.{name} = {self.grids[name]}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        rep = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if " = " not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split(" = ", 1)
            if key.startswith("scenario."):
                _, name, metric = key.split(".", 2)
                v = float(val)
                rep.scenarios.setdefault(name, {})[metric] = int(v) if metric == "n" else v
            elif key.startswith("grid."):
                rep.grids[key[5:]] = val
            elif key in ("cer", "wer", "ned", "frechet_feature_distance"):
                setattr(rep, key, float(val))
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        return rep


# -- scenarios ---------------------------------------------------------------------

def scenario_pools(dataset: ToyDataset, name: str) -> tuple:
    """(word pool, style/reference samples) for one scenario."""
    train, test = dataset.train(), dataset.test()
    if name == "iv-s":
        return list(dataset.lexicon), train
    if name == "iv-u":
        return list(dataset.lexicon), test
    if name == "oov-s":
        return list(dataset.oov_lexicon), train
    if name == "oov-u":
        return list(dataset.oov_lexicon), test
    if name == "replication":
        return None, test
    raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")


def evaluate(models: Models, dataset: ToyDataset, scenarios=SCENARIOS, n_per_scenario: int = 1000,
             seed: int = 0, out_dir=None, batch: int = 50) -> EvalReport:
    """Generate each scenario's images, score them with R and against the matching real pool.

    Styles come from the posterior mean of E on a reference image drawn from
    the scenario's writer pool; the replication scenario re-renders each test
    sample's own word from that sample.
    """
    all_pred, all_ref, fds = [], [], []
    report = EvalReport()
    for k, name in enumerate(scenarios):
        words, pool = scenario_pools(dataset, name)
        if len(pool) == 0 or (words is not None and len(words) == 0):
            raise ValueError(f"scenario {name!r} has an empty pool")
        rng = np.random.default_rng([seed, k])
        if name == "replication":
            idx = np.arange(min(n_per_scenario, len(pool)))
            refs = [pool[int(i)] for i in idx]
            texts = [s.text for s in refs]
        else:
            idx = rng.integers(0, len(pool), size=n_per_scenario)
            refs = [pool[int(i)] for i in idx]
            texts = [words[int(i)] for i in rng.integers(0, len(words), size=n_per_scenario)]
        ref_batch = collate(refs, CANVAS_WIDTH)
        fake, fake_w = generate_images(models, texts, ref_batch.images, ref_batch.widths, batch=batch)
        preds = recognize(models, fake)
        cer, wer, ned = edit_metrics(preds, texts)
        real_idx = rng.choice(len(pool), size=min(len(pool), len(texts)), replace=False)
        real = collate([pool[int(i)] for i in real_idx], CANVAS_WIDTH)
        fd = frechet_feature_distance(real.images, fake, models.S, real.widths, fake_w)
        report.scenarios[name] = {"cer": cer, "wer": wer, "ned": ned, "frechet_feature_distance": fd,
                                  "n": len(texts)}
        if out_dir is not None:
            report.grids[name] = str(save_grid(fake, Path(out_dir) / f"grid_{name}.png"))
        all_pred += preds
        all_ref += texts
        fds.append(fd)
    report.cer, report.wer, report.ned = edit_metrics(all_pred, all_ref)
    report.frechet_feature_distance = float(np.mean(fds)) if fds else 0.0
    if out_dir is not None:
        report.save(Path(out_dir) / "report.txt")
    return report
