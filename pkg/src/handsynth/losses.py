"""Training objectives: hinge adversarial terms, CTC, writer cross-entropy,
style reconstruction, KL, and the weighted generator composite."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .frequency import fdl_loss  # noqa: F401  (re-exported: the FDL term lives with the other losses)
from .tensor import Tensor

LAMBDA_KL = 0.0001
LAMBDA_FDL = 1.0
BALANCED_TERMS = ("rec", "writer", "style")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term
        self.value = value


class InfeasibleAlignmentError(ValueError):
    """Raised when a CTC target cannot be aligned within the available frames."""

    def __init__(self, indices, frames: int, required):
        self.indices = list(indices)
        self.frames = frames
        self.required = list(required)
        super().__init__(f"CTC alignment infeasible for batch items {self.indices}: "
                         f"{frames} frames, minimum required {self.required}")


# -- adversarial -----------------------------------------------------------------

def hinge_d(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """mean(max(0, 1 - s_real)) + mean(max(0, 1 + s_fake))."""
    return T.mean(T.relu(1.0 - T.as_tensor(scores_real))) + T.mean(T.relu(1.0 + T.as_tensor(scores_fake)))


def hinge_g(scores_fake: Tensor) -> Tensor:
    return T.neg(T.mean(T.as_tensor(scores_fake)))


def hf_adversarial(d_hf, x_real: Tensor, x_fake: Tensor, widths_real=None, widths_fake=None) -> tuple:
    """(discriminator-side hinge, generator-side hinge) on D_HF scores.

    The discriminator side sees the fake batch detached.
    """
    s_real = d_hf(x_real, widths_real)
    s_fake_d = d_hf(T.as_tensor(x_fake).detach(), widths_fake)
    d_side = hinge_d(s_real, s_fake_d)
    g_side = hinge_g(d_hf(x_fake, widths_fake))
    return d_side, g_side


# -- CTC -------------------------------------------------------------------------

def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    finite = np.isfinite(m)
    safe = np.where(finite, m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
        return np.where(finite, safe + np.log(s), -np.inf)


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift along the state axis by k (positive: toward higher s), filling with -inf."""
    out = np.full_like(a, -np.inf)
    if k > 0:
        out[:, k:] = a[:, :-k]
    else:
        out[:, :k] = a[:, -k:]
    return out


def min_ctc_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def _ctc_tables(lp: np.ndarray, targets, blank: int):
    """Forward/backward log tables for a (T, B, K) log-prob array.

    Returns (log_alpha, log_beta, ext_labels, log_likelihood); beta excludes
    the emission at its own frame.
    """
    Tn, B, _ = lp.shape
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    valid = np.zeros((B, S), dtype=bool)
    last = np.zeros(B, dtype=np.int64)
    for b, t in enumerate(targets):
        n = 2 * len(t) + 1
        ext[b, 1:n:2] = t
        valid[b, :n] = True
        last[b] = n - 1
        for s in range(3, n, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    bi = np.arange(B)[:, None]
    emit = lp[:, bi, ext]  # (T, B, S)
    emit = np.where(valid[None], emit, -np.inf)

    alpha = np.full((Tn, B, S), -np.inf)
    alpha[0, :, 0] = emit[0, :, 0]
    if S > 1:
        alpha[0, :, 1] = emit[0, :, 1]
    for t in range(1, Tn):
        prev = alpha[t - 1]
        s1 = _shift(prev, 1)
        s2 = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = _logsumexp3(prev, s1, s2) + emit[t]

    beta = np.full((Tn, B, S), -np.inf)
    beta[Tn - 1, np.arange(B), last] = 0.0
    has_prev = last >= 1
    beta[Tn - 1, np.arange(B)[has_prev], last[has_prev] - 1] = 0.0
    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(Tn - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        n1 = _shift(nxt, -1)
        n2 = np.where(skip_next, _shift(nxt, -2), -np.inf)
        beta[t] = _logsumexp3(nxt, n1, n2)

    fin = alpha[Tn - 1, np.arange(B), last]
    fin2 = np.where(has_prev, alpha[Tn - 1, np.arange(B), np.maximum(last - 1, 0)], -np.inf)
    m = np.maximum(fin, fin2)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        loglik = np.where(np.isfinite(m), safe + np.log(np.exp(fin - safe) + np.exp(fin2 - safe)), -np.inf)
    return alpha, beta, ext, loglik


def _ctc_node(log_probs: Tensor, targets, keep: np.ndarray, blank: int) -> Tensor:
    lp = log_probs.data.astype(np.float64)
    Tn, B, K = lp.shape
    sel = np.flatnonzero(keep)
    alpha, beta, ext, loglik = _ctc_tables(lp[:, sel], [targets[i] for i in sel], blank)
    nll = -loglik
    loss = nll.mean()

    def bw(g):
        # d(-log p)/d lp[t, k] = -sum_{s: ext_s = k} exp(alpha + beta - log p)
        occ = np.exp(alpha + beta - loglik[None, :, None])  # (T, B', S)
        grad = np.zeros((Tn, len(sel), K))
        tb = np.arange(Tn)[:, None, None]
        bb = np.arange(len(sel))[None, :, None]
        np.add.at(grad, (tb, bb, ext[None]), occ)
        full = np.zeros_like(lp)
        full[:, sel] = -grad / len(sel)
        return ((full * float(g)).astype(log_probs.dtype),)

    return T.make_node(np.asarray(loss, dtype=log_probs.dtype), (log_probs,), bw, "ctc")


def _prepare_targets(targets, target_lengths) -> list:
    targets = np.asarray(targets) if not isinstance(targets, list) else targets
    if isinstance(targets, np.ndarray) and targets.ndim == 2:
        return [list(map(int, targets[b, :int(n)])) for b, n in enumerate(target_lengths)]
    if isinstance(targets, np.ndarray):
        # concatenated 1-D layout
        out, start = [], 0
        for n in target_lengths:
            out.append(list(map(int, targets[start:start + int(n)])))
            start += int(n)
        return out
    return [list(map(int, t[:int(n)])) for t, n in zip(targets, target_lengths)]


def ctc_loss(log_probs: Tensor, targets, target_lengths, blank: int | None = None) -> Tensor:
    """Batch-mean CTC negative log-likelihood of (T, B, n+1) log-probabilities.

    ``targets`` is a padded (B, L) array, a concatenated 1-D array, or a list
    of sequences. Any infeasible sample raises ``InfeasibleAlignmentError``.
    """
    log_probs = T.as_tensor(log_probs)
    Tn, B, K = log_probs.shape
    blank = K - 1 if blank is None else blank
    seqs = _prepare_targets(targets, target_lengths)
    need = [min_ctc_frames(t) for t in seqs]
    bad = [b for b, n in enumerate(need) if n > Tn]
    if bad:
        raise InfeasibleAlignmentError(bad, Tn, [need[b] for b in bad])
    return _ctc_node(log_probs, seqs, np.ones(B, dtype=bool), blank)


def ctc_loss_feasible(log_probs: Tensor, targets, target_lengths, blank: int | None = None) -> tuple:
    """Like ``ctc_loss`` but infeasible samples are dropped from the mean.

    Returns (loss, number excluded). Raises if nothing is feasible.
    """
    log_probs = T.as_tensor(log_probs)
    Tn, B, K = log_probs.shape
    blank = K - 1 if blank is None else blank
    seqs = _prepare_targets(targets, target_lengths)
    need = np.array([min_ctc_frames(t) for t in seqs])
    keep = need <= Tn
    if not keep.any():
        raise InfeasibleAlignmentError(range(B), Tn, need.tolist())
    return _ctc_node(log_probs, seqs, keep, blank), int((~keep).sum())


# -- writer / style / KL ------------------------------------------------------------

def writer_ce(logits: Tensor, writer_id) -> Tensor:
    logits = T.as_tensor(logits)
    ids = np.asarray(writer_id, dtype=np.int64).reshape(-1)
    B, n = logits.shape
    if ids.shape[0] != B:
        raise ValueError(f"{ids.shape[0]} writer ids for a batch of {B}")
    if ids.min() < 0 or ids.max() >= n:
        raise IndexError(f"writer id out of range [0, {n}): {ids.tolist()}")
    logp = T.log_softmax(logits, axis=-1)
    return T.neg(T.mean(logp[np.arange(B), ids]))


def style_recon_l1(z: Tensor, z_rec: Tensor) -> Tensor:
    z, z_rec = T.as_tensor(z), T.as_tensor(z_rec)
    if z.shape != z_rec.shape:
        raise ValueError(f"style vectors differ in shape: {z.shape} vs {z_rec.shape}")
    return T.mean(T.tabs(z - z_rec))


def kl_gauss(posterior) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over dimensions, averaged over the batch."""
    mu, lv = posterior.mu, posterior.logvar
    per_dim = mu * mu + T.exp(lv) - 1.0 - lv
    return T.mean(T.tsum(per_dim, axis=-1)) * 0.5


# -- composite ---------------------------------------------------------------------

@dataclass
class LossBundle:
    """Named generator-side loss components and their weights."""

    adv: Tensor | None = None
    hf: Tensor | None = None
    rec: Tensor | None = None
    writer: Tensor | None = None
    style: Tensor | None = None
    kl: Tensor | None = None
    fdl: Tensor | None = None
    weights: dict = field(default_factory=lambda: {"rec": 1.0, "writer": 1.0, "style": 1.0,
                                                   "kl": LAMBDA_KL, "fdl": LAMBDA_FDL})

    TERMS = ("adv", "hf", "rec", "writer", "style", "kl", "fdl")

    def items(self):
        for name in self.TERMS:
            val = getattr(self, name)
            if val is not None:
                yield name, val

    def weight(self, name: str) -> float:
        return 1.0 if name in ("adv", "hf") else float(self.weights.get(name, 0.0))

    def check_finite(self) -> None:
        for name, val in self.items():
            v = float(np.asarray(val.data).reshape(-1)[0])
            if not np.isfinite(v):
                raise NonFiniteLossError(name, v)
        for name, w in self.weights.items():
            if w < 0:
                raise ValueError(f"loss weight for {name} is negative: {w}")


def composite_generator_loss(bundle: LossBundle, balancer_state: "GradientBalancer | None" = None) -> Tensor:
    """adv + hf + sum of weighted auxiliary terms; balanced weights come from ``balancer_state``."""
    bundle.check_finite()
    weights = dict(bundle.weights)
    if balancer_state is not None:
        weights.update(balancer_state.lambdas)
    total = None
    for name, val in bundle.items():
        w = 1.0 if name in ("adv", "hf") else weights.get(name, 0.0)
        if w == 0.0:
            continue
        term = val if w == 1.0 else val * w
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


class GradientBalancer:
    """Adaptive weights for the recognition, writer and style terms.

    Each step the caller reports gradient norms at the generated image; the
    norms are smoothed with an exponential moving average and, every
    ``interval`` steps, lambda_l is reset to clip(|adv| / (|l| + eps), lo, hi).
    """

    def __init__(self, interval: int = 16, momentum: float = 0.99, lo: float = 0.01, hi: float = 10.0,
                 eps: float = 1e-8, terms=BALANCED_TERMS):
        self.interval, self.momentum, self.lo, self.hi, self.eps = interval, momentum, lo, hi, eps
        self.terms = tuple(terms)
        self.lambdas = {t: 1.0 for t in self.terms}
        self.norms: dict = {}
        self.updates = 0

    def observe(self, name: str, norm: float) -> None:
        norm = float(norm)
        if not np.isfinite(norm):
            return
        prev = self.norms.get(name)
        self.norms[name] = norm if prev is None else self.momentum * prev + (1.0 - self.momentum) * norm

    def step(self, step_index: int) -> None:
        if (step_index + 1) % self.interval:
            return
        adv = self.norms.get("adv")
        if adv is None:
            return
        for t in self.terms:
            n = self.norms.get(t)
            if n is not None:
                self.lambdas[t] = float(np.clip(adv / (n + self.eps), self.lo, self.hi))
        self.updates += 1

    def state(self) -> dict:
        return {"lambdas": dict(self.lambdas), "norms": dict(self.norms), "updates": self.updates}

    def load_state(self, state: dict) -> None:
        self.lambdas = {k: float(v) for k, v in state["lambdas"].items()}
        self.norms = {k: float(v) for k, v in state["norms"].items()}
        self.updates = int(state["updates"])
