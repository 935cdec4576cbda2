"""Dataset construction for the desk-scale harness.

Two tasks: a Gaussian-mixture classification problem with label-dependent
means, and next-character prediction over a bundled ~1 MB text corpus.
Splits and batch streams are fully determined by the seed.
"""

import hashlib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ConfigError

TASK_CLASSIFICATION = "synthetic_classification"
TASK_CHAR_LM = "char_lm"


@dataclass
class ClassificationData:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    n_classes: int
    dim: int


@dataclass
class CharLMData:
    train_tokens: np.ndarray
    eval_tokens: np.ndarray
    vocab: str
    context: int

    @property
    def vocab_size(self):
        return len(self.vocab)

    def encode(self, text):
        stoi = {ch: i for i, ch in enumerate(self.vocab)}
        return np.array([stoi[ch] for ch in text], dtype=np.int64)


def bundled_corpus_path():
    return resources.files("ibnorm").joinpath("assets/corpus.txt")


def _make_classification(params, seed):
    p = dict(params or {})
    k = int(p.get("n_classes", 4))
    dim = int(p.get("dim", 16))
    n_train = int(p.get("n_train", 2048))
    n_eval = int(p.get("n_eval", 512))
    separation = float(p.get("separation", 3.0))
    if k < 2 or dim < 1 or k > dim:
        raise ConfigError(f"bad mixture shape: k={k}, dim={dim} (need 2 <= k <= dim)")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    # orthonormal mean directions keep pairwise separation exactly sqrt(2)*sep
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    means = separation * basis[:, :k].T

    def draw(n):
        y = rng.integers(0, k, size=n)
        x = means[y] + rng.standard_normal((n, dim))
        return x, y

    train_x, train_y = draw(n_train)
    eval_x, eval_y = draw(n_eval)
    return ClassificationData(train_x, train_y, eval_x, eval_y, k, dim)


def _make_char_lm(params, seed):
    p = dict(params or {})
    context = int(p.get("context", 64))
    eval_frac = float(p.get("eval_frac", 0.1))
    path = p.get("path")
    try:
        if path is None:
            text = bundled_corpus_path().read_text(encoding="utf-8")
        else:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
    except (OSError, UnicodeDecodeError) as e:
        raise OSError(f"cannot read corpus: {e}") from e
    if not text:
        raise OSError(f"empty text file: {path or 'bundled corpus'}")
    if len(text) < 2 * context + 2:
        raise OSError("corpus too short for the requested context")

    vocab = "".join(sorted(set(text)))
    stoi = {ch: i for i, ch in enumerate(vocab)}
    tokens = np.array([stoi[ch] for ch in text], dtype=np.int64)
    split = int(len(tokens) * (1.0 - eval_frac))
    return CharLMData(train_tokens=tokens[:split], eval_tokens=tokens[split:],
                      vocab=vocab, context=context)


def make_dataset(task, params, seed):
    if task == TASK_CLASSIFICATION:
        return _make_classification(params, seed)
    if task == TASK_CHAR_LM:
        return _make_char_lm(params, seed)
    raise ConfigError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------

def sample_classification_batch(data, batch_size, rng):
    idx = rng.integers(0, data.train_x.shape[0], size=batch_size)
    return data.train_x[idx], data.train_y[idx]


def sample_lm_batch(tokens, context, batch_size, rng):
    starts = rng.integers(0, tokens.size - context - 1, size=batch_size)
    x = np.stack([tokens[s:s + context] for s in starts])
    y = np.stack([tokens[s + 1:s + context + 1] for s in starts])
    return x, y


def fixed_lm_windows(tokens, context, batch_size, offset=0):
    """Deterministic evenly spaced windows for evaluation batches."""
    usable = tokens.size - context - 1
    starts = np.linspace(offset, usable - 1, batch_size).astype(np.int64)
    x = np.stack([tokens[s:s + context] for s in starts])
    y = np.stack([tokens[s + 1:s + context + 1] for s in starts])
    return x, y


class BatchDigest:
    """Running SHA-256 over the sampled batch stream (norm-swap invariance)."""

    def __init__(self):
        self._h = hashlib.sha256()

    def update(self, x, y):
        self._h.update(np.ascontiguousarray(x).tobytes())
        self._h.update(np.ascontiguousarray(y).tobytes())

    def hexdigest(self):
        return self._h.hexdigest()
