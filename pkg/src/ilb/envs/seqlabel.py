"""Left-to-right sequence labeling as imitation.

The state at position t is the character image plus a one-hot of the
previously predicted letter; the "dynamics" just pass the prediction on.
Includes a loader for the tab-separated handwritten-letter layout and a
synthetic glyph generator in the same layout.
"""

from __future__ import annotations

import os
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import ActionSpec, Environment, ExpertPolicy, ILBError, StateObs

N_PIXELS = 128
LETTERS = string.ascii_lowercase
OCR_ENV_VAR = "ILB_OCR_PATH"


class OcrFormatError(ILBError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class BrokenChainError(OcrFormatError):
    pass


@dataclass(frozen=True, eq=False)
class OcrRecord:
    id: int
    letter: str
    next_id: int
    word_id: int
    position: int
    fold: int
    pixels: np.ndarray  # (128,) uint8 in {0, 1}

    @property
    def label(self) -> int:
        return LETTERS.index(self.letter)

    def line(self) -> str:
        head = [self.id, self.letter, self.next_id, self.word_id, self.position, self.fold]
        return "\t".join(map(str, head + [int(p) for p in self.pixels]))


def parse_record(text: str, lineno: int) -> OcrRecord:
    parts = text.strip().split()
    if len(parts) != 6 + N_PIXELS:
        raise OcrFormatError(f"expected {6 + N_PIXELS} fields, got {len(parts)}", lineno)
    try:
        rid, nxt, wid, pos, fold = (int(parts[i]) for i in (0, 2, 3, 4, 5))
        pix = np.array([int(v) for v in parts[6:]], dtype=np.uint8)
    except ValueError as exc:
        raise OcrFormatError("non-integer field", lineno) from exc
    letter = parts[1]
    if len(letter) != 1 or letter not in LETTERS:
        raise OcrFormatError(f"letter {letter!r} not in a-z", lineno)
    if pix.max(initial=0) > 1:
        raise OcrFormatError("pixels must be 0 or 1", lineno)
    return OcrRecord(rid, letter, nxt, wid, pos, fold, pix)


def chain_words(records: list[OcrRecord], lines: dict[int, int] | None = None):
    """Follow next_id links from every record that nothing points to."""
    by_id = {}
    for r in records:
        if r.id in by_id:
            raise OcrFormatError(f"duplicate id {r.id}", (lines or {}).get(r.id))
        by_id[r.id] = r
    pointed = {r.next_id for r in records if r.next_id != -1}
    for r in records:
        if r.next_id != -1 and r.next_id not in by_id:
            raise BrokenChainError(f"id {r.id} links to missing id {r.next_id}",
                                   (lines or {}).get(r.id))
    words, seen = [], set()
    for r in records:
        if r.id in pointed:
            continue
        word, cur = [], r
        while True:
            if cur.id in seen:
                raise BrokenChainError(f"id {cur.id} reached twice", (lines or {}).get(cur.id))
            seen.add(cur.id)
            word.append(cur)
            if cur.next_id == -1:
                break
            cur = by_id[cur.next_id]
        words.append(word)
    if len(seen) != len(records):
        bad = next(r.id for r in records if r.id not in seen)
        raise BrokenChainError(f"id {bad} is on a cycle", (lines or {}).get(bad))
    return words


def load_ocr(path: str | Path) -> tuple[list[list[OcrRecord]], np.ndarray]:
    """Words (lists of records, in order) and the fold of each word."""
    records, lines = [], {}
    with open(path) as fh:
        for k, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            rec = parse_record(text, k)
            records.append(rec)
            lines[rec.id] = k
    words = chain_words(records, lines)
    folds = np.array([w[0].fold for w in words], dtype=int)
    return words, folds


def write_ocr(words: list[list[OcrRecord]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for w in words:
            for r in w:
                fh.write(r.line() + "\n")


def synth_glyphs(n_words: int, alphabet_size: int = 26, noise: float = 0.1, seed: int = 0,
                 min_len: int = 3, max_len: int = 8, n_folds: int = 10,
                 bigram_concentration: float = 0.1, successors: int = 0) -> list[list[OcrRecord]]:
    """Random glyph prototypes with per-pixel flip noise.

    Letters follow a sparse bigram chain so the previous letter carries signal.
    With ``successors > 0`` each letter allows only that many followers, with
    Dirichlet weights over them; otherwise the whole row is Dirichlet.
    """
    if not 1 <= alphabet_size <= 26:
        raise ValueError("alphabet_size must be in 1..26")
    if not 0 <= noise <= 1:
        raise ValueError("noise must be in [0, 1]")
    rng = np.random.default_rng(seed)
    protos = rng.random((alphabet_size, N_PIXELS)) < 0.5
    start = rng.dirichlet(np.ones(alphabet_size))
    if successors > 0:
        k = min(successors, alphabet_size)
        trans = np.zeros((alphabet_size, alphabet_size))
        for a in range(alphabet_size):
            allowed = rng.choice(alphabet_size, size=k, replace=False)
            trans[a, allowed] = rng.dirichlet(np.full(k, max(bigram_concentration, 1e-3)))
    else:
        trans = rng.dirichlet(np.full(alphabet_size, bigram_concentration), size=alphabet_size)
    words = []
    rid = 1
    for w in range(n_words):
        n = int(rng.integers(min_len, max_len + 1))
        labels = [int(rng.choice(alphabet_size, p=start))]
        for _ in range(n - 1):
            labels.append(int(rng.choice(alphabet_size, p=trans[labels[-1]])))
        flips = rng.random((n, N_PIXELS)) < noise
        word = []
        for pos, (lab, fl) in enumerate(zip(labels, flips)):
            pix = (protos[lab] ^ fl).astype(np.uint8)
            nxt = rid + 1 if pos < n - 1 else -1
            word.append(OcrRecord(rid, LETTERS[lab], nxt, w + 1, pos + 1, w % n_folds, pix))
            rid += 1
        words.append(word)
    return words


def ocr_corpus_from_env(**synth_kw):
    """Real data from ``$ILB_OCR_PATH`` if set, otherwise a synthetic corpus."""
    path = os.environ.get(OCR_ENV_VAR)
    if path:
        return load_ocr(path)
    words = synth_glyphs(**synth_kw)
    return words, np.array([w[0].fold for w in words], dtype=int)


class SeqLabelEnv(Environment):
    """One episode labels one word; cost 1 per wrong letter.

    ``reset`` draws a training word. Evaluation runs every test word once.
    """

    name = "seqlabel"
    primary_metric = "accuracy"
    custom_evaluation = True

    def __init__(self, words, folds=None, test_fold: int = 0, alphabet_size: int = 26,
                 use_previous: bool = True):
        folds = np.array([w[0].fold for w in words]) if folds is None else np.asarray(folds)
        self.train_words = [w for w, f in zip(words, folds) if f != test_fold]
        self.test_words = [w for w, f in zip(words, folds) if f == test_fold]
        if not self.train_words:
            raise ValueError("no training words outside the test fold")
        self.K = alphabet_size
        self.use_previous = use_previous
        self.action_spec = ActionSpec("discrete", alphabet_size)
        self.feature_dim = N_PIXELS + (alphabet_size if use_previous else 0)
        self.horizon = max(len(w) for w in words)
        self._word = self.train_words[0]
        self._pos = 0
        self._prev = -1
        self._correct = 0

    def _obs(self) -> StateObs:
        r = self._word[self._pos]
        f = np.zeros(self.feature_dim)
        f[:N_PIXELS] = r.pixels
        if self.use_previous and self._prev >= 0:
            f[N_PIXELS + self._prev] = 1.0
        return StateObs(features=f, t=self._pos + 1, internal=r.label)

    def reset(self, rng):
        self._word = self.train_words[int(rng.integers(len(self.train_words)))]
        return self._start()

    def _start(self):
        self._pos, self._prev, self._correct = 0, -1, 0
        return self._obs()

    def step(self, action):
        a = int(action)
        truth = self._word[self._pos].label
        self._correct += a == truth
        self._prev = a
        self._pos += 1
        done = self._pos >= len(self._word)
        obs = None if done else self._obs()
        return obs, float(a != truth), done

    def episode_metrics(self):
        return {"correct": float(self._correct), "length": float(len(self._word)),
                "accuracy": self._correct / len(self._word)}

    def expert(self):
        return ExpertPolicy(lambda st: st.internal, self.action_spec, "ground_truth")

    def evaluate(self, policy, episodes=0, seed=0, words=None):
        """Character accuracy over all test words (``episodes`` is ignored)."""
        words = self.test_words if words is None else words
        correct = total = 0
        for w in words:
            self._word = w
            state = self._start()
            for _ in range(len(w)):
                a = int(policy.act(state, None))
                state, _, done = self.step(a)
                if done:
                    break
            correct += self._correct
            total += len(w)
        return {"accuracy": correct / total if total else float("nan"),
                "characters": float(total)}


def teacher_forced_dataset(env: SeqLabelEnv, words=None):
    """Features with the true previous letter, as in ordinary supervised training."""
    words = env.train_words if words is None else words
    X, y = [], []
    for w in words:
        prev = -1
        for r in w:
            f = np.zeros(env.feature_dim)
            f[:N_PIXELS] = r.pixels
            if env.use_previous and prev >= 0:
                f[N_PIXELS + prev] = 1.0
            X.append(f)
            y.append(r.label)
            prev = r.label
    return np.array(X), np.array(y)


__all__ = ["OcrRecord", "OcrFormatError", "BrokenChainError", "load_ocr", "write_ocr",
           "synth_glyphs", "SeqLabelEnv", "ocr_corpus_from_env", "teacher_forced_dataset",
]
