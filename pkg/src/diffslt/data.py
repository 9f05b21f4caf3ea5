"""Synthetic sign-language corpus.

Sentences are weather-report style and come from a small template grammar.
Each sentence is the surface realization of a gloss sequence; one gloss
sequence has many valid realizations (synonyms, word order), which is what
makes translation diversity measurable. Each gloss is rendered as a run of
feature frames around a fixed prototype, warped by a per-signer affine map
and smoothed noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
RESERVED = (PAD, BOS, EOS)
GRAMMAR_VERSION = "weather-v1"


class CapacityError(ValueError):
    """The grammar cannot produce the requested number of distinct sentences."""


class OOVError(KeyError):
    """A token is not in the vocabulary."""


# -- grammar --------------------------------------------------------------------
DEFAULT_SLOTS: dict[str, dict[str, list[str]]] = {
    "time": {
        "TODAY": ["today"],
        "TOMORROW": ["tomorrow"],
        "TONIGHT": ["tonight", "during the night"],
        "MONDAY": ["on monday"],
        "TUESDAY": ["on tuesday"],
        "WEEKEND": ["at the weekend", "over the weekend"],
    },
    "region": {
        "NORTH": ["in the north", "in northern areas"],
        "SOUTH": ["in the south", "in southern areas"],
        "EAST": ["in the east", "in eastern areas"],
        "WEST": ["in the west", "in western areas"],
        "COAST": ["on the coast", "along the coast"],
        "MOUNTAINS": ["in the mountains", "in the alps"],
    },
    "weather": {
        "RAIN": ["rain", "showers"],
        "SNOW": ["snow", "snowfall"],
        "SUN": ["sunshine", "sun"],
        "CLOUD": ["clouds", "overcast skies"],
        "WIND": ["wind", "gusts"],
        "FOG": ["fog", "mist"],
        "STORM": ["storms", "thunderstorms"],
    },
    "intensity": {
        "STRONG": ["heavy", "strong"],
        "WEAK": ["light", "weak"],
    },
    "temp": {
        "WARM": ["warm", "pleasant"],
        "COLD": ["cold", "chilly"],
        "MILD": ["mild"],
    },
    "number": {
        "FIVE": ["five"],
        "TEN": ["ten"],
        "FIFTEEN": ["fifteen"],
        "TWENTY": ["twenty"],
        "THIRTY": ["thirty"],
    },
}

# Pattern = (gloss slots, templates). A slot is a category name or a literal
# gloss; templates refer to slot positions.
DEFAULT_PATTERNS: list[tuple[list[str], list[str]]] = [
    (
        ["time", "region", "weather"],
        [
            "{0} {1} there will be {2}",
            "{0} we expect {2} {1}",
            "{1} you can expect {2} {0}",
        ],
    ),
    (
        ["time", "region", "intensity", "weather"],
        [
            "{0} {1} there will be {2} {3}",
            "{0} we expect {2} {3} {1}",
            "{2} {3} is expected {1} {0}",
        ],
    ),
    (
        ["region", "temp", "number"],
        [
            "{0} it will be {1} with up to {2} degrees",
            "temperatures reach {2} degrees {0} so it stays {1}",
            "{0} it stays {1} at around {2} degrees",
        ],
    ),
    (
        ["time", "weather", "LATER", "weather"],
        [
            "{0} there will be {1} and later {3}",
            "{1} {0} followed later by {3}",
            "{0} we expect {1} and later {3}",
        ],
    ),
    (
        ["time", "region", "weather", "ALSO", "region"],
        [
            "{0} {2} {1} and also {4}",
            "{0} there will be {2} {1} and {4} as well",
        ],
    ),
]

DEFAULT_LITERALS = {"LATER": "later", "ALSO": "also"}


@dataclass
class Grammar:
    slots: dict[str, dict[str, list[str]]] = field(default_factory=lambda: DEFAULT_SLOTS)
    patterns: list = field(default_factory=lambda: DEFAULT_PATTERNS)
    literals: dict[str, str] = field(default_factory=lambda: DEFAULT_LITERALS)
    version: str = GRAMMAR_VERSION

    def gloss_tokens(self) -> list[str]:
        names = [g for cat in self.slots.values() for g in cat]
        return sorted(set(names) | set(self.literals))

    def lemma(self, gloss: str) -> str:
        """Sentence word that names ``gloss`` (last word of its first phrase)."""
        if gloss in self.literals:
            return self.literals[gloss]
        for cat in self.slots.values():
            if gloss in cat:
                return cat[gloss][0].split()[-1]
        raise OOVError(gloss)

    def sentence_words(self) -> list[str]:
        words: set[str] = set()
        for cat in self.slots.values():
            for phrases in cat.values():
                for ph in phrases:
                    words.update(ph.split())
        for _, templates in self.patterns:
            for tpl in templates:
                words.update(w for w in tpl.split() if not w.startswith("{"))
        return sorted(words)

    def capacity(self) -> int:
        """Upper bound on the number of distinct surface sentences."""
        total = 0
        for slots, templates in self.patterns:
            n = len(templates)
            for s in slots:
                if s in self.slots:
                    n *= sum(len(v) for v in self.slots[s].values())
            total += n
        return total

    def sample(self, rng: np.random.Generator) -> tuple[list[str], str]:
        slots, templates = self.patterns[rng.integers(len(self.patterns))]
        gloss, words = [], []
        for s in slots:
            if s in self.slots:
                options = sorted(self.slots[s])
                g = options[rng.integers(len(options))]
                phrases = self.slots[s][g]
                words.append(phrases[rng.integers(len(phrases))])
            else:
                g = s
                words.append(self.literals[s])
            gloss.append(g)
        tpl = templates[rng.integers(len(templates))]
        return gloss, tpl.format(*words)


# -- vocabulary -----------------------------------------------------------------
class Vocabulary:
    """Bijective token/id map; ids 0-2 are pad, bos, eos."""

    def __init__(self, tokens):
        content = [t for t in tokens if t not in RESERVED]
        self.itos: list[str] = list(RESERVED) + content
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: list[str]) -> list[int]:
        out = []
        for t in tokens:
            if t not in self.stoi:
                raise OOVError(f"out-of-vocabulary token {t!r}")
            out.append(self.stoi[t])
        return out

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"{path}: first three lines must be {RESERVED}")
        return cls(tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenization into ids; unknown words raise :class:`OOVError`."""
    return vocab.encode(text.split())


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize`; stops at eos and drops pad/bos."""
    words = []
    for i in ids:
        i = int(i)
        if i == vocab.eos_id:
            break
        if i in (vocab.pad_id, vocab.bos_id):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# -- frame rendering -------------------------------------------------------------
@dataclass
class SignRenderer:
    """Per-gloss prototypes and durations plus per-signer affine transforms."""

    prototypes: np.ndarray  # [n_gloss_vocab, D_raw]
    durations: np.ndarray  # [n_gloss_vocab], each in [3, 8]
    signer_scale: np.ndarray  # [n_signers, D_raw, D_raw]
    signer_shift: np.ndarray  # [n_signers, D_raw]
    noise_scale: float = 0.3
    smoothing: float = 0.7
    coarticulation: bool = True

    @classmethod
    def build(cls, n_gloss: int, n_signers: int, d_raw: int = 16, seed: int = 0, **kw):
        rng = np.random.default_rng([seed, 7919])
        protos = rng.normal(size=(n_gloss, d_raw))
        durations = rng.integers(3, 9, size=n_gloss)
        scale = np.eye(d_raw) + 0.15 * rng.normal(size=(n_signers, d_raw, d_raw)) / math.sqrt(d_raw)
        shift = 0.2 * rng.normal(size=(n_signers, d_raw))
        return cls(protos, durations, scale, shift, **kw)

    @property
    def d_raw(self) -> int:
        return self.prototypes.shape[1]

    def identity_signer(self) -> "SignRenderer":
        return SignRenderer(
            self.prototypes, self.durations,
            np.eye(self.d_raw)[None], np.zeros((1, self.d_raw)),
            self.noise_scale, self.smoothing, self.coarticulation,
        )

    def segment_bounds(self, gloss) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.durations[np.asarray(gloss)])])

    def render(self, gloss, signer_id: int, rng: np.random.Generator) -> np.ndarray:
        gloss = np.asarray(gloss, dtype=int)
        if gloss.size == 0:
            raise ValueError("cannot render an empty gloss sequence")
        base = np.repeat(self.prototypes[gloss], self.durations[gloss], axis=0)
        if self.coarticulation:
            starts = self.segment_bounds(gloss)[1:-1]
            base[starts] = 0.5 * (base[starts - 1] + base[starts])
        frames = base @ self.signer_scale[signer_id].T + self.signer_shift[signer_id]
        if self.noise_scale > 0:
            white = rng.normal(size=frames.shape)
            noise = np.empty_like(white)
            noise[0] = white[0]
            c = math.sqrt(1.0 - self.smoothing ** 2)
            for i in range(1, len(white)):
                noise[i] = self.smoothing * noise[i - 1] + c * white[i]
            frames = frames + self.noise_scale * noise
        return np.round(frames, 4)


def render_frames(gloss, signer_id: int, rng: np.random.Generator, renderer: SignRenderer) -> np.ndarray:
    """Render the frame matrix ``[sum(durations), D_raw]`` for a gloss id sequence."""
    return renderer.render(gloss, signer_id, rng)


# -- pseudo-gloss corruption ---------------------------------------------------
def make_pseudo_gloss(gloss, wer: float, rng: np.random.Generator, vocab: Vocabulary) -> list[int]:
    """Simulate a recognizer: substitutions, deletions and insertions at ``wer / 3`` each.

    A deletion is skipped when it would empty the output.
    """
    if not 0.0 <= wer < 1.0:
        raise ValueError(f"wer must be in [0, 1), got {wer}")
    gloss = [int(g) for g in gloss]
    if wer == 0.0:
        return list(gloss)
    content = np.arange(len(RESERVED), len(vocab))
    rate = wer / 3.0
    out: list[int] = []
    remaining = len(gloss)
    for g in gloss:
        remaining -= 1
        u = rng.random()
        if u < rate:
            choices = content[content != g]
            out.append(int(choices[rng.integers(len(choices))]))
        elif u < 2 * rate and (out or remaining > 0):
            continue
        elif u < 3 * rate:
            out.append(int(content[rng.integers(len(content))]))
            out.append(g)
        else:
            out.append(g)
    return out


def edit_distance(a, b) -> int:
    """Levenshtein distance between two sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


# -- corpus ---------------------------------------------------------------------
@dataclass
class SignSample:
    frames: np.ndarray
    gloss: list[int]
    sentence: list[int]
    signer_id: int


@dataclass
class DatasetSplit:
    train: list[SignSample]
    dev: list[SignSample]
    test: list[SignSample]
    sentence_vocab: Vocabulary
    gloss_vocab: Vocabulary
    seed: int
    version: str
    renderer: SignRenderer | None = None

    def splits(self) -> dict[str, list[SignSample]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def sentence_text(self, sample: SignSample) -> str:
        return detokenize(sample.sentence, self.sentence_vocab)


def build_vocabularies(grammar: Grammar) -> tuple[Vocabulary, Vocabulary]:
    return Vocabulary(grammar.sentence_words()), Vocabulary(grammar.gloss_tokens())


def generate_corpus(
    seed: int,
    n_train: int,
    n_dev: int,
    n_test: int,
    grammar: Grammar | None = None,
    n_signers: int = 5,
    d_raw: int = 16,
    noise_scale: float = 0.3,
    max_sentence_len: int = 16,
    min_gloss_count: int = 20,
) -> DatasetSplit:
    """Sample a deterministic corpus whose splits share no surface sentence."""
    grammar = grammar or Grammar()
    if n_train <= 0 or n_dev < 0 or n_test < 0:
        raise ValueError("n_train must be positive and n_dev, n_test non-negative")
    total = n_train + n_dev + n_test
    cap = grammar.capacity()
    if total > cap:
        raise CapacityError(f"requested {total} distinct sentences, grammar capacity is {cap}")
    sent_vocab, gloss_vocab = build_vocabularies(grammar)
    rng = np.random.default_rng([seed, 1])
    seen: dict[str, list[str]] = {}
    attempts, limit = 0, 50 * total + 1000
    while len(seen) < total:
        attempts += 1
        if attempts > limit:
            raise CapacityError(
                f"only {len(seen)} distinct sentences after {limit} draws; need {total}"
            )
        gloss, text = grammar.sample(rng)
        if len(text.split()) > max_sentence_len:
            continue
        seen.setdefault(text, gloss)
    items = list(seen.items())
    renderer = SignRenderer.build(len(gloss_vocab), n_signers, d_raw, seed, noise_scale=noise_scale)
    frame_rng = np.random.default_rng([seed, 2])
    samples = []
    for text, gloss in items:
        gids = gloss_vocab.encode(gloss)
        signer = int(frame_rng.integers(n_signers))
        frames = renderer.render(gids, signer, frame_rng)
        samples.append(SignSample(frames, gids, tokenize(text, sent_vocab), signer))
    train, dev, test = samples[:n_train], samples[n_train:n_train + n_dev], samples[n_train + n_dev:]
    counts = np.bincount([g for s in train for g in s.gloss], minlength=len(gloss_vocab))
    content = counts[len(RESERVED):]
    if content.min() < min_gloss_count:
        rare = gloss_vocab.itos[len(RESERVED) + int(content.argmin())]
        raise CapacityError(
            f"gloss {rare!r} occurs {int(content.min())} times in train; need {min_gloss_count}"
        )
    return DatasetSplit(train, dev, test, sent_vocab, gloss_vocab, seed, grammar.version, renderer)


# -- file formats ---------------------------------------------------------------
def save_samples(path, samples: list[SignSample], sent_vocab: Vocabulary, gloss_vocab: Vocabulary) -> None:
    """Write one JSON record per line: frames, gloss (strings), sentence, signer."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "frames": np.asarray(s.frames).tolist(),
                "gloss": gloss_vocab.decode(s.gloss),
                "sentence": detokenize(s.sentence, sent_vocab),
                "signer": int(s.signer_id),
            }
            fh.write(json.dumps(rec) + "\n")


def load_samples(path, sent_vocab: Vocabulary, gloss_vocab: Vocabulary) -> list[SignSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(
                SignSample(
                    np.asarray(rec["frames"], dtype=np.float64),
                    gloss_vocab.encode(rec["gloss"]),
                    tokenize(rec["sentence"], sent_vocab),
                    int(rec["signer"]),
                )
            )
    return samples


def save_corpus(split: DatasetSplit, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    split.sentence_vocab.save(d / "sentence_vocab.txt")
    split.gloss_vocab.save(d / "gloss_vocab.txt")
    for name, samples in split.splits().items():
        save_samples(d / f"{name}.jsonl", samples, split.sentence_vocab, split.gloss_vocab)
    (d / "meta.json").write_text(json.dumps({"seed": split.seed, "version": split.version}) + "\n")


def load_corpus(directory) -> DatasetSplit:
    d = Path(directory)
    sv = Vocabulary.load(d / "sentence_vocab.txt")
    gv = Vocabulary.load(d / "gloss_vocab.txt")
    meta = json.loads((d / "meta.json").read_text())
    parts = {n: load_samples(d / f"{n}.jsonl", sv, gv) for n in ("train", "dev", "test")}
    return DatasetSplit(parts["train"], parts["dev"], parts["test"], sv, gv, meta["seed"], meta["version"])
