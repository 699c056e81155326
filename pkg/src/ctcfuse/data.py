"""Vocabulary, synthetic corpus generation, manifest ingestion, and CER.

On-disk formats:
  * manifest: JSON lines, one object per utterance with keys
    ``{"id", "features", "transcript"}``; ``features`` is a CSV path relative
    to the manifest, ``transcript`` is space-separated symbols.
  * feature CSV: one frame per line, F comma-separated decimal reals, no
    header.
  * vocab file: one symbol per line, line number == token id.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError
from .numerics import seeded_rng

BLANK_ID = 0
UNK_ID = 1
SOS_EOS_ID = 2
FIRST_CONTENT_ID = 3

BLANK_SYMBOL = "<blank>"
UNK_SYMBOL = "<unk>"
SOS_EOS_SYMBOL = "<sos/eos>"

LabelSequence = tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    """Token inventory with the fixed special layout blank=0, unk=1, sos/eos=2."""

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.symbols) < FIRST_CONTENT_ID + 1:
            raise ConfigError(
                f"vocab needs at least {FIRST_CONTENT_ID + 1} entries "
                f"(3 specials + 1 content), got {len(self.symbols)}"
            )
        expected = (BLANK_SYMBOL, UNK_SYMBOL, SOS_EOS_SYMBOL)
        if self.symbols[:3] != expected:
            raise ConfigError(f"vocab must start with {expected}, got {self.symbols[:3]}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError("vocab symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def sos_eos_id(self) -> int:
        return SOS_EOS_ID

    @property
    def content_ids(self) -> range:
        return range(FIRST_CONTENT_ID, self.size)

    @classmethod
    def default(cls, size: int) -> "Vocab":
        """Specials plus single-letter content symbols (t<i> past 'z')."""
        if size < FIRST_CONTENT_ID + 1:
            raise ConfigError(f"vocab_size must be >= {FIRST_CONTENT_ID + 1}, got {size}")
        letters = string.ascii_lowercase
        content = [
            letters[i] if i < len(letters) else f"t{i + FIRST_CONTENT_ID}"
            for i in range(size - FIRST_CONTENT_ID)
        ]
        return cls(symbols=(BLANK_SYMBOL, UNK_SYMBOL, SOS_EOS_SYMBOL, *content))

    def encode(self, symbols: list[str], allow_unk: bool = True) -> LabelSequence:
        """Map symbols to token ids; unknown symbols map to unk_id unless disabled."""
        index = {s: i for i, s in enumerate(self.symbols)}
        out = []
        for sym in symbols:
            tok = index.get(sym)
            if tok is None:
                if not allow_unk:
                    raise ManifestError(f"out-of-vocab symbol {sym!r} with unk disabled")
                tok = UNK_ID
            out.append(tok)
        return tuple(out)

    def decode(self, tokens: LabelSequence) -> list[str]:
        return [self.symbols[t] for t in tokens]

    def save(self, path: Path | str) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls(symbols=tuple(lines))


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, F)
    transcript: LabelSequence
    frame_shift_ms: float = 10.0

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_shift_ms / 1000.0


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Stand-in corpus recipe: each token emits a run of noisy prototype frames."""

    vocab_size: int = 12
    feature_dim: int = 8
    frames_per_token: tuple[int, int] = (2, 4)
    noise_std: float = 0.1
    utterance_len: tuple[int, int] = (3, 8)
    seed: int = 12345

    def __post_init__(self) -> None:
        if self.vocab_size < FIRST_CONTENT_ID + 1:
            raise ConfigError(
                f"vocab_size too small for the special tokens: {self.vocab_size}"
            )
        if self.frames_per_token[0] < 1:
            raise ConfigError("frames_per_token minimum must be >= 1")
        if self.frames_per_token[0] > self.frames_per_token[1]:
            raise ConfigError(f"bad frames_per_token range {self.frames_per_token}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 1 <= self.utterance_len[0] <= self.utterance_len[1]:
            raise ConfigError(f"bad utterance_len range {self.utterance_len}")

    def vocab(self) -> Vocab:
        return Vocab.default(self.vocab_size)


def prototype_matrix(spec: SyntheticTaskSpec) -> np.ndarray:
    """Per-token prototype vectors (V x F), drawn once from the task seed."""
    rng = seeded_rng(spec.seed)
    return rng.normal(size=(spec.vocab_size, spec.feature_dim))


def generate_corpus(
    spec: SyntheticTaskSpec, n: int, split_seed: int | None = None
) -> list[Utterance]:
    """Sample ``n`` utterances; deterministic given (spec, n, split_seed).

    Each transcript token emits k frames (k uniform in the frames-per-token
    range) of its prototype plus Gaussian noise. ``split_seed`` lets several
    splits share one prototype set while drawing disjoint utterances.
    """
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    protos = prototype_matrix(spec)
    rng = seeded_rng(spec.seed if split_seed is None else split_seed)
    lo_len, hi_len = spec.utterance_len
    lo_k, hi_k = spec.frames_per_token
    content = np.arange(FIRST_CONTENT_ID, spec.vocab_size)
    utts = []
    for i in range(n):
        length = int(rng.integers(lo_len, hi_len + 1))
        tokens = tuple(int(t) for t in rng.choice(content, size=length))
        frames = []
        for tok in tokens:
            k = int(rng.integers(lo_k, hi_k + 1))
            noise = rng.normal(size=(k, spec.feature_dim))
            frames.append(protos[tok] + spec.noise_std * noise)
        utts.append(
            Utterance(id=f"u{i:05d}", features=np.concatenate(frames), transcript=tokens)
        )
    return utts


# ---------------------------------------------------------------------------
# On-disk round trip
# ---------------------------------------------------------------------------


def write_features_csv(path: Path, features: np.ndarray) -> None:
    with open(path, "w") as f:
        for row in features:
            f.write(",".join(repr(float(v)) for v in row))
            f.write("\n")


def read_features_csv(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            parts = line.strip().split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ManifestError(f"{path}:{ln}: ragged CSV row ({len(parts)} != {width})")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise ManifestError(f"{path}:{ln}: bad value ({e})") from e
    if not rows:
        raise ManifestError(f"{path}: empty feature file")
    return np.asarray(rows, dtype=np.float64)


def save_corpus(utterances: list[Utterance], vocab: Vocab, out_dir: Path | str) -> Path:
    """Materialize a corpus as manifest + per-utterance CSVs; returns manifest path."""
    out_dir = Path(out_dir)
    feats_dir = out_dir / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for utt in utterances:
            rel = f"feats/{utt.id}.csv"
            write_features_csv(out_dir / rel, utt.features)
            row = {
                "id": utt.id,
                "features": rel,
                "transcript": " ".join(vocab.decode(utt.transcript)),
            }
            f.write(json.dumps(row) + "\n")
    return manifest


def load_manifest(
    manifest_path: Path | str, vocab: Vocab, allow_unk: bool = True
) -> list[Utterance]:
    """Load utterances in manifest order; transcripts mapped through ``vocab``."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    utts = []
    feature_dim = None
    with open(manifest_path) as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                utt_id, rel, transcript = row["id"], row["features"], row["transcript"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ManifestError(f"{manifest_path}:{ln}: bad manifest row ({e})") from e
            csv_path = base / rel
            if not csv_path.exists():
                raise ManifestError(
                    f"{manifest_path}:{ln}: feature file missing for {utt_id!r}: {csv_path}"
                )
            feats = read_features_csv(csv_path)
            if feature_dim is None:
                feature_dim = feats.shape[1]
            elif feats.shape[1] != feature_dim:
                raise ManifestError(
                    f"{manifest_path}:{ln}: feature dim {feats.shape[1]} != {feature_dim}"
                )
            tokens = vocab.encode(transcript.split(), allow_unk=allow_unk)
            utts.append(Utterance(id=utt_id, features=feats, transcript=tokens))
    return utts


# ---------------------------------------------------------------------------
# Error rate
# ---------------------------------------------------------------------------


def edit_distance(ref: LabelSequence, hyp: LabelSequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def cer(ref: LabelSequence, hyp: LabelSequence) -> float:
    """Edit distance over reference length, on token sequences."""
    if len(ref) == 0:
        raise ValueError("cer needs a nonempty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(pairs: list[tuple[LabelSequence, LabelSequence]]) -> float:
    """Summed edit distances over summed reference lengths (not mean of CERs)."""
    total_ref = sum(len(ref) for ref, _ in pairs)
    if total_ref == 0:
        raise ValueError("corpus_cer needs nonempty references")
    total_edits = sum(edit_distance(ref, hyp) for ref, hyp in pairs)
    return total_edits / total_ref
