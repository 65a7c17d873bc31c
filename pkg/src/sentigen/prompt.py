"""Unified prompt construction and the shared vocabulary.

Every record is rendered as three token spans: Z (task, dataset and optional
speaker marker tokens), Y (the serialized answer set), and X (conversation
context followed by the query text). Modal feature segments ride alongside the
token spans with a modality tag each; they are attached to the encoder stream
after the text.

The tokenizer splits on whitespace, then into alphabetic runs, decimal
numbers, and single punctuation marks. Word-internal continuation pieces are
stored with a ``##`` prefix so detokenization can rejoin them without spaces.
Pieces missing from the vocabulary fall back to single characters, so any
printable-ASCII string round-trips; characters outside that inventory map to
the unknown token.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AnswerSet, Registry, SaevalRecord, TaskType, TASK_ORDER, render_scalar_label
from .errors import ConfigError, ContractError, DecodeError, VocabularyError

PAD, BOS, EOS, UNK, MASK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<mask>", "<sep>"
ANS_OPEN, ANS_CLOSE = "<ans>", "</ans>"
_CORE_SPECIALS = (PAD, BOS, EOS, UNK, MASK, SEP, ANS_OPEN, ANS_CLOSE)

LABEL_SEPARATOR = "|"

_PIECE_RE = re.compile(r"[A-Za-z]+|[0-9]+(?:\.[0-9]+)?|[^A-Za-z0-9\s]")
_SPEAKER_NUM_RE = re.compile(r"([0-9]+)\s*$")
_SIGNED_DECIMAL_RE = re.compile(r"[-+]?[0-9]+(?:\.[0-9]+)?")

_PRINTABLE = tuple(ch for ch in string.printable if not ch.isspace())


def task_token(task):
    return f"<task_{task.value}>"


def dataset_token(dataset_id):
    return f"<data:{dataset_id}>"


def speaker_token(k):
    return f"<speaker_{k}>"


def word_pieces(word):
    """Split one whitespace-delimited word into vocabulary pieces. The first
    piece keeps its surface; the rest carry the ## continuation prefix."""
    pieces = _PIECE_RE.findall(word)
    return [p if i == 0 else "##" + p for i, p in enumerate(pieces)]


def text_pieces(text):
    out = []
    for word in text.split():
        out.extend(word_pieces(word))
    return out


class Vocab:
    """Token <-> id table. Special tokens come first in a fixed order: core
    markers, task tokens, dataset tokens (registry order), speaker tokens.
    The id of a token is its line number in the saved vocabulary file."""

    def __init__(self, tokens, num_datasets, num_speakers):
        self.tokens = list(tokens)
        self.num_datasets = int(num_datasets)
        self.num_speakers = int(num_speakers)
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise VocabularyError(f"duplicate token {tok!r}")
            self._index[tok] = i
        self.n_special = len(_CORE_SPECIALS) + len(TASK_ORDER) + self.num_datasets + self.num_speakers
        expected = list(_CORE_SPECIALS) + [task_token(t) for t in TASK_ORDER]
        if self.tokens[:len(expected)] != expected:
            raise VocabularyError("vocabulary does not start with the fixed special-token block")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token):
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} is not in the vocabulary") from None

    def __contains__(self, token):
        return token in self._index

    def surface(self, token_id):
        if not (0 <= token_id < len(self.tokens)):
            raise VocabularyError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def is_special(self, token_id):
        return token_id < self.n_special

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    @property
    def unk_id(self):
        return 3

    @property
    def mask_id(self):
        return 4

    @property
    def sep_id(self):
        return 5

    @property
    def ans_open_id(self):
        return 6

    @property
    def ans_close_id(self):
        return 7

    def task_id(self, task):
        return self.id_of(task_token(task))

    def dataset_id_token(self, dataset_id):
        return self.id_of(dataset_token(dataset_id))

    def speaker_id_token(self, k):
        if not (0 <= k < self.num_speakers):
            raise VocabularyError(
                f"speaker index {k} outside the reserved range [0, {self.num_speakers})")
        return self.id_of(speaker_token(k))

    def save(self, path):
        """One token per line; the line number (from zero) is the id."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        num_datasets, num_speakers = _count_reserved(tokens)
        return cls(tokens, num_datasets, num_speakers)


def _count_reserved(tokens):
    """Recover the dataset/speaker token counts from the special block. Both
    kinds use bracketed surfaces the tokenizer can never emit for raw text."""
    i = len(_CORE_SPECIALS) + len(TASK_ORDER)
    start = i
    while i < len(tokens) and tokens[i].startswith("<data:") and tokens[i].endswith(">"):
        i += 1
    num_datasets = i - start
    k = 0
    while i < len(tokens) and tokens[i] == speaker_token(k):
        i += 1
        k += 1
    return num_datasets, k


def _scalar_literal_pieces():
    """Pieces for every one-decimal literal in [-3.0, 3.0] so scalar labels
    are always expressible."""
    out = []
    for tenth in range(-30, 31):
        for piece in text_pieces(render_scalar_label(tenth / 10.0)):
            out.append(piece)
    return out


def build_vocab(records, registry, num_speakers=16):
    """Assemble the vocabulary: fixed specials, the printable-ASCII character
    inventory (word-initial and continuation forms), forced label pieces, then
    corpus pieces ordered by frequency."""
    tokens = list(_CORE_SPECIALS)
    tokens += [task_token(t) for t in TASK_ORDER]
    tokens += [dataset_token(d) for d in registry.dataset_ids]
    tokens += [speaker_token(k) for k in range(num_speakers)]

    base = []
    for ch in _PRINTABLE:
        base.append(ch)
    for ch in _PRINTABLE:
        base.append("##" + ch)

    forced = []
    for name in ("positive", "negative", "neutral"):
        forced.extend(text_pieces(name))
    any_scalar = False
    for dataset_id in registry.dataset_ids:
        spec = registry.spec(dataset_id)
        if spec.answer.scalar:
            any_scalar = True
        else:
            for label in spec.answer.labels:
                forced.extend(text_pieces(label))
    if any_scalar:
        forced.extend(_scalar_literal_pieces())

    counts = {}
    for record in records:
        texts = [record.text]
        if record.context:
            texts.extend(t for _, t in record.context)
        for text in texts:
            for piece in text_pieces(text):
                counts[piece] = counts.get(piece, 0) + 1

    seen = set(tokens)
    for piece in base:
        if piece not in seen:
            tokens.append(piece)
            seen.add(piece)
    for piece in forced:
        if piece not in seen:
            tokens.append(piece)
            seen.add(piece)
    for piece in sorted(counts, key=lambda p: (-counts[p], p)):
        if piece not in seen:
            tokens.append(piece)
            seen.add(piece)
    return Vocab(tokens, num_datasets=len(registry), num_speakers=num_speakers)


def tokenize(text, vocab):
    """Text -> token ids. Unknown pieces fall back to characters; unknown
    characters map to the unknown token. Never produces special ids."""
    ids = []
    for piece in text_pieces(text):
        if piece in vocab:
            ids.append(vocab.id_of(piece))
            continue
        cont = piece.startswith("##")
        chars = piece[2:] if cont else piece
        for i, ch in enumerate(chars):
            form = ch if (i == 0 and not cont) else "##" + ch
            ids.append(vocab.id_of(form) if form in vocab else vocab.unk_id)
    return ids


def detokenize(ids, vocab):
    """Token ids -> text. Continuation pieces join without a space."""
    out = []
    for token_id in ids:
        tok = vocab.surface(token_id)
        if tok.startswith("##") and len(tok) > 2:
            if out:
                out[-1] += tok[2:]
            else:
                out.append(tok[2:])
        else:
            out.append(tok)
    return " ".join(out)


@dataclass(frozen=True)
class ModalSegment:
    kind: str  # "acoustic" | "visual"
    features: np.ndarray


@dataclass(frozen=True)
class PromptSequence:
    """Tokenized prompt with its span structure intact.

    ``x_context`` holds one token list per context utterance (leading speaker
    token included); ``x_tokens`` is the query text. ``flatten_prompt`` is the
    canonical linearization.
    """

    z_tokens: tuple
    y_tokens: tuple
    x_context: tuple
    x_tokens: tuple
    modal_segments: tuple
    dataset_index: int
    truncated: bool = False

    @property
    def token_length(self):
        n = len(self.z_tokens) + len(self.y_tokens) + len(self.x_tokens)
        for utt in self.x_context:
            n += len(utt)
        if self.x_context:
            n += 1  # separator before the query
        return n

    @property
    def frame_count(self):
        return sum(seg.features.shape[0] for seg in self.modal_segments)


def flatten_prompt(ps, vocab):
    """Z, then Y, then context utterances, a separator, and the query."""
    ids = list(ps.z_tokens) + list(ps.y_tokens)
    for utt in ps.x_context:
        ids.extend(utt)
    if ps.x_context:
        ids.append(vocab.sep_id)
    ids.extend(ps.x_tokens)
    return ids


def resegment_prompt(ids, vocab):
    """Invert ``flatten_prompt``: split a flat id list back into spans.

    Z runs to the answer-set opener, Y to its closer. If the remainder starts
    with a speaker token it parses as utterances up to the last separator,
    which precedes the query.
    """
    ids = list(ids)
    try:
        a = ids.index(vocab.ans_open_id)
        b = ids.index(vocab.ans_close_id)
    except ValueError:
        raise ContractError("prompt has no answer-set span") from None
    if not a < b:
        raise ContractError("answer-set markers out of order")
    z = tuple(ids[:a])
    y = tuple(ids[a:b + 1])
    rest = ids[b + 1:]
    speaker_lo = len(_CORE_SPECIALS) + len(TASK_ORDER) + vocab.num_datasets
    speaker_hi = speaker_lo + vocab.num_speakers

    def is_speaker(tid):
        return speaker_lo <= tid < speaker_hi

    context = []
    query = tuple(rest)
    if rest and is_speaker(rest[0]):
        # conversation layout: utterances, then <sep>, then the query
        try:
            cut = len(rest) - 1 - rest[::-1].index(vocab.sep_id)
        except ValueError:
            raise ContractError("conversation prompt lost its query separator") from None
        head, query = rest[:cut], tuple(rest[cut + 1:])
        current = None
        for tid in head:
            if is_speaker(tid):
                if current is not None:
                    context.append(tuple(current))
                current = [tid]
            else:
                current.append(tid)
        if current is not None:
            context.append(tuple(current))
    return {"z": z, "y": y, "context": tuple(context), "x": query}


def speaker_index(speaker_id):
    """Speaker strings carry their index as trailing digits ("spk3" -> 3)."""
    m = _SPEAKER_NUM_RE.search(speaker_id or "")
    if not m:
        raise VocabularyError(
            f"speaker id {speaker_id!r} has no trailing index; expected something like 'spk0'")
    return int(m.group(1))


def answer_set_tokens(answer, vocab):
    """Serialize an answer set as "<ans> label | label | ... </ans>" ids."""
    if answer.scalar:
        labels = [render_scalar_label(float(v)) for v in range(-3, 4)]
    else:
        labels = list(answer.labels)
    ids = [vocab.ans_open_id]
    for i, label in enumerate(labels):
        if i:
            ids.extend(tokenize(LABEL_SEPARATOR, vocab))
        ids.extend(tokenize(label, vocab))
    ids.append(vocab.ans_close_id)
    return ids


def build_prompt(record, vocab, registry, max_len):
    """Render a validated record into a PromptSequence.

    The token budget is ``max_len`` minus the modal frame count; when the
    spans overflow it, the oldest context utterances are dropped first, then
    the query tail, and the result is flagged as truncated.
    """
    spec = registry.spec(record.dataset_id)
    if spec.task_type is not record.task_type:
        raise ConfigError(
            f"record task {record.task_type.value!r} conflicts with registry entry "
            f"{record.dataset_id!r} ({spec.task_type.value!r})")

    z = [vocab.task_id(record.task_type), vocab.dataset_id_token(record.dataset_id)]
    if record.task_type is TaskType.ERC:
        z.append(vocab.speaker_id_token(speaker_index(record.speaker_id)))

    y = answer_set_tokens(spec.answer, vocab)

    context = []
    if record.task_type is TaskType.ERC and record.context:
        for spk, text in record.context:
            utt = [vocab.speaker_id_token(speaker_index(spk))]
            utt.extend(tokenize(text, vocab))
            context.append(utt)

    if record.text_parts is not None:
        x = []
        for i, part in enumerate(record.text_parts):
            if i:
                x.append(vocab.sep_id)
            x.extend(tokenize(part, vocab))
    else:
        x = tokenize(record.text, vocab)

    segments = []
    if record.audio is not None:
        segments.append(ModalSegment(kind="acoustic", features=np.asarray(record.audio, dtype=np.float32)))
    if record.image is not None:
        segments.append(ModalSegment(kind="visual", features=np.asarray(record.image, dtype=np.float32)))

    frames = sum(seg.features.shape[0] for seg in segments)
    budget = max_len - frames
    fixed = len(z) + len(y)
    if budget <= fixed:
        raise ContractError(
            f"prompt cannot fit: {fixed} marker tokens plus {frames} modal frames exceed max length {max_len}")

    truncated = False

    def total():
        n = fixed + len(x) + sum(len(u) for u in context)
        if context:
            n += 1
        return n

    while total() > budget and context:
        context.pop(0)  # oldest first
        truncated = True
    if total() > budget:
        room = budget - fixed
        x = x[:room]
        truncated = True
    if not x:
        raise ContractError("prompt query is empty after truncation")

    return PromptSequence(
        z_tokens=tuple(z),
        y_tokens=tuple(y),
        x_context=tuple(tuple(u) for u in context),
        x_tokens=tuple(x),
        modal_segments=tuple(segments),
        dataset_index=registry.index(record.dataset_id),
        truncated=truncated,
    )


def edit_distance(a, b):
    """Classic Levenshtein distance; plenty at label-string scale."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class DecodedLabel:
    value: object
    fallback: bool = False


def parse_scalar(text, lo=-3.0, hi=3.0):
    compact = re.sub(r"\s+", "", text)
    m = _SIGNED_DECIMAL_RE.search(compact)
    if not m:
        return None
    return min(max(float(m.group(0)), lo), hi)


def decode_label(generated_ids, answer, vocab):
    """Map generated token ids onto the answer set.

    Categorical answers match exactly, else by minimum edit distance (ties go
    to the earlier label). Scalar answers parse the first signed decimal and
    clamp it into range; unparseable output falls back to 0.0 with the
    fallback flag set. Empty generations are a decode error.
    """
    ids = [t for t in generated_ids if t not in (vocab.pad_id, vocab.bos_id, vocab.eos_id)]
    if not ids:
        raise DecodeError("nothing to decode: generation is empty")
    text = detokenize(ids, vocab)
    if answer.scalar:
        value = parse_scalar(text, answer.lo, answer.hi)
        if value is None:
            return DecodedLabel(value=0.0, fallback=True)
        return DecodedLabel(value=value, fallback=False)
    if text in answer.labels:
        return DecodedLabel(value=text, fallback=False)
    best = min(answer.labels, key=lambda lab: (edit_distance(text, lab), answer.labels.index(lab)))
    return DecodedLabel(value=best, fallback=True)
