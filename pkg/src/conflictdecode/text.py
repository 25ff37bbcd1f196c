"""Word-level tokenizer, vocabulary and the zero-shot QA prompt template."""
from __future__ import annotations

import re
from dataclasses import dataclass

from .exceptions import InputError

PAD, BOS, END, UNK = "<pad>", "<bos>", "<end>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, END, UNK)

PROMPT_TEMPLATE = (
    "{context}\n Using only the references listed above, answer the following question: "
    "\n Question: {question}\n Answer"
)
_PROMPT_HEAD, _rest = PROMPT_TEMPLATE.split("{context}")
_PROMPT_MIDDLE, PROMPT_TAIL = _rest.split("{question}")
assert _PROMPT_HEAD == ""

_TOKEN_RE = re.compile(r"\n|<[a-z]+>|[A-Za-z0-9_']+|[^\sA-Za-z0-9_]")


def tokenize(text):
    """Split text into word, punctuation and newline tokens."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens):
    out = []
    for tok in tokens:
        if tok in SPECIAL_TOKENS:
            continue
        out.append(tok)
    return " ".join(out).replace(" \n ", "\n")


TEMPLATE_TOKENS = tuple(dict.fromkeys(tokenize(_PROMPT_MIDDLE) + tokenize(PROMPT_TAIL)))


class Vocabulary:
    """Bidirectional token/id map. Ids are assigned in insertion order."""

    def __init__(self, tokens):
        self.itos = list(dict.fromkeys(list(SPECIAL_TOKENS) + list(tokens)))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def bos_id(self):
        return self.stoi[BOS]

    @property
    def end_id(self):
        return self.stoi[END]

    def encode(self, text, strict=True):
        ids = []
        for tok in tokenize(text):
            if tok in self.stoi:
                ids.append(self.stoi[tok])
            elif strict:
                raise InputError(f"token {tok!r} is not in the vocabulary")
            else:
                ids.append(self.stoi[UNK])
        return ids

    def decode(self, ids, stop_at_end=True):
        toks = []
        for i in ids:
            tok = self.itos[int(i)] if 0 <= int(i) < len(self.itos) else UNK
            if stop_at_end and tok == END:
                break
            toks.append(tok)
        return detokenize(toks)

    def to_list(self):
        return list(self.itos)


@dataclass(frozen=True)
class SpanLayout:
    """Half-open token-index spans of one assembled sequence."""

    length: int
    context: tuple
    question: tuple
    output: tuple

    def __post_init__(self):
        spans = [self.context, self.question, self.output]
        for lo, hi in spans:
            if not (0 <= lo <= hi <= self.length):
                raise InputError(f"span {(lo, hi)} outside sequence of length {self.length}")
        if not (self.context[1] <= self.question[0] and self.question[1] <= self.output[0]):
            raise InputError("spans must be ordered context < question < output")

    def with_output(self, n_output):
        """Layout of the prompt followed by ``n_output`` generated tokens."""
        start = self.output[0]
        return SpanLayout(start + n_output, self.context, self.question, (start, start + n_output))

    def template_positions(self):
        taken = set(range(*self.context)) | set(range(*self.question)) | set(range(*self.output))
        return [i for i in range(self.length) if i not in taken]


@dataclass(frozen=True)
class PromptParts:
    """Token ids of one QA prompt, assembled with and without the context slot."""

    context: tuple
    question: tuple
    with_context: tuple
    without_context: tuple
    layout: SpanLayout
    layout_without: SpanLayout

    @property
    def prompt_length(self):
        return len(self.with_context)


def answer_start(vocab, ids):
    """Index just past the last prompt tail in ``ids``, or 1 if there is none.

    Used to restrict the training loss of QA sequences to their answers.
    """
    tail = vocab.encode(PROMPT_TAIL)
    n = len(tail)
    for i in range(len(ids) - n, 0, -1):
        if list(ids[i:i + n]) == tail:
            return min(i + n, len(ids) - 1)
    return 1


def build_prompt(vocab, question, context):
    """Assemble the with- and without-context prompts from text or token ids."""
    q_ids = tuple(vocab.encode(question) if isinstance(question, str) else question)
    c_ids = tuple(vocab.encode(context) if isinstance(context, str) else context)
    middle = vocab.encode(_PROMPT_MIDDLE)
    tail = vocab.encode(PROMPT_TAIL)

    def assemble(ctx):
        seq = (vocab.bos_id,) + ctx + tuple(middle)
        q_lo = len(seq)
        seq = seq + q_ids
        q_hi = len(seq)
        seq = seq + tuple(tail)
        layout = SpanLayout(len(seq), (1, 1 + len(ctx)), (q_lo, q_hi), (len(seq), len(seq)))
        return seq, layout

    with_ctx, layout = assemble(c_ids)
    without_ctx, layout_wo = assemble(())
    return PromptParts(c_ids, q_ids, with_ctx, without_ctx, layout, layout_wo)
