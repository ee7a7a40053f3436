"""Word-level tokenizer over the closed grammar vocabulary."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import toysql

PAD, BOS, EOS, MASK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<mask>")
MAX_OUTPUT_LEN = 64
MAX_PROMPT_LEN = 192

# No space after these / before those when turning tokens back into text.
_GLUE_AFTER = {"("}
_GLUE_BEFORE = {")", ","}


class UnknownToken(KeyError):
    def __init__(self, surface: str):
        super().__init__(surface)
        self.surface = surface


def default_tokens() -> list[str]:
    toks = list(SPECIALS)
    toks += list(toysql.KEYWORDS) + list(toysql.PUNCT) + list(toysql.OPERATORS)
    toks += [str(v) for v in toysql.LITERAL_INTS]
    toks += list(toysql.IDENTIFIERS)
    toks += [toysql.INTEGER, toysql.TEXT, "|", "?"]
    toks += [w for w in toysql.QUESTION_WORDS if w not in toks]
    return toks


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("vocabulary entries must be unique")
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise ValueError("reserved ids 0-3 must be <pad>, <bos>, <eos>, <mask>")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.id_to_token)})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def encode(self, text: str, *, eos: bool = True) -> list[int]:
        """Token ids for ``text``; output sequences get a trailing EOS."""
        ids = [self.id(t) for t in toysql.lex(text)]
        return ids + [EOS] if eos else ids

    def encode_prompt(self, text: str) -> list[int]:
        return [BOS] + self.encode(text, eos=False)

    def tokens(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i == BOS or i == PAD:
                continue
            out.append(self.id_to_token[i] if 0 <= i < len(self) else f"<unk-{i}>")
        return out

    def decode(self, ids) -> str:
        """Inverse of :meth:`encode` on valid sequences; stops at the first EOS."""
        toks = self.tokens(ids)
        text = ""
        prev = None
        for t in toks:
            glue = prev is None or prev in _GLUE_AFTER or t in _GLUE_BEFORE
            glue = glue or (t == "(" and prev is not None and (prev in toysql.AGGREGATES or toysql._is_ident(prev)))
            text += t if glue else " " + t
            prev = t
        return text

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(list(self.id_to_token)))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(tuple(json.loads(Path(path).read_text())))


VOCAB = Vocabulary(tuple(default_tokens()))


def encode(text: str) -> list[int]:
    return VOCAB.encode(text)


def decode(ids) -> str:
    return VOCAB.decode(ids)
