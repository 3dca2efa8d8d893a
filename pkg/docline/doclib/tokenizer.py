import json
import logging
import typing as t
from pathlib import Path

from docline.errors import TokenizerError

CLS_ID = 0
PAD_ID = 1
MASK_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("[CLS]", "[PAD]", "[MASK]", "[UNK]")


class Tokenizer:
    """Whole-word vocabulary with a per-character fallback.

    A word found in the vocabulary becomes one token; any other word becomes one
    token per character, with `[UNK]` for characters the vocabulary lacks.
    """

    def __init__(self, tokens: t.Sequence[str]) -> None:
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise TokenizerError(f"vocabulary must start with {list(SPECIAL_TOKENS)}")
        if len(set(tokens)) != len(tokens):
            raise TokenizerError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {token: index for index, token in enumerate(self.tokens)}

    @classmethod
    def from_words(cls, words: t.Iterable[str]) -> "Tokenizer":
        words = [w for w in dict.fromkeys(words) if w and w not in SPECIAL_TOKENS]
        chars = sorted({c for w in words for c in w})
        singles = [c for c in chars if c not in words]
        return cls(list(SPECIAL_TOKENS) + singles + words)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode_word(self, text: str) -> list[int]:
        if text in self.ids and text not in SPECIAL_TOKENS:
            return [self.ids[text]]
        return [self.ids.get(c, UNK_ID) for c in text]

    def decode(self, ids: t.Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < self.vocab_size:
                raise TokenizerError(f"token id {i} outside vocabulary of {self.vocab_size}")
            out.append(self.tokens[int(i)])
        return out

    def save(self, path: t.Union[str, Path]) -> None:
        Path(path).write_text(json.dumps({"tokens": self.tokens}, ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: t.Union[str, Path]) -> "Tokenizer":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise TokenizerError(f"vocabulary file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise TokenizerError(f"vocabulary file {path} is not valid JSON: {e}") from e
        tokens = payload.get("tokens") if isinstance(payload, dict) else None
        if not isinstance(tokens, list):
            raise TokenizerError(f"vocabulary file {path} has no 'tokens' list")
        logging.debug(f"Loaded vocabulary of {len(tokens)} tokens from {path}")
        return cls(tokens)
