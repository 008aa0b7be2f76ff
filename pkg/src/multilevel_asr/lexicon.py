"""Character and syllable vocabularies and the character-to-syllable lexicon.

File formats (UTF-8):

* lexicon: one entry per line, ``character<TAB>syl1 syl2 ...``; the first
  syllable is the default pronunciation.
* vocabulary: one token per line, id = line number (0-based).
"""

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import DataError

BLANK = "<blank>"
UNK = "<unk>"
SOS_EOS = "<sos/eos>"


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token/id map.  Specials always occupy the lowest ids."""

    tokens: tuple
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {}
        for i, tok in enumerate(self.tokens):
            if tok in mapping:
                raise DataError(f"duplicate token {tok!r} in vocabulary")
            mapping[tok] = i
        if UNK not in mapping or SOS_EOS not in mapping:
            raise DataError("vocabulary must contain <unk> and <sos/eos>")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def unk(self):
        return self.token_to_id[UNK]

    @property
    def sos_eos(self):
        return self.token_to_id[SOS_EOS]

    @property
    def blank(self):
        """Id of the CTC blank, or None for vocabularies without one."""
        return self.token_to_id.get(BLANK)

    @property
    def num_specials(self):
        return sum(tok in (BLANK, UNK, SOS_EOS) for tok in self.tokens)

    def encode(self, tokens):
        unk = self.unk
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(line for line in text.split("\n") if line))


class Lexicon(dict):
    """Maps a character token to its ordered list of syllable tokens."""

    def default(self, char):
        return self[char][0]

    def syllables(self):
        return sorted({s for prons in self.values() for s in prons})

    def save(self, path):
        lines = [f"{c}\t{' '.join(p)}\n" for c, p in self.items()]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def parse(cls, text):
        lex = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            char, sep, prons = line.partition("\t")
            prons = prons.split()
            if not sep or not char or not prons:
                raise DataError(f"lexicon line {lineno}: expected 'char<TAB>syllables', got {raw!r}")
            if char in lex:
                raise DataError(f"lexicon line {lineno}: duplicate character {char!r}")
            if len(set(prons)) != len(prons):
                raise DataError(f"lexicon line {lineno}: repeated pronunciation for {char!r}")
            lex[char] = prons
        return lex

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def bundled_lexicon():
    """The small Mandarin lexicon shipped with the package."""
    text = resources.files("multilevel_asr").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    return Lexicon.parse(text)


def build_vocabularies(transcripts, lexicon):
    """Build (character vocabulary, syllable vocabulary).

    ``transcripts`` is an iterable of character-token sequences.  Characters
    are the ones observed in the transcripts; syllables are every
    pronunciation listed in the lexicon.  Both are sorted after the specials.
    """
    observed = set()
    for chars in transcripts:
        observed.update(chars)
    observed.discard(UNK)
    missing = sorted(c for c in observed if c not in lexicon)
    if missing:
        raise DataError(f"characters without a lexicon entry: {missing[:10]}")
    for char, prons in lexicon.items():
        if any(p in (BLANK, UNK, SOS_EOS) for p in prons):
            raise DataError(f"lexicon entry for {char!r} uses a reserved token")
    char_vocab = Vocabulary((UNK, SOS_EOS) + tuple(sorted(observed)))
    syl_vocab = Vocabulary((BLANK, UNK, SOS_EOS) + tuple(lexicon.syllables()))
    return char_vocab, syl_vocab


def transcribe_to_syllables(characters, lexicon):
    """Default pronunciation per character; unknown characters map to <unk>."""
    return [lexicon[c][0] if c in lexicon else UNK for c in characters]
