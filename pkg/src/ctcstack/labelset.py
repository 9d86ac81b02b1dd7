"""Character label inventory and transcript encoding.

Word boundaries are marked by capitalizing the first letter of each word
instead of a space symbol, adjacent identical letters inside a word collapse
into double-letter units, and the apostrophe is its own symbol. A reduced
four-symbol inventory (vowel / consonant / space / blank) supports the easy
phase of curriculum training.
"""

from dataclasses import dataclass, field

from .errors import DataFormatError, UsageError

LOWERCASE = "abcdefghijklmnopqrstuvwxyz"
APOSTROPHE = "'"
VOWELS = frozenset("aeiou")

BLANK_SYMBOL = "<b>"
REDUCED_VOWEL = "<v>"
REDUCED_CONSONANT = "<c>"
REDUCED_SPACE = "<sp>"

_FULL_SYMBOLS = (
    (BLANK_SYMBOL,)
    + tuple(LOWERCASE)
    + tuple("_" + c for c in LOWERCASE)
    + tuple(c + c for c in LOWERCASE)
    + (APOSTROPHE,)
)
_REDUCED_SYMBOLS = (BLANK_SYMBOL, REDUCED_VOWEL, REDUCED_CONSONANT, REDUCED_SPACE)


def validate_transcript(text: str) -> None:
    """Reject anything outside the frozen transcript grammar.

    Transcripts are non-empty lowercase words over {a-z, '} joined by single
    spaces; every word starts with a letter (the boundary mark has no
    apostrophe form, so apostrophe-initial words cannot round-trip).
    """
    if not text:
        raise DataFormatError("transcript is empty")
    bad = set(text) - set(LOWERCASE) - {" ", APOSTROPHE}
    if bad:
        raise DataFormatError(f"transcript contains invalid characters: {sorted(bad)!r}")
    if text != " ".join(w for w in text.split(" ") if w) or text.startswith(" "):
        raise DataFormatError("transcript has leading/trailing/double spaces")
    for word in text.split(" "):
        if word[0] not in LOWERCASE:
            raise DataFormatError(f"word {word!r} does not start with a letter")


class LabelInventory:
    """Immutable ordered symbol table; blank is always id 0."""

    def __init__(self, symbols, mode: str):
        self.symbols = tuple(symbols)
        self.mode = mode
        if len(set(self.symbols)) != len(self.symbols):
            raise UsageError("inventory symbols must be unique")
        if self.symbols[0] != BLANK_SYMBOL or BLANK_SYMBOL in self.symbols[1:]:
            raise UsageError("inventory must contain blank exactly once, at id 0")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    blank_id = 0

    @classmethod
    def full(cls) -> "LabelInventory":
        return cls(_FULL_SYMBOLS, "full")

    @classmethod
    def reduced(cls) -> "LabelInventory":
        return cls(_REDUCED_SYMBOLS, "reduced")

    @classmethod
    def from_symbols(cls, symbols) -> "LabelInventory":
        symbols = tuple(symbols)
        if symbols == _FULL_SYMBOLS:
            return cls.full()
        if symbols == _REDUCED_SYMBOLS:
            return cls.reduced()
        raise DataFormatError("unrecognized inventory symbol list")

    @property
    def k(self) -> int:
        """Non-blank symbol count."""
        return len(self.symbols) - 1

    @property
    def size(self) -> int:
        """Output dimension K+1 including blank."""
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UsageError(f"unknown symbol {symbol!r}") from None

    def symbol(self, label_id: int) -> str:
        if not 0 <= label_id < len(self.symbols):
            raise UsageError(f"label id {label_id} out of range")
        return self.symbols[label_id]

    def __eq__(self, other):
        return isinstance(other, LabelInventory) and self.symbols == other.symbols

    def __repr__(self):
        return f"LabelInventory(mode={self.mode!r}, size={self.size})"


@dataclass(frozen=True)
class LabelSequence:
    """An utterance's target: non-blank label ids over an inventory."""

    inventory: LabelInventory
    ids: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.ids:
            raise UsageError("label sequence must be non-empty")
        for i in self.ids:
            if not 1 <= i < self.inventory.size:
                raise UsageError(f"label id {i} invalid or blank")

    def __len__(self):
        return len(self.ids)


def encode_transcript(inventory: LabelInventory, text: str) -> LabelSequence:
    """Encode a normalized transcript over the full inventory.

    The first letter of every word (including the first) becomes its capital
    symbol; inside a word, adjacent identical letters pair greedily
    left-to-right into a double-letter unit; apostrophes map to themselves.
    """
    if inventory.mode != "full":
        raise UsageError("encode_transcript requires the full inventory")
    validate_transcript(text)
    ids = []
    for word in text.split(" "):
        ids.append(inventory.id_of("_" + word[0]))
        i = 1
        while i < len(word):
            ch = word[i]
            if ch in LOWERCASE and i + 1 < len(word) and word[i + 1] == ch:
                ids.append(inventory.id_of(ch + ch))
                i += 2
            else:
                ids.append(inventory.id_of(ch))
                i += 1
    return LabelSequence(inventory, tuple(ids))


def postprocess(inventory: LabelInventory, ids) -> str:
    """Map collapsed (blank-free) label ids back to text.

    Capitals become a space plus the lowercase letter, double units expand to
    two letters; the leading space is trimmed. Inverse of encode_transcript
    for every valid transcript.
    """
    if inventory.mode != "full":
        raise UsageError("postprocess requires the full inventory")
    pieces = []
    for label_id in ids:
        if label_id == inventory.blank_id:
            raise UsageError("postprocess input must not contain blank")
        sym = inventory.symbol(label_id)
        if sym.startswith("_"):
            pieces.append(" " + sym[1:])
        else:
            pieces.append(sym)
    text = "".join(pieces)
    return text[1:] if text.startswith(" ") else text


def encode_reduced(text: str) -> LabelSequence:
    """Encode a transcript over the four-symbol inventory, one id per character."""
    validate_transcript(text)
    inventory = LabelInventory.reduced()
    vowel = inventory.id_of(REDUCED_VOWEL)
    consonant = inventory.id_of(REDUCED_CONSONANT)
    space = inventory.id_of(REDUCED_SPACE)
    ids = tuple(
        space if ch == " " else (vowel if ch in VOWELS else consonant) for ch in text
    )
    return LabelSequence(inventory, ids)
