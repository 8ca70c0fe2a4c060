"""Binary equation task: symbols, grammar, hidden operation tables, datasets.

Equations are strings over the alphabet ``0 1 + =`` of the form ``X+Y=Z``
where each digit group is a most-significant-first bitstring.  The hidden
operation is a full-adder style truth table applied digit by digit from
the rightmost position.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GLYPH_SIZE = 28
GLYPH_BYTES = GLYPH_SIZE * GLYPH_SIZE
MIN_LENGTH = 5
MAX_LENGTH = 26
N_CODES = 1 << 16


class Symbol(enum.IntEnum):
    ZERO = 0
    ONE = 1
    PLUS = 2
    EQUALS = 3

    @property
    def char(self) -> str:
        return ALPHABET[self]

    @classmethod
    def from_char(cls, ch: str) -> "Symbol":
        try:
            return cls(ALPHABET.index(ch))
        except ValueError:
            raise ValueError(f"not an alphabet symbol: {ch!r}") from None


ALPHABET = "01+="
N_SYMBOLS = len(ALPHABET)


def to_string(symbols: str | Iterable[int]) -> str:
    """Normalise a symbol sequence (string or indices) to its string form."""
    if isinstance(symbols, str):
        return symbols
    out = []
    for s in symbols:
        i = int(s)
        if not 0 <= i < N_SYMBOLS:
            raise ValueError(f"symbol index out of range: {i}")
        out.append(ALPHABET[i])
    return "".join(out)


def to_indices(symbols: str | Iterable[int]) -> list[int]:
    return [Symbol.from_char(c).value for c in to_string(symbols)]


# --------------------------------------------------------------------------
# Operation tables
# --------------------------------------------------------------------------


def _entry_index(a: int, b: int, c_in: int) -> int:
    return (a << 2) | (b << 1) | c_in


@dataclass(frozen=True)
class OperationTable:
    """Total map (a, b, c_in) -> (s, c_out) over bits.

    ``entries[i]`` holds the output for input index ``i = 4a + 2b + c_in``.
    The 16-bit code stores ``s`` at bit ``2i`` and ``c_out`` at bit ``2i+1``.
    """

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.entries) != 8:
            raise ValueError("an operation table needs exactly 8 entries")
        for s, c in self.entries:
            if s not in (0, 1) or c not in (0, 1):
                raise ValueError("table outputs must be bits")

    @classmethod
    def from_code(cls, code: int) -> "OperationTable":
        if not 0 <= code < N_CODES:
            raise ValueError(f"table code out of range: {code}")
        return cls(tuple(((code >> (2 * i)) & 1, (code >> (2 * i + 1)) & 1) for i in range(8)))

    @classmethod
    def from_mapping(cls, mapping: dict[tuple[int, int, int], tuple[int, int]]) -> "OperationTable":
        keys = {(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
        if set(mapping) != keys:
            raise ValueError("mapping must cover all 8 input triples exactly once")
        entries = [None] * 8
        for (a, b, c), out in mapping.items():
            entries[_entry_index(a, b, c)] = (int(out[0]), int(out[1]))
        return cls(tuple(entries))

    @property
    def code(self) -> int:
        code = 0
        for i, (s, c) in enumerate(self.entries):
            code |= (s << (2 * i)) | (c << (2 * i + 1))
        return code

    def __call__(self, a: int, b: int, c_in: int) -> tuple[int, int]:
        return self.entries[_entry_index(a, b, c_in)]

    def as_mapping(self) -> dict[tuple[int, int, int], tuple[int, int]]:
        return {(a, b, c): self(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}


def make_standard_table() -> OperationTable:
    """Binary addition: sum = a^b^c, carry = majority(a, b, c)."""
    return OperationTable.from_mapping(
        {(a, b, c): (a ^ b ^ c, int(a + b + c >= 2)) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
    )


def make_xor_table() -> OperationTable:
    """Carry-free addition (bitwise xor; carries are never produced)."""
    return OperationTable.from_mapping(
        {(a, b, c): (a ^ b ^ c, 0) for a in (0, 1) for b in (0, 1) for c in (0, 1)}
    )


STANDARD_CODE = make_standard_table().code
XOR_CODE = make_xor_table().code


# --------------------------------------------------------------------------
# Grammar and evaluation
# --------------------------------------------------------------------------


class ParseError(ValueError):
    """Base class of grammar violations; ``kind`` names the violation."""

    kind = "parse"


class ForeignSymbolError(ParseError):
    kind = "foreign-symbol"


class OperatorCountError(ParseError):
    kind = "operator-count"


class OperatorOrderError(ParseError):
    kind = "operator-order"


class EmptySegmentError(ParseError):
    kind = "empty-segment"


class LeadingZeroError(ParseError):
    kind = "leading-zero"


@dataclass(frozen=True)
class ParsedEquation:
    x: str
    y: str
    z: str

    def __str__(self) -> str:
        return f"{self.x}+{self.y}={self.z}"


def _check_bits(s: str, name: str) -> None:
    if not s:
        raise EmptySegmentError(f"empty {name} segment")
    if s[0] == "0" and len(s) > 1:
        raise LeadingZeroError(f"leading zero in {name}: {s!r}")


def parse_expression(symbols: str | Iterable[int]) -> ParsedEquation:
    """Parse ``X+Y=Z``; raises a ``ParseError`` subclass naming the violation."""
    try:
        text = to_string(symbols)
    except ValueError as exc:
        raise ForeignSymbolError(str(exc)) from None
    bad = sorted({c for c in text if c not in ALPHABET})
    if bad:
        raise ForeignSymbolError(f"foreign symbols: {bad}")
    n_plus, n_eq = text.count("+"), text.count("=")
    if n_plus != 1 or n_eq != 1:
        raise OperatorCountError(f"expected one '+' and one '=', found {n_plus} and {n_eq}")
    p, e = text.index("+"), text.index("=")
    if p > e:
        raise OperatorOrderError("'+' must precede '='")
    x, y, z = text[:p], text[p + 1 : e], text[e + 1 :]
    _check_bits(x, "left")
    _check_bits(y, "middle")
    _check_bits(z, "right")
    return ParsedEquation(x, y, z)


def is_bitstring(s: str) -> bool:
    return bool(s) and all(c in "01" for c in s)


def _validate_operand(s: str, name: str) -> None:
    if not isinstance(s, str) or not is_bitstring(s):
        raise ValueError(f"{name} must be a nonempty bitstring, got {s!r}")
    if s[0] == "0" and len(s) > 1:
        raise ValueError(f"{name} has an illegal leading zero: {s!r}")


def eval_equation(x: str, y: str, table: OperationTable) -> str:
    """Apply ``table`` digit by digit from the right, carry starting at 0."""
    _validate_operand(x, "x")
    _validate_operand(y, "y")
    n = max(len(x), len(y))
    xs, ys = x.rjust(n, "0"), y.rjust(n, "0")
    carry = 0
    out = []
    for i in range(n - 1, -1, -1):
        s, carry = table(int(xs[i]), int(ys[i]), carry)
        out.append("1" if s else "0")
    if carry:
        out.append("1")
    return "".join(reversed(out)).lstrip("0") or "0"


def consistent_codes(x: str, y: str, z: str, codes: np.ndarray) -> np.ndarray:
    """Boolean mask over ``codes``: does ``eval_equation(x, y, table) == z``?

    Vectorised over table codes; ``x``, ``y``, ``z`` are legal bitstrings.
    """
    codes = np.asarray(codes, dtype=np.uint32)
    n = max(len(x), len(y))
    if len(z) > n + 1:
        return np.zeros(codes.shape, dtype=bool)
    xs, ys = x.rjust(n, "0"), y.rjust(n, "0")
    zs = z.rjust(n + 1, "0")
    ok = np.ones(codes.shape, dtype=bool)
    carry = np.zeros(codes.shape, dtype=np.uint32)
    for k in range(n):
        i = n - 1 - k
        base = (int(xs[i]) << 2) | (int(ys[i]) << 1)
        shift = 2 * (base + carry)
        s = (codes >> shift) & 1
        carry = (codes >> (shift + 1)) & 1
        ok &= s == int(zs[i + 1])
    ok &= carry == int(zs[0])
    return ok


ALL_CODES = np.arange(N_CODES, dtype=np.uint32)


# --------------------------------------------------------------------------
# Glyphs
# --------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE].astype(np.float64)

# strokes in a unit box centred at the origin, y pointing down
_STROKES = {
    Symbol.ONE: [((0.0, -0.75), (0.0, 0.75)), ((-0.3, -0.45), (0.0, -0.75))],
    Symbol.PLUS: [((-0.65, 0.0), (0.65, 0.0)), ((0.0, -0.65), (0.0, 0.65))],
    Symbol.EQUALS: [((-0.65, -0.3), (0.65, -0.3)), ((-0.65, 0.3), (0.65, 0.3))],
}


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_glyph(symbol: Symbol | int, rng_seed: int, noise: float = 0.0) -> np.ndarray:
    """Procedural 28x28 glyph with seeded jitter; values clamped to [0, 1].

    Jitter covers position, scale, rotation, shear and stroke thickness;
    ``noise`` is the standard deviation of additive Gaussian pixel noise.
    """
    symbol = Symbol(int(symbol))
    rng = np.random.default_rng([int(rng_seed), int(symbol)])
    scale = 8.5 * rng.uniform(0.8, 1.15)
    angle = rng.uniform(-0.25, 0.25)
    shear = rng.uniform(-0.2, 0.2)
    cx = 13.5 + rng.uniform(-2.0, 2.0)
    cy = 13.5 + rng.uniform(-2.0, 2.0)
    thickness = rng.uniform(1.0, 2.2)

    # map pixel coordinates back into the unit box
    u = (_XX - cx) / scale
    v = (_YY - cy) / scale
    ca, sa = math.cos(angle), math.sin(angle)
    px = ca * u + sa * v
    py = -sa * u + ca * v
    px = px - shear * py
    if symbol == Symbol.ZERO:
        rx, ry = rng.uniform(0.4, 0.55), rng.uniform(0.65, 0.8)
        r = np.hypot(px / rx, py / ry)
        dist = np.abs(r - 1.0) * min(rx, ry)
    else:
        dist = np.min([_segment_distance(px, py, a, b) for a, b in _STROKES[symbol]], axis=0)
    half_width = thickness / (2.0 * scale)
    img = np.clip((half_width - dist) * scale + 0.5, 0.0, 1.0)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] -> uint8 bytes (value = round(255 * v))."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def ingest_glyphs(manifest_path: str | Path) -> dict[Symbol, np.ndarray]:
    """Load a JSONL glyph manifest into a pool ``{Symbol: (n, 28, 28) float}``.

    Records are ``{"class": "0"|"1"|"+"|"=", "path": ..., "format":
    "pgm"|"raw784"}``; relative paths resolve against the manifest folder.
    """
    from PIL import Image, UnidentifiedImageError

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pool: dict[Symbol, list[np.ndarray]] = {s: [] for s in Symbol}
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cls, rel, fmt = rec["class"], rec["path"], rec["format"]
                symbol = Symbol.from_char(cls)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{manifest_path}:{lineno}: malformed record ({exc})") from None
            path = root / rel
            if fmt == "raw784":
                try:
                    raw = path.read_bytes()
                except OSError as exc:
                    raise OSError(f"{manifest_path}:{lineno}: unreadable blob {path} ({exc})") from None
                if len(raw) != GLYPH_BYTES:
                    raise ValueError(f"{manifest_path}:{lineno}: raw784 blob has {len(raw)} bytes")
                img = np.frombuffer(raw, dtype=np.uint8).reshape(GLYPH_SIZE, GLYPH_SIZE) / 255.0
            elif fmt == "pgm":
                try:
                    with Image.open(path) as im:
                        im.load()
                        maxval = 65535.0 if im.mode in ("I", "I;16", "I;16B") else 255.0
                        if im.size != (GLYPH_SIZE, GLYPH_SIZE):
                            im = im.convert("F").resize((GLYPH_SIZE, GLYPH_SIZE), Image.BILINEAR)
                        img = np.asarray(im, dtype=np.float64) / maxval
                except (OSError, UnidentifiedImageError) as exc:
                    raise OSError(f"{manifest_path}:{lineno}: unreadable blob {path} ({exc})") from None
            else:
                raise ValueError(f"{manifest_path}:{lineno}: unknown format {fmt!r}")
            pool[symbol].append(np.clip(img, 0.0, 1.0))
    missing = [s.char for s in Symbol if not pool[s]]
    if missing:
        raise ValueError(f"glyph manifest is missing classes: {missing}")
    return {s: np.stack(imgs) for s, imgs in pool.items()}


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class EquationSample:
    """Glyph images of one equation, stored as uint8 (value = byte / 255)."""

    glyphs: np.ndarray
    truth: str | None = None
    veracity: bool | None = None

    def __post_init__(self):
        if self.glyphs.dtype != np.uint8 or self.glyphs.shape[1:] != (GLYPH_SIZE, GLYPH_SIZE):
            raise ValueError("glyphs must be a uint8 array of shape (n, 28, 28)")
        if self.truth is not None and len(self.truth) != len(self.glyphs):
            raise ValueError("truth length does not match glyph count")

    @property
    def length(self) -> int:
        return len(self.glyphs)

    def images(self) -> np.ndarray:
        """Glyphs as float images in [0, 1], shape (n, 28, 28)."""
        return self.glyphs / 255.0


@dataclass(frozen=True)
class GenConfig:
    min_length: int = 5
    max_length: int = 10
    per_length: int = 500
    positive_fraction: float = 0.5
    labeled_fraction: float = 0.2
    hidden_code: int = STANDARD_CODE
    glyph_noise: float = 0.1

    def __post_init__(self):
        if self.min_length < MIN_LENGTH:
            raise ValueError(f"equations need at least {MIN_LENGTH} symbols")
        if self.max_length < self.min_length:
            raise ValueError("empty length range")
        if self.per_length < 1:
            raise ValueError("per_length must be positive")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if not 0 <= self.hidden_code < N_CODES:
            raise ValueError("hidden_code must be a 16-bit table code")
        if self.glyph_noise < 0:
            raise ValueError("glyph_noise must be non-negative")

    @property
    def lengths(self) -> range:
        return range(self.min_length, self.max_length + 1)

    @property
    def hidden_table(self) -> OperationTable:
        return OperationTable.from_code(self.hidden_code)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Dataset:
    """Labeled and unlabeled equations.

    ``hidden_table`` and ``unlabeled_truth`` are generator-private: they are
    never written next to the learner-facing files.
    """

    labeled: list[EquationSample]
    unlabeled: list[EquationSample]
    hidden_table: OperationTable | None = None
    seed: int | None = None
    unlabeled_truth: list[tuple[str, bool]] | None = field(default=None, repr=False)

    @property
    def samples(self) -> list[EquationSample]:
        return self.labeled + self.unlabeled


class InfeasibleLengthError(ValueError):
    pass


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _random_bits(rng: np.random.Generator, n: int) -> str:
    if n == 1:
        return "01"[rng.integers(2)]
    return "1" + "".join("01"[b] for b in rng.integers(0, 2, n - 1))


def _sample_positive(rng, length: int, table: OperationTable, attempts: int = 20000) -> tuple[str, str, str]:
    budget = length - 2  # digits across x, y, z
    for _ in range(attempts):
        lx = int(rng.integers(1, budget - 1))
        ly = int(rng.integers(1, budget - lx))
        x, y = _random_bits(rng, lx), _random_bits(rng, ly)
        z = eval_equation(x, y, table)
        if lx + ly + len(z) == budget:
            return x, y, z
    raise InfeasibleLengthError(f"no equation of length {length} found under table {table.code:#06x}")


def _corrupt(rng, x: str, y: str, z: str, table: OperationTable) -> str:
    truth = eval_equation(x, y, table)
    for _ in range(1000):
        if len(z) == 1:
            cand = "1" if z == "0" else "0"
        elif rng.random() < 0.5:
            free = len(z) - 1  # the leading 1 is kept to stay legal
            k = min(free, int(rng.integers(1, 3)))
            pos = 1 + rng.choice(free, size=k, replace=False)
            chars = list(z)
            for p in pos:
                chars[p] = "1" if chars[p] == "0" else "0"
            cand = "".join(chars)
        else:
            cand = _random_bits(rng, len(z))
        if cand != truth:
            return cand
    raise InfeasibleLengthError("could not corrupt equation")


def _glyph_bytes(rng, text: str, noise: float, pool: dict | None) -> np.ndarray:
    out = np.empty((len(text), GLYPH_SIZE, GLYPH_SIZE), dtype=np.uint8)
    for i, ch in enumerate(text):
        sym = Symbol.from_char(ch)
        seed = int(rng.integers(0, 2**31 - 1))
        if pool is None:
            out[i] = quantize(render_glyph(sym, seed, noise))
        else:
            imgs = pool[sym]
            out[i] = quantize(imgs[seed % len(imgs)])
    return out


def generate_dataset(config: GenConfig, seed: int, pool: dict[Symbol, np.ndarray] | None = None) -> Dataset:
    """Deterministically sample equations for every length in the config.

    Positives satisfy the hidden table; negatives are positives whose
    result digits were corrupted until the equation no longer holds.
    """
    table = config.hidden_table
    rng = np.random.default_rng(seed)
    records: list[tuple[str, bool]] = []
    for length in config.lengths:
        n_pos = _round_half_up(config.positive_fraction * config.per_length)
        flags = np.array([True] * n_pos + [False] * (config.per_length - n_pos))
        rng.shuffle(flags)
        for positive in flags:
            x, y, z = _sample_positive(rng, length, table)
            if not positive:
                z = _corrupt(rng, x, y, z, table)
            records.append((f"{x}+{y}={z}", bool(positive)))
    samples = [
        EquationSample(_glyph_bytes(rng, text, config.glyph_noise, pool), text, ver) for text, ver in records
    ]
    n_labeled = _round_half_up(config.labeled_fraction * len(samples))
    order = rng.permutation(len(samples))
    lab_idx = np.sort(order[:n_labeled])
    unl_idx = np.sort(order[n_labeled:])
    labeled = [samples[i] for i in lab_idx]
    unlabeled = [EquationSample(samples[i].glyphs) for i in unl_idx]
    truth = [records[i] for i in unl_idx]
    return Dataset(labeled, unlabeled, table, seed, truth)


# --------------------------------------------------------------------------
# On-disk format: manifest.jsonl + glyphs.bin
# --------------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write the learner-facing files; generator-private data goes to ``private/``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(directory / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as mf, open(
        directory / "glyphs.bin", "wb"
    ) as gf:
        for idx, (split, sample) in enumerate(
            [("labeled", s) for s in dataset.labeled] + [("unlabeled", s) for s in dataset.unlabeled]
        ):
            rec = {"id": idx, "length": sample.length, "split": split}
            if sample.veracity is not None:
                rec["veracity"] = sample.veracity
            if sample.truth is not None:
                rec["symbols"] = sample.truth
            blob = np.ascontiguousarray(sample.glyphs).tobytes()
            rec["glyph_offset"] = offset
            rec["glyph_count"] = sample.length
            offset += len(blob)
            gf.write(blob)
            mf.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    if dataset.hidden_table is not None or dataset.unlabeled_truth is not None:
        private = directory / "private"
        private.mkdir(exist_ok=True)
        payload = {
            "seed": dataset.seed,
            "hidden_code": None if dataset.hidden_table is None else dataset.hidden_table.code,
            "unlabeled_truth": dataset.unlabeled_truth,
        }
        (private / "hidden.json").write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory: str | Path, with_private: bool = False) -> Dataset:
    directory = Path(directory)
    blob = (directory / "glyphs.bin").read_bytes()
    labeled, unlabeled = [], []
    with open(directory / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            start, count = rec["glyph_offset"], rec["glyph_count"]
            raw = blob[start : start + count * GLYPH_BYTES]
            if len(raw) != count * GLYPH_BYTES:
                raise ValueError(f"record {rec['id']} points past the end of glyphs.bin")
            glyphs = np.frombuffer(raw, dtype=np.uint8).reshape(count, GLYPH_SIZE, GLYPH_SIZE).copy()
            sample = EquationSample(glyphs, rec.get("symbols"), rec.get("veracity"))
            (labeled if rec["split"] == "labeled" else unlabeled).append(sample)
    ds = Dataset(labeled, unlabeled)
    hidden = directory / "private" / "hidden.json"
    if with_private and hidden.exists():
        payload = json.loads(hidden.read_text(encoding="utf-8"))
        ds.seed = payload["seed"]
        if payload["hidden_code"] is not None:
            ds.hidden_table = OperationTable.from_code(payload["hidden_code"])
        if payload["unlabeled_truth"] is not None:
            ds.unlabeled_truth = [(t, bool(v)) for t, v in payload["unlabeled_truth"]]
    return ds


def all_equations(length: int, table: OperationTable) -> list[str]:
    """Every true equation of the given total length (small lengths only)."""
    budget = length - 2
    out = []
    for lx in range(1, budget - 1):
        for ly in range(1, budget - lx):
            for x in _all_bits(lx):
                for y in _all_bits(ly):
                    z = eval_equation(x, y, table)
                    if lx + ly + len(z) == budget:
                        out.append(f"{x}+{y}={z}")
    return out


def _all_bits(n: int) -> Sequence[str]:
    if n == 1:
        return ["0", "1"]
    return ["1" + format(i, f"0{n - 1}b") for i in range(1 << (n - 1))]
